//! Loop-by-loop multi-head attention used as a reference for the tape
//! implementation. Weights use the fused layout: for head `h`, columns
//! `3·h·dh ..` hold q, then k, then v.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use spformer_core::net::multi_head_attention;
use spformer_core::tensor::Tensor;

use crate::error::CliResult;

/// `z`: n×d, `u`: d×(3·heads·dh), `w_o`: (heads·dh)×d, all row-major.
pub fn brute_force_attention(z: &[Vec<f64>], u: &[Vec<f64>], w_o: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let n = z.len();
    let d = u.len();
    let dh = u[0].len() / (3 * heads);
    let mut cat = vec![vec![0.0; heads * dh]; n];
    for h in 0..heads {
        let col = |i: usize, c: usize| -> f64 { (0..d).map(|e| z[i][e] * u[e][c]).sum() };
        let q: Vec<Vec<f64>> = (0..n).map(|i| (0..dh).map(|c| col(i, 3 * h * dh + c)).collect()).collect();
        let k: Vec<Vec<f64>> = (0..n).map(|i| (0..dh).map(|c| col(i, 3 * h * dh + dh + c)).collect()).collect();
        let v: Vec<Vec<f64>> = (0..n).map(|i| (0..dh).map(|c| col(i, 3 * h * dh + 2 * dh + c)).collect()).collect();
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in 0..dh {
                cat[i][h * dh + c] = (0..n).map(|j| e[j] / total * v[j][c]).sum();
            }
        }
    }
    (0..n)
        .map(|i| (0..d).map(|c| (0..heads * dh).map(|p| cat[i][p] * w_o[p][c]).sum()).collect())
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub samples: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-bound..bound)).collect()).collect()
}

fn tensor(m: &[Vec<f64>]) -> CliResult<Tensor> {
    Ok(Tensor::from_rows(m)?)
}

/// Compares the library attention with the loops above on random inputs
/// with 1..=`max_tokens` rows.
pub fn run_oracle(samples: usize, seed: u64, max_tokens: usize, d_model: usize, heads: usize) -> CliResult<OracleReport> {
    const TOLERANCE: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dh = d_model / heads;
    let bound = (6.0 / (4 * d_model) as f64).sqrt();
    let mut max_abs_diff: f64 = 0.0;
    for _ in 0..samples {
        let n = rng.random_range(1..=max_tokens);
        let z = random_matrix(&mut rng, n, d_model, 1.0);
        let u = random_matrix(&mut rng, d_model, 3 * heads * dh, bound);
        let w = random_matrix(&mut rng, heads * dh, d_model, bound);
        let want = brute_force_attention(&z, &u, &w, heads);
        let got = multi_head_attention(&tensor(&z)?, &tensor(&u)?, &tensor(&w)?, heads)?;
        for (i, row) in want.iter().enumerate() {
            for (c, x) in row.iter().enumerate() {
                max_abs_diff = max_abs_diff.max((got.get(i, c) - x).abs());
            }
        }
    }
    Ok(OracleReport {
        samples,
        max_abs_diff,
        tolerance: TOLERANCE,
        passed: max_abs_diff <= TOLERANCE,
    })
}
