use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_on_tape, td_targets};
use super::replay::Transition;
use crate::encoder::TokenSequence;
use crate::error::Result;
use crate::net::{bind, init_parameters, NetConfig, ParameterSet};
use crate::tensor::{OpKind, Tape, Tensor};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

/// One checked coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub coords: Vec<CoordCheck>,
    pub max_rel_err: f64,
    /// Parameter arrays with at least one checked coordinate.
    pub groups_checked: usize,
    pub groups_total: usize,
    pub passed: bool,
}

/// Small network with every optional path switched on.
pub fn gradcheck_net() -> NetConfig {
    NetConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_head: 4,
        mlp_ratio: 2,
        n_pos: 20,
        token_len: 12,
        n_cav: 2,
        learned_pos: true,
        ..NetConfig::default()
    }
}

fn random_seq(rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Arc<TokenSequence> {
    let n = 4;
    let data = (0..n * cfg.token_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Arc::new(TokenSequence {
        tokens: Tensor::new(alloc::vec![n, cfg.token_len], data).expect("shape"),
        positions: (0..n).map(|_| rng.random_range(0..cfg.n_pos)).collect(),
        cav_index_map: (0..cfg.n_cav).collect(),
    })
}

fn loss_and_grads(
    params: &ParameterSet,
    batch: &[&Transition],
    targets: &[f64],
    fault: Option<(OpKind, f64)>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    #[cfg(feature = "fault-injection")]
    if let Some((kind, factor)) = fault {
        tape.inject_fault(kind, factor);
    }
    #[cfg(not(feature = "fault-injection"))]
    let _ = fault;
    let vars = bind(&mut tape, params, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let loss = loss_on_tape(&mut tape, &vars, &params.config, batch, targets, &mut rng, false)?;
    let mut g = tape.backward(loss)?;
    let grads = vars
        .iter()
        .map(|&v| g.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    Ok((tape.value(loss).data()[0], grads))
}

fn loss_only(params: &ParameterSet, batch: &[&Transition], targets: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let loss = loss_on_tape(&mut tape, &vars, &params.config, batch, targets, &mut rng, false)?;
    Ok(tape.value(loss).data()[0])
}

fn run(samples: usize, seed: u64, fault: Option<(OpKind, f64)>) -> Result<GradCheckReport> {
    let cfg = gradcheck_net();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_parameters(&cfg, &mut rng)?;
    // move gains and biases off their initial constants
    for t in params.tensors.iter_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    let batch: Vec<Transition> = (0..3)
        .map(|k| Transition {
            state: random_seq(&mut rng, &cfg),
            actions: (0..cfg.n_cav).map(|_| rng.random_range(0..cfg.n_actions)).collect(),
            reward: rng.random_range(-5.0..5.0),
            next_state: random_seq(&mut rng, &cfg),
            done: k == 2,
        })
        .collect();
    let refs: Vec<&Transition> = batch.iter().collect();
    let targets = td_targets(&refs, &params, 1.0)?;
    let (_, grads) = loss_and_grads(&params, &refs, &targets, fault)?;

    let names = params.names();
    let groups = params.tensors.len();
    let mut coords = Vec::with_capacity(samples);
    let mut seen = alloc::vec![false; groups];
    for k in 0..samples {
        let g = k % groups;
        let index = rng.random_range(0..params.tensors[g].len());
        let orig = params.tensors[g].data()[index];
        params.tensors[g].data_mut()[index] = orig + STEP;
        let up = loss_only(&params, &refs, &targets)?;
        params.tensors[g].data_mut()[index] = orig - STEP;
        let down = loss_only(&params, &refs, &targets)?;
        params.tensors[g].data_mut()[index] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = grads[g].data()[index];
        let scale = libm::fabs(analytic) + libm::fabs(numeric);
        let rel_err = if scale == 0.0 { 0.0 } else { libm::fabs(analytic - numeric) / scale.max(1e-8) };
        seen[g] = true;
        coords.push(CoordCheck {
            param: names[g].clone(),
            index,
            analytic,
            numeric,
            rel_err,
        });
    }
    let max_rel_err = coords.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        seed,
        max_rel_err,
        groups_checked: seen.iter().filter(|&&s| s).count(),
        groups_total: groups,
        passed: !coords.is_empty() && max_rel_err < GRADCHECK_TOLERANCE,
        coords,
    })
}

/// Compares tape gradients of the joint loss with central differences on
/// `samples` coordinates, cycling through every parameter array.
pub fn gradient_check(samples: usize, seed: u64) -> Result<GradCheckReport> {
    run(samples, seed, None)
}

/// Same check with the backward rule of `kind` scaled by `factor`.
#[cfg(feature = "fault-injection")]
pub fn gradient_check_with_fault(samples: usize, seed: u64, kind: OpKind, factor: f64) -> Result<GradCheckReport> {
    run(samples, seed, Some((kind, factor)))
}
