// Row-major matrix kernels. Every output element accumulates its products in
// ascending order of the shared index, so results do not depend on tiling or
// vector width. With the `fma` target feature each step is a fused
// multiply-add in both the tiled and the scalar path.

const MR: usize = 4;
const NR: usize = 8;

/// `out[i][j] += Σ_p a(i, p) · b[p][j]` where `a(i, p) = a[i·rs + p·ps]`.
/// Columns of `b` are packed into zero-padded panels of `NR`; each panel is
/// swept by register tiles of `MR × NR` outputs, with missing rows read from
/// a zero buffer. Steps where all rows of a tile are zero are skipped.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_strided(a: &[f64], rs: usize, ps: usize, b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let mut panel = alloc::vec![0.0; k * NR];
    let zeros = if m.is_multiple_of(MR) { alloc::vec![] } else { alloc::vec![0.0; k * ps] };
    let mut j0 = 0;
    while j0 < n {
        let nr = NR.min(n - j0);
        for p in 0..k {
            panel[p * NR..p * NR + nr].copy_from_slice(&b[p * n + j0..p * n + j0 + nr]);
        }
        let mut i0 = 0;
        while i0 < m {
            let mr = MR.min(m - i0);
            let mut acc = [[0.0f64; NR]; MR];
            let mut rows: [&[f64]; MR] = [&zeros; MR];
            for r in 0..mr {
                acc[r][..nr].copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + nr]);
                rows[r] = &a[(i0 + r) * rs..];
            }
            tile_kernel(&mut acc, rows, ps, &panel, k);
            for r in 0..mr {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + nr].copy_from_slice(&acc[r][..nr]);
            }
            i0 += mr;
        }
        j0 += nr;
    }
}

#[cfg(all(test, target_arch = "x86_64", target_feature = "fma"))]
fn madd(acc: f64, x: f64, y: f64) -> f64 {
    libm::fma(x, y, acc)
}

#[cfg(all(test, not(all(target_arch = "x86_64", target_feature = "fma"))))]
fn madd(acc: f64, x: f64, y: f64) -> f64 {
    acc + x * y
}

#[inline(always)]
fn tile_x(rows: [&[f64]; MR], p: usize, ps: usize) -> [f64; MR] {
    [rows[0][p * ps], rows[1][p * ps], rows[2][p * ps], rows[3][p * ps]]
}

#[cfg(all(target_arch = "x86_64", target_feature = "fma"))]
#[inline(always)]
fn tile_kernel(acc: &mut [[f64; NR]; MR], rows: [&[f64]; MR], ps: usize, panel: &[f64], k: usize) {
    use core::arch::x86_64::*;
    assert!(panel.len() >= k * NR);
    // SAFETY: the `fma` and `avx` target features are enabled at compile
    // time; panel reads stay below `k·NR` (checked above) and the
    // accumulator loads/stores cover the 8 lanes of each row.
    unsafe {
        let mut c: [[__m256d; 2]; MR] = [[_mm256_setzero_pd(); 2]; MR];
        for r in 0..MR {
            c[r][0] = _mm256_loadu_pd(acc[r].as_ptr());
            c[r][1] = _mm256_loadu_pd(acc[r].as_ptr().add(4));
        }
        let bp = panel.as_ptr();
        for p in 0..k {
            let x = tile_x(rows, p, ps);
            if x == [0.0; MR] {
                continue;
            }
            let b0 = _mm256_loadu_pd(bp.add(p * NR));
            let b1 = _mm256_loadu_pd(bp.add(p * NR + 4));
            for r in 0..MR {
                let xr = _mm256_set1_pd(x[r]);
                c[r][0] = _mm256_fmadd_pd(xr, b0, c[r][0]);
                c[r][1] = _mm256_fmadd_pd(xr, b1, c[r][1]);
            }
        }
        for r in 0..MR {
            _mm256_storeu_pd(acc[r].as_mut_ptr(), c[r][0]);
            _mm256_storeu_pd(acc[r].as_mut_ptr().add(4), c[r][1]);
        }
    }
}

#[cfg(not(all(target_arch = "x86_64", target_feature = "fma")))]
#[inline(always)]
fn tile_kernel(acc: &mut [[f64; NR]; MR], rows: [&[f64]; MR], ps: usize, panel: &[f64], k: usize) {
    for p in 0..k {
        let x = tile_x(rows, p, ps);
        if x == [0.0; MR] {
            continue;
        }
        let bv = &panel[p * NR..(p + 1) * NR];
        for r in 0..MR {
            for c in 0..NR {
                acc[r][c] += x[r] * bv[c];
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, k, 1, b, out, m, k, n);
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    gemm_strided(a, 1, m, b, out, m, k, n);
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, out, m, k, n);
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> alloc::vec::Vec<f64> {
    let mut out = alloc::vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
