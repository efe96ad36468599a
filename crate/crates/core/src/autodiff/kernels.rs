//! Plain slice kernels shared by the forward and backward passes.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn gemm_at_b(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += av * gv;
            }
        }
    }
}

/// `c[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_a_bt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (p, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *cv += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// Swaps axes `a1 < a2` of a row-major buffer.
pub(crate) fn swap_axes(data: &[f64], shape: &[usize], a1: usize, a2: usize) -> Vec<f64> {
    debug_assert!(a1 < a2 && a2 < shape.len());
    let pre: usize = shape[..a1].iter().product();
    let d1 = shape[a1];
    let mid: usize = shape[a1 + 1..a2].iter().product();
    let d2 = shape[a2];
    let post: usize = shape[a2 + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    // in [pre, d1, mid, d2, post] -> out [pre, d2, mid, d1, post]
    for p in 0..pre {
        for i in 0..d1 {
            for m in 0..mid {
                for j in 0..d2 {
                    let src = (((p * d1 + i) * mid + m) * d2 + j) * post;
                    let dst = (((p * d2 + j) * mid + m) * d1 + i) * post;
                    out[dst..dst + post].copy_from_slice(&data[src..src + post]);
                }
            }
        }
    }
    out
}

pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let naive: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - naive).abs() < 1e-12);
            }
        }
        let mut at_c = vec![0.0; k * n];
        gemm_at_b(&a, &c, &mut at_c, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let naive: f64 = (0..m).map(|i| a[i * k + p] * c[i * n + j]).sum();
                assert!((at_c[p * n + j] - naive).abs() < 1e-12);
            }
        }
        let mut a_bt = vec![0.0; m * k];
        gemm_a_bt(&c, &b, &mut a_bt, m, k, n);
        for i in 0..m {
            for p in 0..k {
                let naive: f64 = (0..n).map(|j| c[i * n + j] * b[p * n + j]).sum();
                assert!((a_bt[i * k + p] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn swap_axes_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let out = swap_axes(&data, &shape, 0, 2);
        for i in 0..2 {
            for j in 0..3 {
                for l in 0..4 {
                    assert_eq!(out[(l * 3 + j) * 2 + i], data[(i * 3 + j) * 4 + l]);
                }
            }
        }
    }

    #[test]
    fn gelu_center_and_tails() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu(-10.0).abs() < 1e-12);
    }
}
