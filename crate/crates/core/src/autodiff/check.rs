use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Largest relative disagreement between the analytic gradient of `f` at `p`
/// and a central finite difference with the given `step`, over every
/// coordinate of `p`.
///
/// The per-coordinate error is `|a - c| / max(|a|, |c|, 1e-12)`. Non-finite
/// coordinates count as `f64::INFINITY`.
pub fn finite_difference_check<F>(f: F, p: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = (0..p.numel()).map(|i| (0, i)).collect();
    finite_difference_check_coords(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(p),
        &coords,
        step,
    )
}

/// Multi-parameter variant checking only the listed `(param, coordinate)`
/// pairs.
pub fn finite_difference_check_coords<F>(
    f: F,
    params: &[Tensor],
    coords: &[(usize, usize)],
    step: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item().unwrap_or(f64::NAN))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for &(pi, ci) in coords {
        let analytic = grads.get(vars[pi]).map_or(f64::NAN, |t| t.data()[ci]);
        let orig = work[pi].data()[ci];
        work[pi].data_mut()[ci] = orig + step;
        let plus = eval(&work)?;
        work[pi].data_mut()[ci] = orig - step;
        let minus = eval(&work)?;
        work[pi].data_mut()[ci] = orig;
        let central = (plus - minus) / (2.0 * step);
        let err = (analytic - central).abs() / analytic.abs().max(central.abs()).max(1e-12);
        worst = worst.max(if err.is_finite() { err } else { f64::INFINITY });
    }
    Ok(worst)
}
