//! Central finite-difference verification of analytic gradients.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::Result;

/// Step used by the central-difference oracle.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient tensors whose largest entry is below this are compared in
/// absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// Lower bound of each tensor's error scale, as a fraction of the largest
/// gradient entry over all checked inputs.
pub const GLOBAL_FRACTION: f64 = 1e-3;

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `(input index, flat element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Error of one entry relative to the magnitude of its gradient tensor
/// (`scale` is the largest absolute analytic or numeric entry).
pub fn rel_err(analytic: f64, numeric: f64, scale: f64) -> f64 {
    (analytic - numeric).abs() / scale.max(analytic.abs()).max(numeric.abs()).max(REL_FLOOR)
}

/// Evaluates `build` on fresh graphs, comparing backprop gradients with
/// central differences for the listed coordinates of every input
/// (`None` = all coordinates).
pub fn check_gradients<F>(
    build: F,
    inputs: &[Tensor<f64>],
    coords: Option<&[Vec<usize>]>,
    step: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut per_input = Vec::with_capacity(vars.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let all: Vec<usize>;
        let idxs: &[usize] = match coords {
            Some(c) => &c[i],
            None => {
                all = (0..inputs[i].numel()).collect();
                &all
            }
        };
        let mut numerics = Vec::with_capacity(idxs.len());
        for &j in idxs {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numerics.push((j, (fp - fm) / (2.0 * step)));
        }
        let scale = numerics.iter().map(|(_, n)| n.abs()).fold(analytic.max_abs(), f64::max);
        per_input.push((analytic, numerics, scale));
    }
    // Directions the output is invariant to (zero gradient) are judged
    // against the largest gradient of the whole check.
    let global = per_input.iter().map(|p| p.2).fold(0.0, f64::max);
    let mut report = GradReport { max_rel_err: 0.0, worst: None, checked: 0 };
    for (i, (analytic, numerics, scale)) in per_input.into_iter().enumerate() {
        let scale = scale.max(GLOBAL_FRACTION * global);
        for (j, numeric) in numerics {
            let a = analytic.data()[j];
            let e = rel_err(a, numeric, scale);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = e;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}
