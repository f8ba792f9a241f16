//! Central finite-difference gradient checks in extended precision.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error with an absolute floor so near-zero components do not
/// dominate.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of a scalar function against central
/// differences with step `h`. `f` must record a fresh forward pass on the
/// given tape from the supplied input vars. At most `max_per_input` entries
/// of each input are perturbed (evenly strided).
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, max_per_input: usize, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::<f64>::new();
    let vars = inputs.iter().map(|t| tape.param(t)).collect::<Result<Vec<_>>>()?;
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::<f64>::new();
        let vars = perturbed.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = (n / max_per_input.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i][j];
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
