//! Central finite-difference verification of reverse-mode gradients.

use thiserror::Error;

use super::tape::{Tape, Var};
use super::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("finite-difference estimate for input {input} coordinate {coord} is not finite ({value})")]
    NonFinite { input: usize, coord: usize, value: f64 },
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Checks `f` at a single input tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck, GradCheckError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Checks `f` with respect to every coordinate of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck, GradCheckError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    grad_check_sampled(f, inputs, eps, usize::MAX)
}

/// Like [`grad_check_many`] but probes at most `per_input` evenly spaced
/// coordinates of each input.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor], eps: f64, per_input: usize) -> Result<GradCheck, GradCheckError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let stride = if per_input >= n { 1 } else { n.div_ceil(per_input) };
        for c in (0..n).step_by(stride) {
            let orig = x.data()[c];
            work[i].data_mut()[c] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[c] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(GradCheckError::NonFinite {
                    input: i,
                    coord: c,
                    value: numeric,
                });
            }
            let a = analytic[i].data()[c];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > report.max_rel_error || report.coords_checked == 0 {
                report.max_rel_error = err;
                report.worst = (i, c);
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
