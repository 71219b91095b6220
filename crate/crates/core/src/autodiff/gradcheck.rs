use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms; below it the
/// central difference is dominated by cancellation noise.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)` over coordinates.
    pub max_rel_error: f64,
    /// Distance of the base point from the nearest recorded kink.
    pub kink_margin: f64,
    pub value: f64,
}

/// Compares reverse-mode gradients of `f` at `point` with central
/// differences of step `step` in every coordinate of every input tensor.
pub fn finite_diff_check<F>(f: F, point: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::data(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let value = tape.value(root).item();
    if !value.is_finite() {
        return Err(Error::Divergence(format!("function value {value} at base point")));
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let r = f(&mut t, &vs)?;
        let y = t.value(r).item();
        if !y.is_finite() {
            return Err(Error::Divergence(format!("function value {y} near base point")));
        }
        Ok(y)
    };

    let mut max_rel_error: f64 = 0.0;
    let mut work: Vec<Tensor> = point.to_vec();
    for (k, t) in point.iter().enumerate() {
        for i in 0..t.len() {
            let x0 = t.data()[i];
            work[k].data_mut()[i] = x0 + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel_error = max_rel_error.max(rel);
        }
    }
    Ok(GradCheck {
        max_rel_error,
        kink_margin: tape.kink_margin(),
        value,
    })
}
