//! Central finite-difference gradient checking.
//!
//! The numeric gradient only evaluates forward values, so it is independent
//! of every backward rule it validates.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor on the denominator so that
/// near-zero gradients do not dominate.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares tape gradients of `f` with respect to every entry of every
/// input against central finite differences. Returns the max relative error.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt_or_zero(&tape, v)).collect()
    };
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for k in 0..work[i].len() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_error(grad[k], numeric));
        }
    }
    Ok(worst)
}
