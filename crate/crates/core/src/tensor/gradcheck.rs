use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Comparison of tape gradients with central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Per-element `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
}

/// Checks `f: Tensor -> scalar` at `input` with central differences of step `eps`.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.variable(input.clone());
    let y = f(&mut tape, x)?;
    let analytic = if tape.requires_grad(y) {
        tape.backward(y)?;
        tape.grad(x).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; input.numel()])
    } else {
        vec![0.0; input.numel()]
    };

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::inference();
        let x = tape.constant(t);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };
    let mut numeric = Vec::with_capacity(input.numel());
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += eps;
        let mut minus = input.clone();
        minus.data_mut()[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    let rel_err: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff = (a - n).abs();
            if diff == 0.0 {
                0.0
            } else {
                diff / a.abs().max(n.abs()).max(1e-6)
            }
        })
        .collect();
    let max_rel_err = rel_err.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport { analytic, numeric, rel_err, max_rel_err })
}
