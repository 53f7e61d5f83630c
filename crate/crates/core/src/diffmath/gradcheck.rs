//! Central finite-difference checks of tape gradients.

use alloc::vec::Vec;

use super::{Tape, Tensor2, Var};
use crate::error::{bail, Result};

/// Worst agreement between tape and finite-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub analytic: f64,
    pub numeric: f64,
    /// `(input, flat index)` of the worst entry.
    pub location: (usize, usize),
    pub entries: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn eval<F>(inputs: &[Tensor2], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).shape() != (1, 1) {
        bail!(Usage, "gradient check needs a scalar output");
    }
    Ok(tape.scalar(out))
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `h` for every input entry.
pub fn check_gradients<F>(inputs: &[Tensor2], h: f64, floor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst = GradCheck {
        max_rel_err: 0.0,
        analytic: 0.0,
        numeric: 0.0,
        location: (0, 0),
        entries: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let g = grads.get_or_zeros(*var, inputs[k].shape());
        for idx in 0..inputs[k].data().len() {
            let x0 = inputs[k].data()[idx];
            probe[k].data_mut()[idx] = x0 + h;
            let up = eval(&probe, &f)?;
            probe[k].data_mut()[idx] = x0 - h;
            let down = eval(&probe, &f)?;
            probe[k].data_mut()[idx] = x0;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.data()[idx];
            let scale = analytic.abs().max(numeric.abs()).max(floor);
            let err = (analytic - numeric).abs() / scale;
            worst.entries += 1;
            if !(err <= worst.max_rel_err) {
                worst.max_rel_err = err;
                worst.analytic = analytic;
                worst.numeric = numeric;
                worst.location = (k, idx);
            }
        }
    }
    Ok(worst)
}
