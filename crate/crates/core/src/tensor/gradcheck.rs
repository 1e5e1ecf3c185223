use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for [`relative_error`]; gradients smaller than this are
/// compared absolutely. In f64 with h = 1e-3 a central difference of an O(1)
/// loss carries ~1e-12 of roundoff, so a floor near 1e-8 would turn that
/// noise alone into a 1e-4 "relative" error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates compared absolutely because both gradients were under the floor.
    pub below_floor: usize,
}

fn eval_scalar<F>(f: &F, x: Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x, false);
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::Usage("gradient check needs a scalar function".into()));
    }
    Ok(value.data()[0])
}

/// Compare the tape gradient of `f` at `x` with central differences
/// `(f(x+h) - f(x-h)) / 2h` on every coordinate.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_difference_check_at(f, x, h, &all)
}

/// As [`finite_difference_check`] but only on the listed coordinates.
pub fn finite_difference_check_at<F>(
    f: F,
    x: &Tensor<f64>,
    h: f64,
    indices: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let zeros = Tensor::zeros(x.shape().to_vec());
    let analytic = grads.get(v).unwrap_or(&zeros);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        below_floor: 0,
    };
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval_scalar(&f, plus)? - eval_scalar(&f, minus)?) / (2.0 * h);
        let err = relative_error(analytic.data()[i], numeric);
        if analytic.data()[i].abs().max(numeric.abs()) < RELATIVE_FLOOR {
            report.below_floor += 1;
        }
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// `Σ v ⊙ weights`, turning a tensor-valued op into a scalar for checking.
pub fn project(tape: &mut Tape<f64>, v: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.hadamard(v, w)?;
    tape.sum(prod)
}
