use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - b| / max(floor, |a| + |b|)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Coordinates whose gradient is far below the largest one are dominated by
/// finite-difference round-off; their error is measured against this
/// fraction of the largest analytic magnitude instead.
pub const SCALE_FLOOR: f64 = 1e-2;

/// Compare the tape gradient of a scalar function against central finite
/// differences and return the worst relative error over all coordinates.
///
/// `f` builds the scalar on the supplied tape from the input variable. It is
/// evaluated twice at the unperturbed point; differing results are rejected.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::usage(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if value.len() != 1 {
            return Err(Error::usage("grad_check function must return a scalar"));
        }
        Ok(value.item())
    };
    let first = eval(input)?;
    let second = eval(input)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::usage("function is not deterministic"));
    }

    let mut tape = Tape::new();
    let v = tape.leaf(input.clone(), true);
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape()));

    let largest = analytic.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (SCALE_FLOOR * largest).max(1e-8);
    let mut worst: f64 = 0.0;
    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric, floor));
    }
    Ok(worst)
}
