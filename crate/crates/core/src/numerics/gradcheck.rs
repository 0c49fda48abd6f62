//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::numerics::ops::GradPair;
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Differences below this magnitude count as agreement regardless of scale.
pub const ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub rel_tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} at coord {} over {} coords (tol {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.worst_index,
            self.checked,
            self.rel_tol
        )
    }
}

/// Checks the analytic gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate.
pub fn gradcheck<T, F>(f: F, x: &Tensor<T>, h: f64, rel_tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<GradPair<T>>,
{
    let pair = f(x)?;
    if pair.value.numel() != 1 {
        return Err(Error::InvalidArg(format!(
            "gradcheck target must be scalar-valued, got shape {:?}",
            pair.value.shape()
        )));
    }
    pair.value.check_finite("gradcheck f(x)")?;
    let grads = pair.backward(&Tensor::filled(pair.value.shape(), T::one()));
    if grads.len() != 1 || grads[0].shape() != x.shape() {
        return Err(Error::ShapeMismatch(
            "gradcheck expects a single input gradient matching x".into(),
        ));
    }
    let analytic = &grads[0];

    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    let step = T::of_f64(h);
    let mut xp = x.clone();
    for i in 0..x.numel() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + step;
        let fp = f(&xp)?.value.item().as_f64();
        xp.data_mut()[i] = orig - step;
        let fm = f(&xp)?.value.item().as_f64();
        xp.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck f(x±h) at coord {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i].as_f64();
        let diff = (a - numeric).abs();
        let rel = if diff <= ABS_FLOOR {
            0.0
        } else {
            diff / a.abs().max(numeric.abs()).max(ABS_FLOOR)
        };
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_index: worst,
        checked: x.numel(),
        rel_tol,
        passed: max_rel <= rel_tol,
    })
}
