//! Central finite differences.

use crate::{Error, Float, Mat, Result, Vector};

/// Step used whenever an analytic Jacobian is unavailable.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Central-difference Jacobian of `f` at `at`.
pub fn central_jacobian<T, F>(f: F, at: &Vector<T>, h: T) -> Result<Mat<T>>
where
    T: Float,
    F: Fn(&Vector<T>) -> Result<Vector<T>>,
{
    if !(h > T::zero()) {
        return Err(Error::Precondition("finite-difference step must be positive".into()));
    }
    let two_h = h + h;
    let mut columns = Vec::with_capacity(at.len());
    for j in 0..at.len() {
        let mut plus = at.clone();
        plus[j] += h;
        let mut minus = at.clone();
        minus[j] -= h;
        let fp = f(&plus)?;
        let fm = f(&minus)?;
        if fp.iter().chain(fm.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite evaluation while differentiating along coordinate {j}"
            )));
        }
        columns.push((fp - fm) / two_h);
    }
    if columns.is_empty() {
        let rows = f(at)?.len();
        return Ok(Mat::zeros(rows, 0));
    }
    Ok(Mat::from_columns(&columns))
}
