//! Autonomous parameter generators `θ̇ = s(θ)`.

use std::fmt;
use std::sync::Arc;

use crate::error::dim_err;
use crate::numdiff::{central_jacobian, DEFAULT_STEP};
use crate::spectral::eigenvalues;
use crate::{Error, Float, Mat, Result, Vector};

pub type VectorField<T> = Arc<dyn Fn(&Vector<T>) -> Vector<T> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExosystemKind {
    Linear,
    HarmonicBank,
    Custom,
}

/// An exosystem with an equilibrium at the origin.
#[derive(Clone)]
pub struct Exosystem<T: Float> {
    dim: usize,
    field: Option<VectorField<T>>,
    jacobian: Mat<T>,
    kind: ExosystemKind,
}

impl<T: Float> fmt::Debug for Exosystem<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Exosystem")
            .field("dim", &self.dim)
            .field("kind", &self.kind)
            .field("jacobian", &self.jacobian)
            .finish()
    }
}

impl<T: Float> Exosystem<T> {
    /// `θ̇ = Sθ`.
    pub fn linear(s: Mat<T>) -> Result<Self> {
        if !s.is_square() {
            return Err(dim_err(format!(
                "exosystem matrix must be square, got {}x{}",
                s.nrows(),
                s.ncols()
            )));
        }
        crate::check_finite(&s, "exosystem matrix")?;
        Ok(Exosystem {
            dim: s.nrows(),
            field: None,
            jacobian: s,
            kind: ExosystemKind::Linear,
        })
    }

    /// Block-diagonal bank of harmonic generators `[[0, 1], [−ω², 0]]`, one per
    /// frequency, followed by a `1×1` zero block when `include_constant` is set.
    pub fn harmonic_bank(frequencies: &[T], include_constant: bool) -> Result<Self> {
        for (i, w) in frequencies.iter().enumerate() {
            if !(*w > T::zero()) || !w.is_finite() {
                return Err(Error::Validation(format!(
                    "frequency #{i} must be strictly positive, got {}",
                    w.to_f64_lossy()
                )));
            }
            if frequencies[..i].iter().any(|v| v == w) {
                return Err(Error::Validation(format!(
                    "duplicate frequency {}",
                    w.to_f64_lossy()
                )));
            }
        }
        let dim = 2 * frequencies.len() + usize::from(include_constant);
        let mut s = Mat::zeros(dim, dim);
        for (k, w) in frequencies.iter().enumerate() {
            s[(2 * k, 2 * k + 1)] = T::one();
            s[(2 * k + 1, 2 * k)] = -(*w * *w);
        }
        Ok(Exosystem {
            dim,
            field: None,
            jacobian: s,
            kind: ExosystemKind::HarmonicBank,
        })
    }

    /// User-supplied vector field. The Jacobian at the origin is taken by
    /// central differences; `s(0)` must vanish.
    pub fn custom<F>(dim: usize, field: F) -> Result<Self>
    where
        F: Fn(&Vector<T>) -> Vector<T> + Send + Sync + 'static,
    {
        let origin = Vector::zeros(dim);
        let at_origin = field(&origin);
        if at_origin.len() != dim {
            return Err(dim_err(format!(
                "vector field returns {} components for a {dim}-dimensional state",
                at_origin.len()
            )));
        }
        if at_origin.amax() > T::lit(1e-12) {
            return Err(Error::Validation(format!(
                "the origin must be an equilibrium, |s(0)| = {:.3e}",
                at_origin.amax().to_f64_lossy()
            )));
        }
        let jacobian = central_jacobian(|th| Ok(field(th)), &origin, T::lit(DEFAULT_STEP))?;
        Ok(Exosystem {
            dim,
            field: Some(Arc::new(field)),
            jacobian,
            kind: ExosystemKind::Custom,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> ExosystemKind {
        self.kind
    }

    /// `S = ∂s/∂θ` at the origin.
    pub fn jacobian_at_origin(&self) -> &Mat<T> {
        &self.jacobian
    }

    pub fn vector_field(&self, theta: &Vector<T>) -> Vector<T> {
        match &self.field {
            Some(f) => f(theta),
            None => &self.jacobian * theta,
        }
    }

    /// Necessary spectral form of Poisson stability: every eigenvalue of `S`
    /// lies within `tol` of the imaginary axis.
    pub fn check_neutral_spectrum(&self, tol: T) -> Result<bool> {
        if !(tol > T::zero()) {
            return Err(Error::Precondition("tolerance must be positive".into()));
        }
        let report = eigenvalues(&self.jacobian)?;
        Ok(report.eigenvalues.iter().all(|l| l.re.abs() <= tol))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn linear_constructor() {
        let e = Exosystem::linear(Mat::<f64>::zeros(2, 2)).unwrap();
        assert_eq!(e.dim(), 2);
        assert_eq!(e.kind(), ExosystemKind::Linear);
        assert_eq!(e.vector_field(&dvector![1.0, -2.0]), dvector![0.0, 0.0]);
        let jordan = Exosystem::linear(dmatrix![0.0, 1.0; 0.0, 0.0]).unwrap();
        assert_eq!(jordan.vector_field(&dvector![3.0, 2.0]), dvector![2.0, 0.0]);
        assert!(matches!(
            Exosystem::linear(Mat::<f64>::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn harmonic_bank_shapes() {
        let one = Exosystem::<f64>::harmonic_bank(&[1.0], false).unwrap();
        assert_eq!(one.jacobian_at_origin(), &dmatrix![0.0, 1.0; -1.0, 0.0]);
        let constant = Exosystem::<f64>::harmonic_bank(&[], true).unwrap();
        assert_eq!(constant.jacobian_at_origin(), &Mat::zeros(1, 1));
        let traffic = Exosystem::harmonic_bank(&[0.1, 50.0f64.sqrt()], true).unwrap();
        let s = traffic.jacobian_at_origin();
        assert_eq!(s.shape(), (5, 5));
        assert_relative_eq!(s[(1, 0)], -0.01, epsilon = 1e-15);
        assert_relative_eq!(s[(3, 2)], -50.0, epsilon = 1e-12);
        assert_eq!(s[(0, 1)], 1.0);
        assert_eq!(s[(2, 3)], 1.0);
        assert_eq!(s.row(4).amax(), 0.0);
    }

    #[test]
    fn harmonic_bank_validation() {
        assert!(matches!(
            Exosystem::<f64>::harmonic_bank(&[1.0, 1.0], false),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            Exosystem::<f64>::harmonic_bank(&[0.0], false),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            Exosystem::<f64>::harmonic_bank(&[-2.0], true),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn neutral_spectrum_checks() {
        let h = Exosystem::<f64>::harmonic_bank(&[1.0], false).unwrap();
        assert!(h.check_neutral_spectrum(1e-9).unwrap());
        let damped = Exosystem::linear(dmatrix![-1.0, 0.0; 0.0, 0.0]).unwrap();
        assert!(!damped.check_neutral_spectrum(1e-9).unwrap());
        let traffic = Exosystem::harmonic_bank(&[0.1, 50.0f64.sqrt()], true).unwrap();
        assert!(traffic.check_neutral_spectrum(1e-9).unwrap());
        let jordan = Exosystem::linear(dmatrix![0.0, 1.0; 0.0, 0.0]).unwrap();
        assert!(jordan.check_neutral_spectrum(1e-6).unwrap());
    }

    #[test]
    fn custom_field_jacobian_by_differences() {
        let e = Exosystem::<f64>::custom(2, |th| dvector![th[1], -th[0] - th[1] * th[1]]).unwrap();
        assert_eq!(e.kind(), ExosystemKind::Custom);
        assert_relative_eq!(
            e.jacobian_at_origin(),
            &dmatrix![0.0, 1.0; -1.0, 0.0],
            epsilon = 1e-8
        );
        let off = Exosystem::<f64>::custom(1, |th| dvector![th[0] + 1.0]);
        assert!(matches!(off, Err(Error::Validation(_))));
    }
}
