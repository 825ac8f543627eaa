//! Synthesis, simulation and analysis of gradient-feedback optimization
//! algorithms that track the critical points of time-varying problems.
//!
//! A time-varying problem is a loss `f(x, θ)` whose parameter `θ(t)` is
//! produced by an autonomous exosystem `θ̇ = s(θ)`. An algorithm only sees
//! gradient evaluations `y = ∇ₓf(x, θ)` and must drive `y(t) → 0`. The
//! construction in [`regulator::algorithm_one`] pairs a Luenberger observer of
//! the exosystem with a parameter-feedback map, so the controller carries a
//! copy of the exosystem as its internal model.
//!
//! All numerical code is generic over a [`Float`] scalar (`f32` or `f64`).
//! The `f64` aliases at the crate root are what applications normally use.

// negated comparisons are how NaN inputs get rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exosystem;
pub mod loss;
pub mod mismatch;
pub mod numdiff;
pub mod recipes;
pub mod regulator;
pub mod simulate;
pub mod spectral;
pub mod traffic;

use nalgebra as na;
use num_traits as nt;

pub use error::{Error, Result};

/// Scalar types the numerical core is generic over.
pub trait Float:
    na::RealField + Copy + nt::FromPrimitive + nt::ToPrimitive + nt::FloatConst
{
    /// Converts an `f64` constant into `Self`.
    fn lit(v: f64) -> Self {
        <Self as nt::FromPrimitive>::from_f64(v).expect("f64 constant must be representable")
    }

    /// Lossy conversion to `f64`, used for reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        nt::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Float for f32 {}
impl Float for f64 {}

/// Dense matrix over a generic scalar.
pub type Mat<T> = na::DMatrix<T>;
/// Dense column vector over a generic scalar.
pub type Vector<T> = na::DVector<T>;

pub type Matrix = Mat<f64>;
pub type Vec64 = Vector<f64>;

pub type SpectralReport = spectral::SpectralReport<f64>;
pub type Exosystem = exosystem::Exosystem<f64>;
pub type LossModel = loss::LossModel<f64>;
pub type ParameterFeedbackMap = regulator::ParameterFeedbackMap<f64>;
pub type GradientFeedbackAlgorithm = regulator::GradientFeedbackAlgorithm<f64>;
pub type Trajectory = simulate::Trajectory<f64>;
pub type IntegratorConfig = simulate::IntegratorConfig<f64>;
pub type LinearClosedLoop = mismatch::LinearClosedLoop<f64>;

pub(crate) fn check_finite<T: Float>(m: &Mat<T>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} has non-finite entries")))
    }
}
