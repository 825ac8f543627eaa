//! Parameterized losses `f(x, θ)` seen through their gradient oracle.

use std::fmt;
use std::sync::Arc;

use crate::error::dim_err;
use crate::numdiff::{central_jacobian, DEFAULT_STEP};
use crate::{Error, Float, Mat, Result, Vector};

pub type GradientFn<T> = Arc<dyn Fn(&Vector<T>, &Vector<T>) -> Vector<T> + Send + Sync>;
pub type JacobianFn<T> = Arc<dyn Fn(&Vector<T>, &Vector<T>) -> Mat<T> + Send + Sync>;

/// Whether the regulated signal is the gradient of a function being
/// minimized, or the sign-flipped saddle field `(∇ₓL, −∇_λL)` of a Lagrangian.
/// Saddle fields have a nonsymmetric Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Minimization,
    Saddle,
}

#[derive(Clone)]
pub struct LossModel<T: Float> {
    x_dim: usize,
    theta_dim: usize,
    gradient: GradientFn<T>,
    hessian_xx: Option<JacobianFn<T>>,
    jacobian_xtheta: Option<JacobianFn<T>>,
    base_point: Vector<T>,
    kind: LossKind,
}

impl<T: Float> fmt::Debug for LossModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LossModel")
            .field("x_dim", &self.x_dim)
            .field("theta_dim", &self.theta_dim)
            .field("kind", &self.kind)
            .field("analytic_hessian", &self.hessian_xx.is_some())
            .field("analytic_jacobian_xtheta", &self.jacobian_xtheta.is_some())
            .field("base_point", &self.base_point)
            .finish()
    }
}

fn base_point_tol<T: Float>() -> T {
    T::lit(1e-8).max(T::default_epsilon() * T::lit(100.0))
}

impl<T: Float> LossModel<T> {
    /// Wraps a gradient oracle. `base_point` must be a critical point at `θ = 0`.
    pub fn new<G>(x_dim: usize, theta_dim: usize, gradient: G, base_point: Vector<T>) -> Result<Self>
    where
        G: Fn(&Vector<T>, &Vector<T>) -> Vector<T> + Send + Sync + 'static,
    {
        Self::with_kind(x_dim, theta_dim, gradient, base_point, LossKind::Minimization)
    }

    pub fn with_kind<G>(
        x_dim: usize,
        theta_dim: usize,
        gradient: G,
        base_point: Vector<T>,
        kind: LossKind,
    ) -> Result<Self>
    where
        G: Fn(&Vector<T>, &Vector<T>) -> Vector<T> + Send + Sync + 'static,
    {
        if base_point.len() != x_dim {
            return Err(dim_err(format!(
                "base point has {} entries, expected {x_dim}",
                base_point.len()
            )));
        }
        let g0 = gradient(&base_point, &Vector::zeros(theta_dim));
        if g0.len() != x_dim {
            return Err(dim_err(format!(
                "gradient oracle returns {} entries, expected {x_dim}",
                g0.len()
            )));
        }
        if !(g0.norm() <= base_point_tol()) {
            return Err(Error::Validation(format!(
                "base point is not critical at θ = 0: |∇f| = {:.3e}",
                g0.norm().to_f64_lossy()
            )));
        }
        Ok(LossModel {
            x_dim,
            theta_dim,
            gradient: Arc::new(gradient),
            hessian_xx: None,
            jacobian_xtheta: None,
            base_point,
            kind,
        })
    }

    /// Attaches an analytic `∂∇ₓf/∂x`; for minimization losses it must be
    /// symmetric at the base point.
    pub fn with_hessian<H>(mut self, hessian: H) -> Result<Self>
    where
        H: Fn(&Vector<T>, &Vector<T>) -> Mat<T> + Send + Sync + 'static,
    {
        let h0 = hessian(&self.base_point, &Vector::zeros(self.theta_dim));
        if h0.shape() != (self.x_dim, self.x_dim) {
            return Err(dim_err(format!(
                "hessian is {:?}, expected {}x{}",
                h0.shape(),
                self.x_dim,
                self.x_dim
            )));
        }
        if self.kind == LossKind::Minimization {
            let asym = (&h0 - h0.transpose()).amax();
            if asym > T::lit(1e-10) * T::one().max(h0.amax()) {
                return Err(Error::Validation(format!(
                    "analytic hessian is not symmetric (asymmetry {:.3e})",
                    asym.to_f64_lossy()
                )));
            }
        }
        self.hessian_xx = Some(Arc::new(hessian));
        Ok(self)
    }

    /// Attaches an analytic `∂∇ₓf/∂θ`.
    pub fn with_jacobian_xtheta<J>(mut self, jacobian: J) -> Result<Self>
    where
        J: Fn(&Vector<T>, &Vector<T>) -> Mat<T> + Send + Sync + 'static,
    {
        let j0 = jacobian(&self.base_point, &Vector::zeros(self.theta_dim));
        if j0.shape() != (self.x_dim, self.theta_dim) {
            return Err(dim_err(format!(
                "parameter jacobian is {:?}, expected {}x{}",
                j0.shape(),
                self.x_dim,
                self.theta_dim
            )));
        }
        self.jacobian_xtheta = Some(Arc::new(jacobian));
        Ok(self)
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn base_point(&self) -> &Vector<T> {
        &self.base_point
    }

    pub fn has_analytic_hessian(&self) -> bool {
        self.hessian_xx.is_some()
    }

    pub fn has_analytic_jacobian_xtheta(&self) -> bool {
        self.jacobian_xtheta.is_some()
    }

    pub fn gradient(&self, x: &Vector<T>, theta: &Vector<T>) -> Vector<T> {
        (self.gradient)(x, theta)
    }

    /// `R(x, θ) = ∂∇ₓf/∂x`, analytic when available.
    pub fn hessian_xx(&self, x: &Vector<T>, theta: &Vector<T>) -> Result<Mat<T>> {
        match &self.hessian_xx {
            Some(h) => Ok(h(x, theta)),
            None => central_jacobian(|xx| Ok(self.gradient(xx, theta)), x, T::lit(DEFAULT_STEP)),
        }
    }

    /// `Q(x, θ) = ∂∇ₓf/∂θ`, analytic when available.
    pub fn jacobian_xtheta(&self, x: &Vector<T>, theta: &Vector<T>) -> Result<Mat<T>> {
        match &self.jacobian_xtheta {
            Some(j) => Ok(j(x, theta)),
            None => central_jacobian(|th| Ok(self.gradient(x, th)), theta, T::lit(DEFAULT_STEP)),
        }
    }

    /// `(R, Q)` at `(x*∘, 0)`.
    pub fn base_jacobians(&self) -> Result<(Mat<T>, Mat<T>)> {
        let theta = Vector::zeros(self.theta_dim);
        Ok((
            self.hessian_xx(&self.base_point, &theta)?,
            self.jacobian_xtheta(&self.base_point, &theta)?,
        ))
    }

    /// The loss `f(x, Cθ)` over a new parameter space.
    pub fn reparameterize(&self, readout: Mat<T>) -> Result<LossModel<T>> {
        if readout.nrows() != self.theta_dim {
            return Err(dim_err(format!(
                "readout has {} rows, loss expects {} parameters",
                readout.nrows(),
                self.theta_dim
            )));
        }
        let inner = self.clone();
        let c = Arc::new(readout);
        let theta_dim = c.ncols();
        let g_inner = inner.gradient.clone();
        let c_g = c.clone();
        let mut out = LossModel::with_kind(
            self.x_dim,
            theta_dim,
            move |x, th| g_inner(x, &(&*c_g * th)),
            self.base_point.clone(),
            self.kind,
        )?;
        if let Some(h) = inner.hessian_xx.clone() {
            let c_h = c.clone();
            out.hessian_xx = Some(Arc::new(move |x, th| h(x, &(&*c_h * th))));
        }
        if let Some(j) = inner.jacobian_xtheta.clone() {
            let c_j = c.clone();
            out.jacobian_xtheta = Some(Arc::new(move |x, th| j(x, &(&*c_j * th)) * &*c_j));
        }
        Ok(out)
    }
}

/// `f(x, θ) = ½ xᵀRx + xᵀQθ`, gradient `Rx + Qθ`.
pub fn quadratic_loss<T: Float>(r: Mat<T>, q: Mat<T>) -> Result<LossModel<T>> {
    if !r.is_square() || q.nrows() != r.nrows() {
        return Err(dim_err(format!(
            "quadratic loss needs R n×n and Q n×p, got R {:?} and Q {:?}",
            r.shape(),
            q.shape()
        )));
    }
    crate::check_finite(&r, "R")?;
    crate::check_finite(&q, "Q")?;
    let asym = (&r - r.transpose()).amax();
    if asym > T::lit(1e-10) * T::one().max(r.amax()) {
        return Err(Error::Validation(format!(
            "R must be symmetric (asymmetry {:.3e})",
            asym.to_f64_lossy()
        )));
    }
    let n = r.nrows();
    let p = q.ncols();
    let (rg, qg) = (r.clone(), q.clone());
    LossModel::new(n, p, move |x, th| &rg * x + &qg * th, Vector::zeros(n))?
        .with_hessian(move |_, _| r.clone())?
        .with_jacobian_xtheta(move |_, _| q.clone())
}

/// Scalar quartic `(x−1)²(x+1)² + 8/(3√3)·x + θx` with critical points
/// `1/√3` (degenerate) and `−2/√3` (nondegenerate) at `θ = 0`.
pub fn quartic_example_loss<T: Float>() -> LossModel<T> {
    let three = T::lit(3.0);
    let shift = T::lit(8.0) / (three * three.sqrt());
    let four = T::lit(4.0);
    let base = -T::lit(2.0) / three.sqrt();
    LossModel::new(
        1,
        1,
        move |x, th| {
            let v = x[0];
            Vector::from_element(1, four * v * v * v - four * v + shift + th[0])
        },
        Vector::from_element(1, base),
    )
    .and_then(|l| l.with_hessian(|x, _| Mat::from_element(1, 1, T::lit(12.0) * x[0] * x[0] - T::lit(4.0))))
    .and_then(|l| l.with_jacobian_xtheta(|_, _| Mat::from_element(1, 1, T::one())))
    .expect("quartic loss is well formed")
}

/// Central-difference Jacobians `(R̂, Q̂)` of the gradient oracle at `(x, θ)`.
pub fn finite_diff_jacobians<T: Float>(
    loss: &LossModel<T>,
    x: &Vector<T>,
    theta: &Vector<T>,
    h: T,
) -> Result<(Mat<T>, Mat<T>)> {
    if x.len() != loss.x_dim() || theta.len() != loss.theta_dim() {
        return Err(dim_err("point does not match loss dimensions"));
    }
    let r = central_jacobian(|xx| Ok(loss.gradient(xx, theta)), x, h)?;
    let q = central_jacobian(|th| Ok(loss.gradient(x, th)), theta, h)?;
    Ok((r, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn quadratic_scalar_arithmetic() {
        let l = quadratic_loss(dmatrix![2.0], dmatrix![1.0]).unwrap();
        assert_relative_eq!(l.gradient(&dvector![3.0], &dvector![0.5])[0], 6.5);
        assert_eq!(l.gradient(&dvector![0.0], &dvector![0.0])[0], 0.0);
        assert_eq!(l.base_point(), &dvector![0.0]);
    }

    #[test]
    fn quadratic_regulated_signal_is_affine() {
        let r = dmatrix![2.0, 1.0; 1.0, 3.0];
        let q = dmatrix![1.0, 0.0, 2.0; 0.0, -1.0, 1.0];
        let l = quadratic_loss(r.clone(), q.clone()).unwrap();
        let x = dvector![0.3, -0.7];
        let th = dvector![1.0, 2.0, -1.0];
        assert_relative_eq!(l.gradient(&x, &th), &r * &x + &q * &th, epsilon = 1e-15);
    }

    #[test]
    fn quadratic_rejects_asymmetric_r() {
        let r = quadratic_loss(dmatrix![1.0, 2.0; 0.0, 1.0], dmatrix![1.0; 1.0]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn quartic_critical_points() {
        let l = quartic_example_loss::<f64>();
        let s3 = 3.0f64.sqrt();
        let zero = dvector![0.0];
        assert!(l.gradient(&dvector![-2.0 / s3], &zero)[0].abs() < 1e-14);
        assert!(l.gradient(&dvector![1.0 / s3], &zero)[0].abs() < 1e-14);
        let (r, q) = l.base_jacobians().unwrap();
        assert_relative_eq!(r[(0, 0)], 12.0, epsilon = 1e-12);
        assert_eq!(q[(0, 0)], 1.0);
    }

    #[test]
    fn finite_differences_match_quadratic() {
        let r = dmatrix![2.0, 1.0; 1.0, 3.0];
        let q = dmatrix![1.0, 0.5; -1.0, 2.0];
        let l = quadratic_loss(r.clone(), q.clone()).unwrap();
        let (rh, qh) = finite_diff_jacobians(&l, &dvector![1.0, -2.0], &dvector![0.4, 0.1], 1e-6).unwrap();
        assert_relative_eq!(rh, r, epsilon = 1e-6);
        assert_relative_eq!(qh, q, epsilon = 1e-6);
    }

    #[test]
    fn finite_differences_match_quartic() {
        let l = quartic_example_loss::<f64>();
        let (rh, qh) =
            finite_diff_jacobians(&l, l.base_point(), &dvector![0.0], 1e-6).unwrap();
        assert_relative_eq!(rh[(0, 0)], 12.0, epsilon = 1e-6);
        assert_relative_eq!(qh[(0, 0)], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn zero_step_is_precondition_error() {
        let l = quartic_example_loss::<f64>();
        let r = finite_diff_jacobians(&l, l.base_point(), &dvector![0.0], 0.0);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn non_critical_base_point_rejected() {
        let r = LossModel::<f64>::new(1, 1, |x, _| x.add_scalar(1.0), dvector![0.0]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn reparameterized_jacobian_composes() {
        let l = quartic_example_loss::<f64>();
        let c = dmatrix![1.0, 0.0];
        let lifted = l.reparameterize(c).unwrap();
        assert_eq!(lifted.theta_dim(), 2);
        let (_, q) = lifted.base_jacobians().unwrap();
        assert_eq!(q, dmatrix![1.0, 0.0]);
        let g = lifted.gradient(lifted.base_point(), &dvector![0.2, 5.0]);
        assert_relative_eq!(g[0], 0.2, epsilon = 1e-14);
    }

    #[test]
    fn quartic_in_single_precision() {
        let l = quartic_example_loss::<f32>();
        assert!(l.gradient(l.base_point(), &Vector::zeros(1))[0].abs() < 1e-5);
    }
}
