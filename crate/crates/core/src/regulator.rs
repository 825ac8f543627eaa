//! Parameter-feedback maps and observer-based gradient-feedback algorithms.
//!
//! A parameter-feedback map `x = H_c(θ)` zeros the gradient when `θ` is
//! measured. [`algorithm_one`] turns such a map into a gradient-feedback
//! algorithm
//!
//! ```text
//! ż = F_c(z, y) = s(z) + L (y − ∇ₓf(H_c(z), z)),    x = G_c(z) = H_c(z)
//! ```
//!
//! whose state `z` is a Luenberger estimate of `θ`. Because `F_c(θ, 0) = s(θ)`
//! the controller carries an exact copy of the exosystem.

use std::fmt;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::dim_err;
use crate::exosystem::Exosystem;
use crate::loss::LossModel;
use crate::numdiff::{central_jacobian, DEFAULT_STEP};
use crate::spectral::{
    eigenvalues, is_detectable, pseudo_inverse, synthesize_observer_gain, SpectralReport,
    DEFAULT_RANK_TOL,
};
use crate::{Error, Float, Mat, Result, Vector};

pub const DEFAULT_SAMPLE_RADIUS: f64 = 1.0;
pub const DEFAULT_SAMPLE_COUNT: usize = 100;
/// Maximum number of step halvings in the damped Newton solve.
pub const MAX_HALVINGS: usize = 60;

enum MapKind<T: Float> {
    Linear(Mat<T>),
    Newton {
        loss: LossModel<T>,
        tol: T,
        max_iter: usize,
        warm_start: Mutex<Vector<T>>,
    },
}

/// A static map `θ ↦ x = H_c(θ)`.
#[derive(Clone)]
pub struct ParameterFeedbackMap<T: Float> {
    kind: Arc<MapKind<T>>,
    x_dim: usize,
    theta_dim: usize,
}

impl<T: Float> fmt::Debug for ParameterFeedbackMap<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.kind {
            MapKind::Linear(h) => f.debug_tuple("ParameterFeedbackMap::Linear").field(h).finish(),
            MapKind::Newton { tol, max_iter, .. } => f
                .debug_struct("ParameterFeedbackMap::Newton")
                .field("tol", tol)
                .field("max_iter", max_iter)
                .finish(),
        }
    }
}

impl<T: Float> ParameterFeedbackMap<T> {
    pub fn linear(h_c: Mat<T>) -> Self {
        ParameterFeedbackMap {
            x_dim: h_c.nrows(),
            theta_dim: h_c.ncols(),
            kind: Arc::new(MapKind::Linear(h_c)),
        }
    }

    /// Implicit map solved by damped Newton on `∇ₓf(·, θ) = 0`, warm-started
    /// from the previous solution and anchored at the loss base point.
    pub fn newton(loss: LossModel<T>, tol: T, max_iter: usize) -> Result<Self> {
        let anchor = loss.base_point().clone();
        let x0 = newton_hc(&loss, &Vector::zeros(loss.theta_dim()), &anchor, tol, max_iter)?;
        if (&x0 - &anchor).amax() > T::lit(1e-8).max(T::default_epsilon().sqrt()) {
            return Err(Error::Validation(
                "Newton map does not return the base point at θ = 0".into(),
            ));
        }
        Ok(ParameterFeedbackMap {
            x_dim: loss.x_dim(),
            theta_dim: loss.theta_dim(),
            kind: Arc::new(MapKind::Newton {
                loss,
                tol,
                max_iter,
                warm_start: Mutex::new(x0),
            }),
        })
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    /// The matrix `H_c` of a linear map.
    pub fn matrix(&self) -> Option<&Mat<T>> {
        match &*self.kind {
            MapKind::Linear(h) => Some(h),
            MapKind::Newton { .. } => None,
        }
    }

    pub fn apply(&self, theta: &Vector<T>) -> Result<Vector<T>> {
        if theta.len() != self.theta_dim {
            return Err(dim_err(format!(
                "parameter has {} entries, map expects {}",
                theta.len(),
                self.theta_dim
            )));
        }
        match &*self.kind {
            MapKind::Linear(h) => Ok(h * theta),
            MapKind::Newton {
                loss,
                tol,
                max_iter,
                warm_start,
            } => {
                let guess = warm_start.lock().expect("warm start lock").clone();
                let x = match newton_hc(loss, theta, &guess, *tol, *max_iter) {
                    Ok(x) => x,
                    Err(_) => newton_hc(loss, theta, loss.base_point(), *tol, *max_iter)?,
                };
                *warm_start.lock().expect("warm start lock") = x.clone();
                Ok(x)
            }
        }
    }
}

/// Linear parameter feedback `H_c = −R†Q`.
///
/// Requires `Im Q ⊆ Im R`, checked as `‖(I − RR†)Q‖ ≤ tol` column by column.
pub fn quadratic_hc<T: Float>(r: &Mat<T>, q: &Mat<T>, tol: T) -> Result<ParameterFeedbackMap<T>> {
    if !r.is_square() || q.nrows() != r.nrows() {
        return Err(dim_err(format!(
            "quadratic_hc needs R n×n and Q n×p, got {:?} and {:?}",
            r.shape(),
            q.shape()
        )));
    }
    let r_pinv = pseudo_inverse(r, T::lit(DEFAULT_RANK_TOL))?;
    let n = r.nrows();
    let leak = (Mat::identity(n, n) - r * &r_pinv) * q;
    let worst = leak
        .column_iter()
        .enumerate()
        .map(|(j, c)| (j, c.norm()))
        .fold(None, |acc: Option<(usize, T)>, (j, v)| match acc {
            Some((_, best)) if best >= v => acc,
            _ => Some((j, v)),
        });
    if let Some((column, residual)) = worst {
        if residual > tol {
            let dir = leak.column(column) / residual;
            return Err(Error::Infeasible {
                column,
                residual: residual.to_f64_lossy(),
                direction: dir.iter().map(|v| v.to_f64_lossy()).collect(),
            });
        }
    }
    Ok(ParameterFeedbackMap::linear(-(r_pinv * q)))
}

fn condition_limit<T: Float>() -> T {
    T::lit(1e12).min(T::lit(0.1) / T::default_epsilon())
}

/// Damped Newton solve of `∇ₓf(x, θ) = 0` from `x_guess`.
///
/// The Newton step is halved (at most [`MAX_HALVINGS`] times) until the
/// gradient norm decreases. The Jacobian is declared singular when
/// `max(σ_max, 1) / σ_min` exceeds `1e12`.
pub fn newton_hc<T: Float>(
    loss: &LossModel<T>,
    theta: &Vector<T>,
    x_guess: &Vector<T>,
    tol: T,
    max_iter: usize,
) -> Result<Vector<T>> {
    if !(tol > T::zero()) {
        return Err(Error::Precondition("Newton tolerance must be positive".into()));
    }
    if x_guess.len() != loss.x_dim() || theta.len() != loss.theta_dim() {
        return Err(dim_err("Newton start point does not match loss dimensions"));
    }
    let mut x = x_guess.clone();
    let mut g = loss.gradient(&x, theta);
    let half = T::lit(0.5);
    for iteration in 0..=max_iter {
        let gnorm = g.norm();
        if !gnorm.is_finite() {
            return Err(Error::Numeric("gradient became non-finite".into()));
        }
        if gnorm <= tol {
            return Ok(x);
        }
        if iteration == max_iter {
            break;
        }
        let h = loss.hessian_xx(&x, theta)?;
        let sv = crate::spectral::singular_values(&h)?;
        let smax = sv.iter().copied().fold(T::zero(), |a, b| a.max(b));
        let smin = sv.iter().copied().fold(T::lit(f64::INFINITY), |a, b| a.min(b));
        let condition = T::one().max(smax) / smin;
        if !(condition <= condition_limit()) {
            return Err(Error::Singular {
                iteration,
                condition: condition.to_f64_lossy(),
            });
        }
        let step = h
            .lu()
            .solve(&(-&g))
            .ok_or(Error::Singular { iteration, condition: f64::INFINITY })?;
        let mut t = T::one();
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = &x + &step * t;
            let gt = loss.gradient(&trial, theta);
            if gt.norm() < gnorm {
                accepted = Some((trial, gt));
                break;
            }
            t *= half;
        }
        match accepted {
            Some((xn, gn)) => {
                x = xn;
                g = gn;
            }
            None => {
                return Err(Error::NonConvergence {
                    iterations: iteration + 1,
                    residual: gnorm.to_f64_lossy(),
                })
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: g.norm().to_f64_lossy(),
    })
}

pub type DynamicsFn<T> = Arc<dyn Fn(&Vector<T>, &Vector<T>) -> Result<Vector<T>> + Send + Sync>;
pub type OutputFn<T> = Arc<dyn Fn(&Vector<T>) -> Result<Vector<T>> + Send + Sync>;

/// `ż = F_c(z, y)`, `x = G_c(z)`.
#[derive(Clone)]
pub struct GradientFeedbackAlgorithm<T: Float> {
    n_c: usize,
    x_dim: usize,
    dynamics: DynamicsFn<T>,
    output: OutputFn<T>,
    gain: Mat<T>,
    z_star: Vector<T>,
}

impl<T: Float> fmt::Debug for GradientFeedbackAlgorithm<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GradientFeedbackAlgorithm")
            .field("n_c", &self.n_c)
            .field("x_dim", &self.x_dim)
            .field("gain", &self.gain)
            .field("z_star", &self.z_star)
            .finish()
    }
}

impl<T: Float> GradientFeedbackAlgorithm<T> {
    pub fn new<F, G>(n_c: usize, x_dim: usize, dynamics: F, output: G, gain: Mat<T>, z_star: Vector<T>) -> Self
    where
        F: Fn(&Vector<T>, &Vector<T>) -> Result<Vector<T>> + Send + Sync + 'static,
        G: Fn(&Vector<T>) -> Result<Vector<T>> + Send + Sync + 'static,
    {
        GradientFeedbackAlgorithm {
            n_c,
            x_dim,
            dynamics: Arc::new(dynamics),
            output: Arc::new(output),
            gain,
            z_star,
        }
    }

    /// Linear controller `ż = A_c z + B_c y`, `x = G_c z`.
    pub fn linear(a_c: Mat<T>, b_c: Mat<T>, g_c: Mat<T>) -> Result<Self> {
        let n_c = a_c.nrows();
        if !a_c.is_square() || b_c.nrows() != n_c || g_c.ncols() != n_c || b_c.ncols() != g_c.nrows() {
            return Err(dim_err(format!(
                "linear controller: A_c {:?}, B_c {:?}, G_c {:?} are inconsistent",
                a_c.shape(),
                b_c.shape(),
                g_c.shape()
            )));
        }
        let x_dim = g_c.nrows();
        let gain = b_c.clone();
        Ok(Self::new(
            n_c,
            x_dim,
            move |z, y| Ok(&a_c * z + &b_c * y),
            move |z| Ok(&g_c * z),
            gain,
            Vector::zeros(n_c),
        ))
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    /// Observer gain `L`.
    pub fn gain(&self) -> &Mat<T> {
        &self.gain
    }

    pub fn z_star(&self) -> &Vector<T> {
        &self.z_star
    }

    /// `F_c(z, y)`.
    pub fn dynamics(&self, z: &Vector<T>, y: &Vector<T>) -> Result<Vector<T>> {
        (self.dynamics)(z, y)
    }

    /// `G_c(z)`.
    pub fn output(&self, z: &Vector<T>) -> Result<Vector<T>> {
        (self.output)(z)
    }

    /// `F̃_c(z, y) = F_c(z, y) + Δz`.
    pub fn perturbed(&self, delta: Mat<T>) -> Result<Self> {
        if delta.shape() != (self.n_c, self.n_c) {
            return Err(dim_err(format!(
                "perturbation must be {0}x{0}, got {1:?}",
                self.n_c,
                delta.shape()
            )));
        }
        let inner = self.dynamics.clone();
        let mut out = self.clone();
        out.dynamics = Arc::new(move |z, y| Ok(inner(z, y)? + &delta * z));
        Ok(out)
    }

    /// Removes the exosystem copy: `F̃_c(z, y) = F_c(z, y) − s(z)`.
    pub fn without_internal_model(&self, exo: &Exosystem<T>) -> Result<Self> {
        if exo.dim() != self.n_c {
            return Err(dim_err("exosystem dimension differs from controller state"));
        }
        let inner = self.dynamics.clone();
        let exo = exo.clone();
        let mut out = self.clone();
        out.dynamics = Arc::new(move |z, y| Ok(inner(z, y)? - exo.vector_field(z)));
        Ok(out)
    }
}

/// Gradient-feedback synthesis with a Luenberger observer of the exosystem.
///
/// `n_c = p`, `G_c = H_c`, `F_c(z, y) = s(z) + L (y − ∇ₓf(H_c(z), z))` with `L`
/// from [`synthesize_observer_gain`] applied to the Jacobians `S` and `Q` at
/// `(x*∘, 0)`.
pub fn algorithm_one<T: Float>(
    exo: &Exosystem<T>,
    loss: &LossModel<T>,
    hc: &ParameterFeedbackMap<T>,
    margin: T,
) -> Result<GradientFeedbackAlgorithm<T>> {
    let p = exo.dim();
    if loss.theta_dim() != p || hc.theta_dim() != p || hc.x_dim() != loss.x_dim() {
        return Err(dim_err(format!(
            "exosystem dim {p}, loss (n={}, p={}), feedback map (n={}, p={}) are inconsistent",
            loss.x_dim(),
            loss.theta_dim(),
            hc.x_dim(),
            hc.theta_dim()
        )));
    }
    let (_, q) = loss.base_jacobians()?;
    let s = exo.jacobian_at_origin();
    if !is_detectable(&q, s, T::lit(DEFAULT_RANK_TOL))? {
        return Err(Error::Synthesis(
            "the pair (Q, S) is not detectable: some exosystem modes never reach the gradient".into(),
        ));
    }
    verify_zeroing(loss, hc)?;
    let gain = synthesize_observer_gain(s, &q, margin)?;

    let n = loss.x_dim();
    let exo_f = exo.clone();
    let loss_f = loss.clone();
    let hc_f = hc.clone();
    let l_f = gain.clone();
    let hc_g = hc.clone();
    Ok(GradientFeedbackAlgorithm::new(
        p,
        n,
        move |z, y| {
            let predicted = loss_f.gradient(&hc_f.apply(z)?, z);
            Ok(exo_f.vector_field(z) + &l_f * (y - predicted))
        },
        move |z| hc_g.apply(z),
        gain,
        Vector::zeros(p),
    ))
}

/// `H_c(0) = x*∘` and `∇ₓf(H_c(θ), θ) ≈ 0` on a small stencil around the origin.
fn verify_zeroing<T: Float>(loss: &LossModel<T>, hc: &ParameterFeedbackMap<T>) -> Result<()> {
    let p = loss.theta_dim();
    let zero = Vector::zeros(p);
    let x0 = hc.apply(&zero)?;
    let tol = T::lit(1e-8).max(T::default_epsilon().sqrt());
    if (&x0 - loss.base_point()).amax() > tol {
        return Err(Error::Synthesis("feedback map does not pass through the base point".into()));
    }
    let radius = T::lit(1e-3);
    let grad_tol = T::lit(1e-6).max(T::default_epsilon().sqrt());
    let mut probes = vec![zero];
    for j in 0..p {
        for sign in [T::one(), -T::one()] {
            let mut th = Vector::zeros(p);
            th[j] = sign * radius;
            probes.push(th);
        }
    }
    for th in &probes {
        let g = loss.gradient(&hc.apply(th)?, th);
        if g.norm() > grad_tol {
            return Err(Error::Synthesis(format!(
                "feedback map does not zero the gradient near θ = 0 (|∇f| = {:.3e})",
                g.norm().to_f64_lossy()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterManifoldResidual<T> {
    /// `max ‖s(θ) − F_c(θ, 0)‖`
    pub dynamics: T,
    /// `max ‖∇ₓf(G_c(θ), θ)‖`
    pub gradient: T,
}

/// Residuals of the tracking conditions on the graph `z = θ` (identity `σ`).
pub fn center_manifold_residual<T: Float>(
    alg: &GradientFeedbackAlgorithm<T>,
    exo: &Exosystem<T>,
    loss: &LossModel<T>,
    thetas: &[Vector<T>],
) -> Result<CenterManifoldResidual<T>> {
    if alg.n_c() != exo.dim() {
        return Err(dim_err("identity σ requires n_c = p"));
    }
    let y0 = Vector::zeros(loss.x_dim());
    let mut out = CenterManifoldResidual {
        dynamics: T::zero(),
        gradient: T::zero(),
    };
    for th in thetas {
        let r_dyn = (exo.vector_field(th) - alg.dynamics(th, &y0)?).norm();
        let r_grad = loss.gradient(&alg.output(th)?, th).norm();
        out.dynamics = out.dynamics.max(r_dyn);
        out.gradient = out.gradient.max(r_grad);
    }
    Ok(out)
}

/// `count` points drawn uniformly from the ball of the given radius.
pub fn sample_ball<T: Float, R: Rng + ?Sized>(rng: &mut R, dim: usize, radius: T, count: usize) -> Vec<Vector<T>> {
    (0..count)
        .map(|_| {
            if dim == 0 {
                return Vector::zeros(0);
            }
            let dir: Vector<f64> = Vector::from_fn(dim, |_, _| StandardNormal.sample(rng));
            let norm = dir.norm().max(f64::MIN_POSITIVE);
            let u: f64 = rng.random::<f64>();
            let scale = u.powf(1.0 / dim as f64) / norm;
            Vector::from_fn(dim, |i, _| T::lit(dir[i] * scale) * radius)
        })
        .collect()
}

/// Jacobians of a gradient-feedback loop at `(z*∘, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization<T: Float> {
    /// `∂F_c/∂z`
    pub a_c: Mat<T>,
    /// `∂F_c/∂y`
    pub b_c: Mat<T>,
    /// `∂G_c/∂z`
    pub g_c: Mat<T>,
    /// `∂∇ₓf/∂x` at `(x*∘, 0)`
    pub r: Mat<T>,
    /// `∂∇ₓf/∂θ` at `(x*∘, 0)`
    pub q: Mat<T>,
}

impl<T: Float> Linearization<T> {
    /// `A_c + B_c R G_c`
    pub fn closed_loop_matrix(&self) -> Mat<T> {
        &self.a_c + &self.b_c * &self.r * &self.g_c
    }
}

/// Central-difference linearization of the controller and loss at equilibrium.
pub fn linearize<T: Float>(alg: &GradientFeedbackAlgorithm<T>, loss: &LossModel<T>) -> Result<Linearization<T>> {
    let h = T::lit(DEFAULT_STEP);
    let z_star = alg.z_star().clone();
    let y0 = Vector::zeros(loss.x_dim());
    let a_c = central_jacobian(|z| alg.dynamics(z, &y0), &z_star, h)?;
    let b_c = central_jacobian(|y| alg.dynamics(&z_star, y), &y0, h)?;
    let g_c = central_jacobian(|z| alg.output(z), &z_star, h)?;
    let x_star = alg.output(&z_star)?;
    let theta0 = Vector::zeros(loss.theta_dim());
    let r = loss.hessian_xx(&x_star, &theta0)?;
    let q = loss.jacobian_xtheta(&x_star, &theta0)?;
    Ok(Linearization { a_c, b_c, g_c, r, q })
}

/// Spectrum of `A_c + B_c R M` at equilibrium.
pub fn closed_loop_jacobian<T: Float>(alg: &GradientFeedbackAlgorithm<T>, loss: &LossModel<T>) -> Result<SpectralReport<T>> {
    eigenvalues(&linearize(alg, loss)?.closed_loop_matrix())
}
