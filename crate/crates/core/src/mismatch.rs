//! Tracking accuracy of linear gradient-feedback loops whose internal model
//! does not match the exosystem exactly.
//!
//! With `z̃ = z − Σθ` and `ΣS + Δ = A_cΣ`, a linear loop on a quadratic
//! problem obeys `ż̃ = (A_c + B_cRG_c)z̃ + Δθ`, `y = RG_c z̃`. `Δ = 0` means the
//! controller reproduces the exosystem and the gradient vanishes
//! asymptotically; otherwise the residual gradient is read off the final
//! value theorem.

use crate::error::dim_err;
use crate::regulator::Linearization;
use crate::simulate::{solve_ode, IntegratorConfig, Trajectory};
use crate::spectral::{eigenvalues, operator_norm, pseudo_inverse, solve_sigma};
use crate::{Error, Float, Mat, Result, Vector};

/// Tolerance on `RG_cΣ + Q = 0` accepted by [`LinearClosedLoop::new`].
pub const SIGMA_TOL: f64 = 1e-8;

/// Default final-value probes `10⁻¹, 10⁻², …, 10⁻⁸`.
pub fn default_probes<T: Float>() -> Vec<T> {
    (1..=8).map(|k| T::lit(10f64.powi(-k))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClosedLoop<T: Float> {
    a_c: Mat<T>,
    b_c: Mat<T>,
    g_c: Mat<T>,
    r: Mat<T>,
    q: Mat<T>,
    s: Mat<T>,
    sigma: Mat<T>,
    delta: Mat<T>,
}

impl<T: Float> LinearClosedLoop<T> {
    /// Assembles the loop and derives `Δ = A_cΣ − ΣS`.
    ///
    /// When `sigma` is omitted it is taken as `−(RG_c)†Q`. Either way `Σ` must
    /// satisfy `RG_cΣ + Q = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a_c: Mat<T>,
        b_c: Mat<T>,
        g_c: Mat<T>,
        r: Mat<T>,
        q: Mat<T>,
        s: Mat<T>,
        sigma: Option<Mat<T>>,
    ) -> Result<Self> {
        let nc = a_c.nrows();
        let n = r.nrows();
        let p = s.nrows();
        if !a_c.is_square()
            || !r.is_square()
            || !s.is_square()
            || b_c.shape() != (nc, n)
            || g_c.shape() != (n, nc)
            || q.shape() != (n, p)
        {
            return Err(dim_err(format!(
                "closed loop: A_c {:?}, B_c {:?}, G_c {:?}, R {:?}, Q {:?}, S {:?}",
                a_c.shape(),
                b_c.shape(),
                g_c.shape(),
                r.shape(),
                q.shape(),
                s.shape()
            )));
        }
        for (m, name) in [(&a_c, "A_c"), (&b_c, "B_c"), (&g_c, "G_c"), (&r, "R"), (&q, "Q"), (&s, "S")] {
            crate::check_finite(m, name)?;
        }
        let rg = &r * &g_c;
        let sigma = match sigma {
            Some(sg) => {
                if sg.shape() != (nc, p) {
                    return Err(dim_err(format!("Σ must be {nc}x{p}, got {:?}", sg.shape())));
                }
                sg
            }
            None => -pseudo_inverse(&rg, T::lit(crate::spectral::DEFAULT_RANK_TOL))? * &q,
        };
        let gap = (&rg * &sigma + &q).amax();
        let scale = T::one().max(q.amax());
        if gap > T::lit(SIGMA_TOL) * scale {
            return Err(Error::Validation(format!(
                "Σ does not zero the gradient: max |RG_cΣ + Q| = {:.3e}",
                gap.to_f64_lossy()
            )));
        }
        let delta = &a_c * &sigma - &sigma * &s;
        Ok(LinearClosedLoop { a_c, b_c, g_c, r, q, s, sigma, delta })
    }

    /// Builds the loop from the linearization of a synthesized controller.
    ///
    /// `Σ` is taken from the joint least-squares solve when that is exact, so
    /// a controller carrying an exact internal model yields `Δ = 0`.
    pub fn from_linearization(lin: &Linearization<T>, s: &Mat<T>) -> Result<Self> {
        let sol = solve_sigma(&lin.a_c, &lin.g_c, &lin.r, &lin.q, s)?;
        let sigma = (sol.residual <= T::lit(SIGMA_TOL)).then_some(sol.sigma);
        LinearClosedLoop::new(
            lin.a_c.clone(),
            lin.b_c.clone(),
            lin.g_c.clone(),
            lin.r.clone(),
            lin.q.clone(),
            s.clone(),
            sigma,
        )
    }

    pub fn a_c(&self) -> &Mat<T> {
        &self.a_c
    }
    pub fn b_c(&self) -> &Mat<T> {
        &self.b_c
    }
    pub fn g_c(&self) -> &Mat<T> {
        &self.g_c
    }
    pub fn r(&self) -> &Mat<T> {
        &self.r
    }
    pub fn q(&self) -> &Mat<T> {
        &self.q
    }
    pub fn s(&self) -> &Mat<T> {
        &self.s
    }
    pub fn sigma(&self) -> &Mat<T> {
        &self.sigma
    }
    pub fn delta(&self) -> &Mat<T> {
        &self.delta
    }

    /// Copy with the forcing `Δ` multiplied by `alpha`, for sensitivity
    /// studies. `A_c` and `Σ` are kept, so `Δ = A_cΣ − ΣS` no longer holds.
    pub fn with_scaled_delta(&self, alpha: T) -> Self {
        let mut out = self.clone();
        out.delta *= alpha;
        out
    }

    fn output_map(&self) -> Mat<T> {
        &self.r * &self.g_c
    }
}

/// `(A_err, forcing)` with `A_err = A_c + B_cRG_c` and forcing `Δ`; the
/// output is `y = RG_c z̃`.
pub fn error_system<T: Float>(cl: &LinearClosedLoop<T>) -> (Mat<T>, Mat<T>) {
    (&cl.a_c + &cl.b_c * &cl.r * &cl.g_c, cl.delta.clone())
}

fn hurwitz_error_matrix<T: Float>(cl: &LinearClosedLoop<T>) -> Result<Mat<T>> {
    let (a_err, _) = error_system(cl);
    let report = eigenvalues(&a_err)?;
    if !report.is_hurwitz {
        return Err(Error::Precondition(format!(
            "error system is not Hurwitz (spectral abscissa {:.3e})",
            report.spectral_abscissa.to_f64_lossy()
        )));
    }
    Ok(a_err)
}

fn check_theta<T: Float>(cl: &LinearClosedLoop<T>, theta0: &Vector<T>) -> Result<()> {
    if theta0.len() != cl.s.nrows() {
        return Err(dim_err(format!(
            "θ0 has {} entries, exosystem dimension is {}",
            theta0.len(),
            cl.s.nrows()
        )));
    }
    Ok(())
}

/// `y∞ = −RG_c(A_c + B_cRG_c)⁻¹Δθ(0)` for a constant exosystem.
pub fn asymptotic_gradient_constant<T: Float>(cl: &LinearClosedLoop<T>, theta0: &Vector<T>) -> Result<Vector<T>> {
    check_theta(cl, theta0)?;
    if cl.s.amax() != T::zero() {
        return Err(Error::Precondition("the closed form needs a constant exosystem (S = 0)".into()));
    }
    let a_err = hurwitz_error_matrix(cl)?;
    let forced = &cl.delta * theta0;
    let z_inf = a_err
        .lu()
        .solve(&forced)
        .ok_or_else(|| Error::Numeric("error-system matrix is singular".into()))?;
    Ok(-(cl.output_map() * z_inf))
}

/// `‖RG_c(A_c + B_cRG_c)⁻¹‖·‖θ(0)‖·‖Δ‖` in spectral norms.
pub fn asymptotic_gradient_bound<T: Float>(cl: &LinearClosedLoop<T>, theta0: &Vector<T>) -> Result<T> {
    check_theta(cl, theta0)?;
    let a_err = hurwitz_error_matrix(cl)?;
    let inv = a_err
        .try_inverse()
        .ok_or_else(|| Error::Numeric("error-system matrix is singular".into()))?;
    Ok(operator_norm(&(cl.output_map() * inv))? * theta0.norm() * operator_norm(&cl.delta)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum GradientLimit<T: Float> {
    Finite(Vector<T>),
    /// `‖g(s)‖` grows like `s^(−growth_exponent)` as `s → 0`.
    Divergent { growth_exponent: T },
}

impl<T: Float> GradientLimit<T> {
    pub fn is_divergent(&self) -> bool {
        matches!(self, GradientLimit::Divergent { .. })
    }
}

/// Final-value limit of `g(s) = s·RG_c(sI − A_err)⁻¹Δ(sI − S)⁻¹θ(0)` along
/// the decreasing probes `s_values`.
///
/// The limit is finite when the last two probes agree to `1e−6` relative, or
/// when `‖g‖` shrinks with `s` (log–log slope at least `1/2`). Otherwise it
/// is divergent and the growth exponent is minus the fitted slope.
pub fn asymptotic_gradient_limit<T: Float>(
    cl: &LinearClosedLoop<T>,
    theta0: &Vector<T>,
    s_values: &[T],
) -> Result<GradientLimit<T>> {
    check_theta(cl, theta0)?;
    let a_err = hurwitz_error_matrix(cl)?;
    if s_values.is_empty() || s_values.iter().any(|s| !(*s > T::zero())) {
        return Err(Error::Precondition("probes must be positive".into()));
    }
    if s_values.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Precondition("probes must be strictly decreasing".into()));
    }
    let nc = cl.a_c.nrows();
    let p = cl.s.nrows();
    let out = cl.output_map();
    let mut probes: Vec<(T, Vector<T>)> = Vec::new();
    for &s in s_values {
        let exo_res = Mat::<T>::identity(p, p) * s - &cl.s;
        let Some(th) = exo_res.lu().solve(theta0) else { continue };
        let err_res = Mat::<T>::identity(nc, nc) * s - &a_err;
        let Some(zt) = err_res.lu().solve(&(&cl.delta * th)) else { continue };
        let g = &out * zt * s;
        if g.iter().all(|v| v.is_finite()) {
            probes.push((s, g));
        }
    }
    if probes.is_empty() {
        return Err(Error::Numeric("every final-value probe hit a singular resolvent".into()));
    }
    let (_, last) = probes.last().unwrap();
    if probes.len() == 1 {
        return Ok(GradientLimit::Finite(last.clone()));
    }
    let (_, prev) = &probes[probes.len() - 2];
    let tiny = T::lit(1e-300);
    if (last - prev).norm() <= T::lit(1e-6) * last.norm().max(prev.norm()) || last.norm() <= tiny {
        return Ok(GradientLimit::Finite(last.clone()));
    }
    let tail = &probes[probes.len().saturating_sub(4)..];
    let pts: Vec<(T, T)> = tail
        .iter()
        .filter(|(_, g)| g.norm() > tiny)
        .map(|(s, g)| (s.ln(), g.norm().ln()))
        .collect();
    let slope = fit_slope(&pts);
    if slope >= T::lit(0.5) {
        Ok(GradientLimit::Finite(last.clone()))
    } else {
        Ok(GradientLimit::Divergent { growth_exponent: -slope })
    }
}

fn fit_slope<T: Float>(pts: &[(T, T)]) -> T {
    if pts.len() < 2 {
        return T::zero();
    }
    let m = T::from_usize(pts.len()).unwrap();
    let mx = pts.iter().fold(T::zero(), |a, (x, _)| a + *x) / m;
    let my = pts.iter().fold(T::zero(), |a, (_, y)| a + *y) / m;
    let (num, den) = pts.iter().fold((T::zero(), T::zero()), |(n, d), (x, y)| {
        (n + (*x - mx) * (*y - my), d + (*x - mx) * (*x - mx))
    });
    if den == T::zero() {
        T::zero()
    } else {
        num / den
    }
}

/// Time-domain simulation of the error system with `θ̇ = Sθ` and the
/// controller started at `z(0) = 0`.
///
/// Logged signals are `z = z̃ + Σθ`, `x = G_c z` and `y = RG_c z̃`, which equals
/// `Rx + Qθ` because `RG_cΣ = −Q`.
pub fn simulate_mismatch<T: Float>(
    cl: &LinearClosedLoop<T>,
    theta0: &Vector<T>,
    cfg: &IntegratorConfig<T>,
) -> Result<Trajectory<T>> {
    check_theta(cl, theta0)?;
    let nc = cl.a_c.nrows();
    let p = cl.s.nrows();
    let (a_err, delta) = error_system(cl);
    let mut gen = Mat::zeros(nc + p, nc + p);
    gen.view_mut((0, 0), (nc, nc)).copy_from(&a_err);
    gen.view_mut((0, nc), (nc, p)).copy_from(&delta);
    gen.view_mut((nc, nc), (p, p)).copy_from(&cl.s);
    let mut state0 = Vector::zeros(nc + p);
    state0.rows_mut(0, nc).copy_from(&-(&cl.sigma * theta0));
    state0.rows_mut(nc, p).copy_from(theta0);

    let sol = solve_ode(|_, w| Ok(&gen * w), &state0, cfg)?;
    let out = cl.output_map();
    let n = sol.states.len();
    let mut traj = Trajectory {
        times: sol.times,
        theta: Vec::with_capacity(n),
        z: Vec::with_capacity(n),
        x: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        divergence: sol.divergence,
    };
    for w in sol.states {
        let zt = w.rows(0, nc).clone_owned();
        let theta = w.rows(nc, p).clone_owned();
        let z = &zt + &cl.sigma * &theta;
        traj.x.push(&cl.g_c * &z);
        traj.y.push(&out * zt);
        traj.z.push(z);
        traj.theta.push(theta);
    }
    Ok(traj)
}

/// The 2×2 Jordan-block loop: `R = Q = G_c = I`, `S = [[0, 1], [0, 0]]`,
/// `A_c = [[−ε₁, 1], [0, −ε₂]]` and `B_c = −I`, with `Σ = −I` and
/// `Δ = diag(ε₁, ε₂)`.
pub fn jordan_example<T: Float>(eps1: T, eps2: T) -> Result<LinearClosedLoop<T>> {
    let i2 = Mat::<T>::identity(2, 2);
    let mut a_c = Mat::zeros(2, 2);
    a_c[(0, 0)] = -eps1;
    a_c[(0, 1)] = T::one();
    a_c[(1, 1)] = -eps2;
    let mut s = Mat::zeros(2, 2);
    s[(0, 1)] = T::one();
    LinearClosedLoop::new(a_c, -i2.clone(), i2.clone(), i2.clone(), i2.clone(), s, Some(-i2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn scalar_loop(delta: f64) -> LinearClosedLoop<f64> {
        // A_c = −1, B_c = 0, R = G_c = 1, Q = −σ, S = 0, Σ = σ with Δ = A_cΣ = −σ
        let sigma = -delta;
        LinearClosedLoop::new(
            dmatrix![-1.0],
            dmatrix![0.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![-sigma],
            dmatrix![0.0],
            Some(dmatrix![sigma]),
        )
        .unwrap()
    }

    #[test]
    fn scalar_closed_form() {
        let cl = scalar_loop(0.7);
        assert_relative_eq!(cl.delta()[(0, 0)], 0.7, epsilon = 1e-15);
        let y = asymptotic_gradient_constant(&cl, &dvector![2.0]).unwrap();
        assert_relative_eq!(y[0], 0.7 * 2.0, epsilon = 1e-14);
        let bound = asymptotic_gradient_bound(&cl, &dvector![2.0]).unwrap();
        assert!(y.norm() <= bound + 1e-10);
    }

    #[test]
    fn zero_delta_gives_zero_limit() {
        let cl = jordan_example(0.0, 0.0).unwrap();
        assert_eq!(cl.delta(), &Mat::zeros(2, 2));
        assert_eq!(cl.sigma(), &(-Mat::<f64>::identity(2, 2)));
        let lim = asymptotic_gradient_limit(&cl, &dvector![-1.0, 1.0], &default_probes()).unwrap();
        match lim {
            GradientLimit::Finite(y) => assert_eq!(y.norm(), 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn jordan_mismatch_diverges() {
        let cl = jordan_example(0.5, 0.5).unwrap();
        assert_relative_eq!(cl.delta(), &dmatrix![0.5, 0.0; 0.0, 0.5], epsilon = 1e-15);
        let lim = asymptotic_gradient_limit(&cl, &dvector![-1.0, 1.0], &default_probes()).unwrap();
        match lim {
            GradientLimit::Divergent { growth_exponent } => {
                assert_relative_eq!(growth_exponent, 1.0, epsilon = 1e-3)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn oscillatory_exosystem_limit_is_finite() {
        // S has poles at ±i so s·(sI − S)⁻¹ → 0
        let i2 = Mat::<f64>::identity(2, 2);
        let cl = LinearClosedLoop::new(
            -i2.clone(),
            -i2.clone(),
            i2.clone(),
            i2.clone(),
            i2.clone(),
            dmatrix![0.0, 1.0; -1.0, 0.0],
            None,
        )
        .unwrap();
        assert!(cl.delta().amax() > 0.1);
        let lim = asymptotic_gradient_limit(&cl, &dvector![1.0, 0.0], &default_probes()).unwrap();
        assert!(!lim.is_divergent());
    }

    #[test]
    fn preconditions() {
        let jordan = jordan_example(0.5, 0.5).unwrap();
        assert!(matches!(
            asymptotic_gradient_constant(&jordan, &dvector![1.0, 1.0]),
            Err(Error::Precondition(_))
        ));
        let i1 = dmatrix![1.0];
        let unstable = LinearClosedLoop::new(i1.clone(), i1.clone(), i1.clone(), i1.clone(), -i1.clone(), dmatrix![0.0], None).unwrap();
        assert!(matches!(
            asymptotic_gradient_limit(&unstable, &dvector![1.0], &default_probes()),
            Err(Error::Precondition(_))
        ));
        let bad = LinearClosedLoop::new(
            dmatrix![-1.0],
            dmatrix![0.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![0.0],
            Some(dmatrix![5.0]),
        );
        assert!(matches!(bad, Err(Error::Validation(_))));
        assert!(matches!(
            LinearClosedLoop::new(i1.clone(), i1.clone(), dmatrix![1.0, 2.0], i1.clone(), i1.clone(), i1, None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn simulation_matches_closed_form() {
        let cl = scalar_loop(0.3);
        let cfg = IntegratorConfig::rk45(1e-10, 1e-12, 30.0).with_samples(301);
        let traj = simulate_mismatch(&cl, &dvector![1.5], &cfg).unwrap();
        let y_inf = asymptotic_gradient_constant(&cl, &dvector![1.5]).unwrap();
        assert_relative_eq!(traj.y.last().unwrap()[0], y_inf[0], max_relative = 1e-9);
        // logged gradient is Rx + Qθ
        for k in 0..traj.len() {
            let g = cl.r() * &traj.x[k] + cl.q() * &traj.theta[k];
            assert_relative_eq!(g, traj.y[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn linearity_in_delta() {
        let cl = scalar_loop(0.4);
        let th = dvector![1.25];
        let y1 = asymptotic_gradient_constant(&cl, &th).unwrap();
        let y3 = asymptotic_gradient_constant(&cl.with_scaled_delta(3.0), &th).unwrap();
        assert_relative_eq!(y3, y1 * 3.0, epsilon = 1e-12);
    }
}
