//! Dense linear-algebra services: spectra, rank and detectability tests,
//! observer-gain synthesis, pseudo-inverses and the linear Σ solve.

use nalgebra as na;
use nalgebra::Complex;

use crate::error::dim_err;
use crate::{check_finite, Error, Float, Mat, Result, Vector};

/// Default relative rank tolerance (multiplied by the largest singular value).
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

// Convergence threshold of the bidiagonal QR sweeps. A bare machine epsilon
// can stall deflation and return an inaccurate factorization.
fn svd_eps<T: Float>() -> T {
    T::default_epsilon() * T::lit(5.0)
}

fn iteration_cap(n: usize) -> usize {
    1000 + 200 * n
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport<T: Float> {
    pub eigenvalues: Vec<Complex<T>>,
    /// Largest real part; `-inf` for an empty matrix.
    pub spectral_abscissa: T,
    pub is_hurwitz: bool,
}

impl<T: Float> SpectralReport<T> {
    fn from_eigenvalues(eigenvalues: Vec<Complex<T>>) -> Self {
        let spectral_abscissa = eigenvalues
            .iter()
            .map(|l| l.re)
            .fold(T::lit(f64::NEG_INFINITY), |a, b| a.max(b));
        SpectralReport {
            is_hurwitz: spectral_abscissa < T::zero(),
            eigenvalues,
            spectral_abscissa,
        }
    }
}

/// All eigenvalues of a square real matrix, computed from a real Schur form.
pub fn eigenvalues<T: Float>(m: &Mat<T>) -> Result<SpectralReport<T>> {
    if !m.is_square() {
        return Err(dim_err(format!(
            "eigenvalues need a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    check_finite(m, "matrix")?;
    if m.nrows() == 0 {
        return Ok(SpectralReport::from_eigenvalues(Vec::new()));
    }
    let schur = na::Schur::try_new(m.clone(), T::default_epsilon(), iteration_cap(m.nrows()))
        .ok_or_else(|| Error::Numeric("Schur iteration did not converge".into()))?;
    let eigs: Vec<Complex<T>> = schur.complex_eigenvalues().iter().copied().collect();
    if eigs.iter().any(|l| !l.re.is_finite() || !l.im.is_finite()) {
        return Err(Error::Numeric("Schur form produced non-finite eigenvalues".into()));
    }
    Ok(SpectralReport::from_eigenvalues(eigs))
}

/// Singular values in decreasing order.
pub fn singular_values<T: Float>(m: &Mat<T>) -> Result<Vector<T>> {
    check_finite(m, "matrix")?;
    if m.is_empty() {
        return Ok(Vector::zeros(0));
    }
    let svd = na::SVD::try_new(m.clone(), false, false, svd_eps(), iteration_cap(m.nrows().max(m.ncols())))
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    Ok(svd.singular_values)
}

/// Spectral norm (largest singular value).
pub fn operator_norm<T: Float>(m: &Mat<T>) -> Result<T> {
    Ok(singular_values(m)?.iter().copied().fold(T::zero(), |a, b| a.max(b)))
}

fn rank_from_singular_values<T: Float>(sv: impl Iterator<Item = T>, tol: T) -> usize {
    let sv: Vec<T> = sv.collect();
    let smax = sv.iter().copied().fold(T::zero(), |a, b| a.max(b));
    if smax <= T::zero() {
        return 0;
    }
    sv.iter().filter(|s| **s > tol * smax).count()
}

/// Numerical rank with singular values at most `tol · σ_max` counted as zero.
pub fn rank<T: Float>(m: &Mat<T>, tol: T) -> Result<usize> {
    Ok(rank_from_singular_values(singular_values(m)?.iter().copied(), tol))
}

fn complex_rank<T: Float>(m: na::DMatrix<Complex<T>>, tol: T) -> Result<usize> {
    let cap = iteration_cap(m.nrows().max(m.ncols()));
    let svd = na::SVD::try_new(m, false, false, svd_eps(), cap)
        .ok_or_else(|| Error::Numeric("complex SVD did not converge".into()))?;
    Ok(rank_from_singular_values(svd.singular_values.iter().copied(), tol))
}

/// Real parts at or above this are treated as lying in the closed right half plane.
fn neutral_threshold<T: Float>(s: &Mat<T>) -> T {
    -(T::default_epsilon().sqrt() * T::one().max(s.amax()))
}

/// PBH detectability test of the pair `(Q, S)`.
///
/// `Q` is `n × p`, `S` is `p × p`. The pair is detectable iff
/// `rank [S − λI; Q] = p` for every eigenvalue `λ` of `S` with `Re λ ≥ 0`.
pub fn is_detectable<T: Float>(q: &Mat<T>, s: &Mat<T>, tol: T) -> Result<bool> {
    if !s.is_square() || q.ncols() != s.nrows() {
        return Err(dim_err(format!(
            "detectability needs S p×p and Q n×p, got S {}x{} and Q {}x{}",
            s.nrows(),
            s.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    if tol <= T::zero() {
        return Err(Error::Precondition("rank tolerance must be positive".into()));
    }
    let p = s.nrows();
    let n = q.nrows();
    let threshold = neutral_threshold(s);
    let report = eigenvalues(s)?;
    for lambda in report.eigenvalues.iter().filter(|l| l.re >= threshold) {
        let mut stacked = na::DMatrix::<Complex<T>>::zeros(p + n, p);
        for i in 0..p {
            for j in 0..p {
                stacked[(i, j)] = Complex::new(s[(i, j)], T::zero());
            }
            stacked[(i, i)] -= *lambda;
        }
        for i in 0..n {
            for j in 0..p {
                stacked[(p + i, j)] = Complex::new(q[(i, j)], T::zero());
            }
        }
        if complex_rank(stacked, tol)? < p {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Matrix sign function by scaled Newton iteration.
fn matrix_sign<T: Float>(h: &Mat<T>) -> Result<Mat<T>> {
    let n = h.nrows();
    let half = T::lit(0.5);
    let stop = T::default_epsilon().sqrt();
    let mut z = h.clone();
    let mut extra = 0;
    for _ in 0..100 {
        let lu = z.clone().lu();
        let zinv = lu
            .try_inverse()
            .ok_or_else(|| Error::Numeric("sign iteration hit a singular iterate".into()))?;
        let det = z.clone().lu().determinant().abs();
        let scale = if det.is_finite() && det > T::zero() {
            let c = det.powf(-T::one() / T::from_usize(n).unwrap());
            if c.is_finite() { c } else { T::one() }
        } else {
            T::one()
        };
        let next = (z.clone() * scale + zinv / scale) * half;
        let diff = (&next - &z).norm();
        let size = next.norm();
        z = next;
        if diff <= stop * size {
            // quadratic convergence: two more sweeps reach working precision
            extra += 1;
            if extra > 2 {
                return Ok(z);
            }
        }
    }
    Err(Error::Numeric("sign iteration did not converge".into()))
}

/// Observer gain `L` (`p × n`) such that every eigenvalue of `S − LQ` has real
/// part at most `−margin`.
///
/// Solves the shifted filter Riccati equation
/// `(S+αI)P + P(S+αI)ᵀ − P QᵀQ P + I = 0` with `α = margin` from the stable
/// invariant subspace of its Hamiltonian, then sets `L = P Qᵀ`.
pub fn synthesize_observer_gain<T: Float>(s: &Mat<T>, q: &Mat<T>, margin: T) -> Result<Mat<T>> {
    if !s.is_square() || q.ncols() != s.nrows() {
        return Err(dim_err(format!(
            "observer synthesis needs S p×p and Q n×p, got S {}x{} and Q {}x{}",
            s.nrows(),
            s.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    if !(margin > T::zero()) {
        return Err(Error::Precondition("decay margin must be positive".into()));
    }
    check_finite(s, "S")?;
    check_finite(q, "Q")?;
    if !is_detectable(q, s, T::lit(DEFAULT_RANK_TOL))? {
        return Err(Error::Synthesis("the pair (Q, S) is not detectable".into()));
    }
    let p = s.nrows();
    if p == 0 {
        return Ok(Mat::zeros(0, q.nrows()));
    }
    let shifted = s + Mat::identity(p, p) * margin;
    let qtq = q.transpose() * q;
    let mut ham = Mat::zeros(2 * p, 2 * p);
    ham.view_mut((0, 0), (p, p)).copy_from(&shifted.transpose());
    ham.view_mut((0, p), (p, p)).copy_from(&(-qtq));
    ham.view_mut((p, 0), (p, p)).copy_from(&(-Mat::identity(p, p)));
    ham.view_mut((p, p), (p, p)).copy_from(&(-shifted.clone()));

    let axis_tol = T::lit(1e-8).max(T::default_epsilon() * T::lit(100.0)) * T::one().max(ham.amax());
    let spectrum = eigenvalues(&ham)?;
    if spectrum.eigenvalues.iter().any(|l| l.re.abs() < axis_tol) {
        return Err(Error::Numeric(
            "Hamiltonian has eigenvalues on the imaginary axis".into(),
        ));
    }

    let sign = matrix_sign(&ham)?;
    let projector = Mat::identity(2 * p, 2 * p) - sign;
    let svd = na::SVD::try_new(projector, true, false, svd_eps(), iteration_cap(2 * p))
        .ok_or_else(|| Error::Numeric("SVD of stable projector did not converge".into()))?;
    let u = svd.u.expect("U requested");
    let basis = u.columns(0, p);
    let top = basis.rows(0, p).clone_owned();
    let bottom = basis.rows(p, p).clone_owned();
    // P = bottom · top⁻¹, solved as topᵀ Pᵀ = bottomᵀ
    let pt = top
        .transpose()
        .lu()
        .solve(&bottom.transpose())
        .ok_or_else(|| Error::Numeric("stable subspace is not a graph over the first block".into()))?;
    let p_mat = (pt.transpose() + &pt) * T::lit(0.5);
    let gain = &p_mat * q.transpose();
    check_finite(&gain, "observer gain")?;

    let closed = s - &gain * q;
    let report = eigenvalues(&closed)?;
    let slack = T::lit(1e-8).max(T::default_epsilon().sqrt()) * T::one().max(closed.amax());
    if report.spectral_abscissa > -margin + slack {
        return Err(Error::Numeric(format!(
            "synthesized gain misses the margin: abscissa {:.6e} > {:.6e}",
            report.spectral_abscissa.to_f64_lossy(),
            (-margin).to_f64_lossy()
        )));
    }
    Ok(gain)
}

/// Moore–Penrose pseudo-inverse; singular values at most `tol · σ_max` are
/// treated as zero.
pub fn pseudo_inverse<T: Float>(m: &Mat<T>, tol: T) -> Result<Mat<T>> {
    check_finite(m, "matrix")?;
    if m.is_empty() {
        return Ok(Mat::zeros(m.ncols(), m.nrows()));
    }
    let svd = na::SVD::try_new(m.clone(), true, true, svd_eps(), iteration_cap(m.nrows().max(m.ncols())))
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let smax = svd.singular_values.iter().copied().fold(T::zero(), |a, b| a.max(b));
    svd.pseudo_inverse(tol * smax)
        .map_err(|e| Error::Numeric(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSolution<T: Float> {
    pub sigma: Mat<T>,
    /// `sqrt(‖ΣS − A_cΣ‖² + ‖RG_cΣ + Q‖²)` in Frobenius norms.
    pub residual: T,
}

/// Residual of the linear tracking conditions `ΣS = A_cΣ`, `RG_cΣ + Q = 0`.
pub fn sigma_residual<T: Float>(
    sigma: &Mat<T>,
    a_c: &Mat<T>,
    g_c: &Mat<T>,
    r: &Mat<T>,
    q: &Mat<T>,
    s: &Mat<T>,
) -> T {
    let dynamic = sigma * s - a_c * sigma;
    let gradient = r * g_c * sigma + q;
    (dynamic.norm_squared() + gradient.norm_squared()).sqrt()
}

/// Least-squares solve for `Σ` (`n_c × p`) in `ΣS = A_cΣ`, `RG_cΣ + Q = 0`.
///
/// The two conditions are vectorized with Kronecker products and stacked;
/// the minimum-norm least-squares solution is returned together with its
/// residual. A residual at roundoff level certifies that an exact `Σ` exists.
pub fn solve_sigma<T: Float>(
    a_c: &Mat<T>,
    g_c: &Mat<T>,
    r: &Mat<T>,
    q: &Mat<T>,
    s: &Mat<T>,
) -> Result<SigmaSolution<T>> {
    let nc = a_c.nrows();
    let n = r.nrows();
    let p = s.nrows();
    if !a_c.is_square()
        || !r.is_square()
        || !s.is_square()
        || g_c.shape() != (n, nc)
        || q.shape() != (n, p)
    {
        return Err(dim_err(format!(
            "solve_sigma: A_c {:?}, G_c {:?}, R {:?}, Q {:?}, S {:?} are inconsistent",
            a_c.shape(),
            g_c.shape(),
            r.shape(),
            q.shape(),
            s.shape()
        )));
    }
    if nc == 0 || p == 0 {
        let sigma = Mat::zeros(nc, p);
        let residual = sigma_residual(&sigma, a_c, g_c, r, q, s);
        return Ok(SigmaSolution { sigma, residual });
    }
    let eye_nc = Mat::<T>::identity(nc, nc);
    let eye_p = Mat::<T>::identity(p, p);
    let rg = r * g_c;
    let dynamic = s.transpose().kronecker(&eye_nc) - eye_p.kronecker(a_c);
    let gradient = eye_p.kronecker(&rg);

    let rows_dyn = nc * p;
    let rows = rows_dyn + n * p;
    let mut system = Mat::zeros(rows, nc * p);
    system.view_mut((0, 0), (rows_dyn, nc * p)).copy_from(&dynamic);
    system.view_mut((rows_dyn, 0), (n * p, nc * p)).copy_from(&gradient);
    let mut rhs = Vector::zeros(rows);
    for (k, v) in q.iter().enumerate() {
        rhs[rows_dyn + k] = -*v;
    }
    let tol = T::lit(1e-12).max(T::default_epsilon() * T::from_usize(rows).unwrap());
    let pinv = pseudo_inverse(&system, tol)?;
    let vec_sigma = pinv * rhs;
    let sigma = Mat::from_column_slice(nc, p, vec_sigma.as_slice());
    let residual = sigma_residual(&sigma, a_c, g_c, r, q, s);
    Ok(SigmaSolution { sigma, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn sorted_imag(report: &SpectralReport<f64>) -> Vec<f64> {
        let mut v: Vec<f64> = report.eigenvalues.iter().map(|l| l.im).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn pseudo_inverse_of_rank_deficient_products() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let left = Mat::<f64>::from_fn(4, 1, |_, _| StandardNormal.sample(&mut rng));
            let right = Mat::<f64>::from_fn(1, 3, |_, _| StandardNormal.sample(&mut rng));
            let a = left * right;
            let p = pseudo_inverse(&a, 1e-9).unwrap();
            assert!((&a * &p * &a - &a).amax() <= 1e-10 * (1.0 + a.amax()));
            assert!((&p * &a * &p - &p).amax() <= 1e-10 * (1.0 + p.amax()));
        }
    }

    #[test]
    fn harmonic_oscillator_spectrum() {
        let r = eigenvalues(&dmatrix![0.0, 1.0; -1.0, 0.0]).unwrap();
        assert_eq!(r.eigenvalues.len(), 2);
        let im = sorted_imag(&r);
        assert_relative_eq!(im[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(im[1], 1.0, epsilon = 1e-12);
        assert!(r.spectral_abscissa.abs() < 1e-12);
        assert!(!r.is_hurwitz);
    }

    #[test]
    fn zero_matrix_spectrum() {
        let r = eigenvalues(&Mat::<f64>::zeros(2, 2)).unwrap();
        assert_eq!(r.eigenvalues.len(), 2);
        assert!(r.eigenvalues.iter().all(|l| l.norm() == 0.0));
        assert_eq!(r.spectral_abscissa, 0.0);
    }

    #[test]
    fn non_square_is_dimension_error() {
        assert!(matches!(
            eigenvalues(&Mat::<f64>::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn eigenvalues_work_in_single_precision() {
        let r = eigenvalues(&dmatrix![-1.0f32, 0.0; 0.0, -2.0]).unwrap();
        assert!(r.is_hurwitz);
        assert_relative_eq!(r.spectral_abscissa, -1.0f32, epsilon = 1e-6);
    }

    #[test]
    fn detectability_examples() {
        let q = dmatrix![1.0, 0.0];
        let osc = dmatrix![0.0, 1.0; -1.0, 0.0];
        assert!(is_detectable(&q, &osc, 1e-9).unwrap());
        // λ = 0 of the zero matrix: [−λI; Q] has rank 1 < 2
        assert!(!is_detectable(&q, &Mat::zeros(2, 2), 1e-9).unwrap());
        let any_s = dmatrix![3.0, -1.0; 4.0, 2.0];
        assert!(is_detectable(&Mat::identity(2, 2), &any_s, 1e-9).unwrap());
    }

    #[test]
    fn stable_unobservable_modes_are_detectable() {
        let s = dmatrix![0.0, 0.0; 0.0, -1.0];
        let q = dmatrix![1.0, 0.0];
        assert!(is_detectable(&q, &s, 1e-9).unwrap());
    }

    #[test]
    fn detectability_dimension_error() {
        let r = is_detectable(&dmatrix![1.0, 0.0, 0.0], &Mat::zeros(2, 2), 1e-9);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn scalar_gain_solves_hand_riccati() {
        // 2·0.5·P − P² + 1 = 0  ⇒  P = (1 + √5)/2
        let l = synthesize_observer_gain(&dmatrix![0.0], &dmatrix![1.0], 0.5).unwrap();
        let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
        assert_relative_eq!(l[(0, 0)], golden, epsilon = 1e-10);
        assert!(l[(0, 0)] >= 1.0);
    }

    #[test]
    fn mimo_gain_meets_margin() {
        let s = dmatrix![0.0, 1.0; -1.0, 0.0];
        let l = synthesize_observer_gain(&s, &Mat::identity(2, 2), 1.0).unwrap();
        let r = eigenvalues(&(&s - &l)).unwrap();
        assert!(r.spectral_abscissa <= -1.0 + 1e-8);
    }

    #[test]
    fn riccati_residual_vanishes() {
        let s = dmatrix![0.0, 1.0, 0.0; -4.0, 0.0, 0.0; 0.0, 0.0, 0.0];
        let q = dmatrix![1.0, 0.0, 1.0];
        let margin = 0.7;
        let l = synthesize_observer_gain(&s, &q, margin).unwrap();
        // recover P from L = P Qᵀ is not unique here, so check the closed loop instead
        let r = eigenvalues(&(&s - &l * &q)).unwrap();
        assert!(r.spectral_abscissa <= -margin + 1e-8, "{}", r.spectral_abscissa);
    }

    #[test]
    fn undetectable_pair_fails_synthesis() {
        let r = synthesize_observer_gain(&Mat::zeros(2, 2), &dmatrix![1.0, 0.0], 1.0);
        assert!(matches!(r, Err(Error::Synthesis(_))));
    }

    #[test]
    fn pseudo_inverse_examples() {
        let p = pseudo_inverse(&dmatrix![2.0, 0.0; 0.0, 0.0], 1e-9).unwrap();
        assert_relative_eq!(p, dmatrix![0.5, 0.0; 0.0, 0.0], epsilon = 1e-14);
        let i = Mat::<f64>::identity(3, 3);
        assert_relative_eq!(pseudo_inverse(&i, 1e-9).unwrap(), i, epsilon = 1e-14);
        let r = dmatrix![4.0, 1.0; 2.0, 3.0];
        let prod = &r * pseudo_inverse(&r, 1e-9).unwrap();
        assert_relative_eq!(prod, Mat::identity(2, 2), epsilon = 1e-10);
    }

    #[test]
    fn pseudo_inverse_rejects_non_finite() {
        let r = pseudo_inverse(&dmatrix![f64::NAN, 0.0; 0.0, 1.0], 1e-9);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn sigma_identity_for_internal_model() {
        let s = dmatrix![0.0, 2.0; -2.0, 0.0];
        let r = dmatrix![2.0, 0.5; 0.5, 1.0];
        let q = dmatrix![1.0, -1.0; 0.0, 3.0];
        let g_c = -pseudo_inverse(&r, 1e-9).unwrap() * &q;
        let sol = solve_sigma(&s, &g_c, &r, &q, &s).unwrap();
        assert_relative_eq!(sol.sigma, Mat::identity(2, 2), epsilon = 1e-10);
        assert!(sol.residual <= 1e-10);
    }

    #[test]
    fn sigma_residual_detects_perturbed_model() {
        let s = dmatrix![0.0, 1.0; -1.0, 0.0];
        let r = Mat::identity(2, 2);
        let q = Mat::identity(2, 2);
        let g_c = -Mat::identity(2, 2);
        let a_c = &s + dmatrix![0.3, 0.0; 0.0, 0.0];
        // Σ = I: ΣS − A_cΣ = −Δ
        let res = sigma_residual(&Mat::identity(2, 2), &a_c, &g_c, &r, &q, &s);
        assert_relative_eq!(res, 0.3, epsilon = 1e-14);
        let sol = solve_sigma(&a_c, &g_c, &r, &q, &s).unwrap();
        assert!(sol.residual > 1e-3);
    }

    #[test]
    fn sigma_all_zero() {
        let z = Mat::<f64>::zeros(2, 2);
        let sol = solve_sigma(&z, &z, &z, &z, &z).unwrap();
        assert_eq!(sol.sigma, z);
        assert_eq!(sol.residual, 0.0);
    }
}
