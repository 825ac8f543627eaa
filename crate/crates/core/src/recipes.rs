//! Seeded random problem generators.
//!
//! Every generator draws from a ChaCha8 stream seeded with a `u64`, so a seed
//! fixes the problem bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::exosystem::Exosystem;
use crate::loss::{quadratic_loss, LossModel};
use crate::mismatch::LinearClosedLoop;
use crate::{Error, Float, Mat, Result, Vector};

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian_matrix<T: Float, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat<T> {
    // drawn row by row so the stream order does not depend on storage layout
    let mut m = Mat::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let v: f64 = StandardNormal.sample(rng);
            m[(i, j)] = T::lit(v);
        }
    }
    m
}

/// Haar-distributed orthogonal matrix from the QR factorization of a
/// Gaussian matrix with the signs of `diag(R)` fixed positive.
pub fn random_orthogonal<T: Float, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Mat<T> {
    let g = gaussian_matrix::<T, _>(rng, n, n);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < T::zero() {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// A random instance of the quadratic tracking problem.
#[derive(Debug, Clone)]
pub struct QuadraticProblem<T: Float> {
    pub r: Mat<T>,
    pub q: Mat<T>,
    pub s: Mat<T>,
    pub exosystem: Exosystem<T>,
    pub loss: LossModel<T>,
    pub theta0: Vector<T>,
}

/// `R = U diag(λ) Uᵀ` with `λᵢ` uniform in `(0, 1)` and Haar `U`; `Q = I`;
/// `S = S̃ − S̃ᵀ` with Gaussian `S̃`; Gaussian `θ(0)`.
pub fn random_quadratic_problem<T: Float>(seed: u64, n: usize) -> Result<QuadraticProblem<T>> {
    if n == 0 {
        return Err(Error::Validation("problem dimension must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let u = random_orthogonal::<T, _>(&mut rng, n);
    let open = Uniform::new(f64::EPSILON, 1.0).expect("valid interval");
    let eig = Vector::from_fn(n, |_, _| T::lit(open.sample(&mut rng)));
    let r = &u * Mat::from_diagonal(&eig) * u.transpose();
    let r = (&r + r.transpose()) * T::lit(0.5);
    let q = Mat::identity(n, n);
    let st = gaussian_matrix::<T, _>(&mut rng, n, n);
    let s = &st - st.transpose();
    let theta0 = gaussian_matrix::<T, _>(&mut rng, n, 1).column(0).clone_owned();
    let exosystem = Exosystem::linear(s.clone())?;
    let loss = quadratic_loss(r.clone(), q.clone())?;
    Ok(QuadraticProblem { r, q, s, exosystem, loss, theta0 })
}

/// A random linear loop with `S = 0` whose error system is Hurwitz, plus a
/// Gaussian `θ(0)`.
///
/// `R` is SPD with eigenvalues in `(0.5, 1.5)`, `G_c` and `Q` are Gaussian,
/// `Σ = −(RG_c)⁻¹Q` and `B_c = (H − A_c)(RG_c)⁻¹` for a Gaussian `A_c` and
/// `H = −(MMᵀ + ½I)`, so `A_c + B_cRG_c = H`. The forcing is `Δ = A_cΣ`.
pub fn random_constant_mismatch_loop<T: Float>(seed: u64, n: usize) -> Result<(LinearClosedLoop<T>, Vector<T>)> {
    if n == 0 {
        return Err(Error::Validation("problem dimension must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let u = random_orthogonal::<T, _>(&mut rng, n);
    let band = Uniform::new(0.5, 1.5).expect("valid interval");
    let eig = Vector::from_fn(n, |_, _| T::lit(band.sample(&mut rng)));
    let r = &u * Mat::from_diagonal(&eig) * u.transpose();
    let r = (&r + r.transpose()) * T::lit(0.5);
    let g_c = gaussian_matrix::<T, _>(&mut rng, n, n) + Mat::identity(n, n) * T::lit(2.0);
    let q = gaussian_matrix::<T, _>(&mut rng, n, n);
    let a_c = gaussian_matrix::<T, _>(&mut rng, n, n);
    let m = gaussian_matrix::<T, _>(&mut rng, n, n) * T::lit(0.5);
    let h = -(&m * m.transpose() + Mat::identity(n, n) * T::lit(0.5));
    let rg_inv = (&r * &g_c)
        .try_inverse()
        .ok_or_else(|| Error::Numeric("RG_c is singular".into()))?;
    let b_c = (&h - &a_c) * &rg_inv;
    let sigma = -(&rg_inv * &q);
    let theta0 = gaussian_matrix::<T, _>(&mut rng, n, 1).column(0).clone_owned();
    let cl = LinearClosedLoop::new(a_c, b_c, g_c, r, q, Mat::zeros(n, n), Some(sigma))?;
    Ok((cl, theta0))
}
