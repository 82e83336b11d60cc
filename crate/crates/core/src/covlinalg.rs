//! Covariance assembly and the dense complex linear algebra shared by every
//! detector.
//!
//! `Sigma = S Diag(w) S^H + sigma^2 I` with `w = alpha * g` (known pathloss)
//! or `w = gamma` (unknown pathloss). Inverses of the Hermitian positive
//! definite `Sigma` are computed with two real Cholesky-based inversions
//! (Frobenius inversion), rank-one changes with the Sherman-Morrison form of
//! the Woodbury identity.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::sysmodel::{hermitize, CMat};

/// Largest Cholesky-estimated condition number accepted by the inversion.
pub const MAX_CONDITION: f64 = 1e15;

/// Covariance, its inverse and the per-device quadratic forms
/// `q_n = s_n^H Sigma^{-1} s_n` and `r_n = s_n^H Sigma^{-1} Sigma_Y Sigma^{-1} s_n`.
#[derive(Debug, Clone)]
pub struct CovState {
    pub sigma: CMat,
    pub sigma_inv: CMat,
    pub q: DVector<f64>,
    pub r: DVector<f64>,
}

impl CovState {
    /// Build the state for covariance weights `w` (`alpha * g` or `gamma`).
    pub fn new(pilots: &CMat, weights: &DVector<f64>, noise_power: f64, emp_cov: &CMat) -> Result<Self> {
        Self::from_split(&SplitPilots::new(pilots), weights, noise_power, emp_cov)
    }

    /// As [`CovState::new`] with the pilot matrix already split.
    pub fn from_split(pilots: &SplitPilots, weights: &DVector<f64>, noise_power: f64, emp_cov: &CMat) -> Result<Self> {
        let sigma = cov_from_split(pilots, weights, noise_power)?;
        let sigma_inv = frobenius_inverse(&sigma)?;
        let (q, r) = quad_forms_split(pilots, &sigma_inv, emp_cov)?;
        Ok(Self { sigma, sigma_inv, q, r })
    }
}

/// Pilot matrix as the stacked real matrix `[Re S; Im S]` (and its
/// transpose), so that the `O(N L^2)` complex products run as single real
/// matrix products with inner dimension `2L` or `N`.
#[derive(Debug, Clone)]
pub struct SplitPilots {
    stacked: DMatrix<f64>,
    stacked_t: DMatrix<f64>,
}

impl SplitPilots {
    pub fn new(pilots: &CMat) -> Self {
        let (l, n) = pilots.shape();
        let stacked = DMatrix::from_fn(2 * l, n, |i, j| if i < l { pilots[(i, j)].re } else { pilots[(i - l, j)].im });
        let stacked_t = stacked.transpose();
        Self { stacked, stacked_t }
    }

    pub fn nrows(&self) -> usize {
        self.stacked.nrows() / 2
    }

    pub fn ncols(&self) -> usize {
        self.stacked.ncols()
    }
}

/// Real representation `[[Re A, -Im A], [Im A, Re A]]` of a complex matrix.
fn realify(a: &CMat) -> DMatrix<f64> {
    let (r, c) = a.shape();
    DMatrix::from_fn(2 * r, 2 * c, |i, j| {
        let z = a[(i % r, j % c)];
        match (i < r, j < c) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    })
}

/// `S Diag(w) S^H + noise I`.
pub fn cov_from_weights(pilots: &CMat, weights: &DVector<f64>, noise_power: f64) -> Result<CMat> {
    cov_from_split(&SplitPilots::new(pilots), weights, noise_power)
}

/// [`cov_from_weights`] on split pilots.
pub fn cov_from_split(pilots: &SplitPilots, weights: &DVector<f64>, noise_power: f64) -> Result<CMat> {
    if !(noise_power > 0.0) {
        return Err(Error::domain(format!("noise power must be positive, got {noise_power}")));
    }
    if pilots.ncols() != weights.len() {
        return Err(Error::shape(format!(
            "weight vector has length {}, pilots have {} columns",
            weights.len(),
            pilots.ncols()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::domain(format!("covariance weight {w} is negative or NaN")));
    }
    let l = pilots.nrows();
    // With X = [A; B] and S = A + iB, G = X W X^T holds the blocks
    // [A W A^T, A W B^T; B W A^T, B W B^T].
    let mut scaled = pilots.stacked.clone();
    for (mut col, &w) in scaled.column_iter_mut().zip(weights.iter()) {
        col *= w;
    }
    let g = scaled * &pilots.stacked_t;
    let mut sigma = CMat::from_fn(l, l, |i, j| {
        Complex64::new(g[(i, j)] + g[(i + l, j + l)], g[(i + l, j)] - g[(i, j + l)])
    });
    for i in 0..l {
        sigma[(i, i)] += Complex64::from(noise_power);
    }
    hermitize(&mut sigma);
    Ok(sigma)
}

/// Covariance for known pathloss: `S Diag(alpha) Diag(g) S^H + sigma^2 I`.
pub fn cov_known(pilots: &CMat, alpha: &DVector<f64>, gains: &DVector<f64>, noise_power: f64) -> Result<CMat> {
    if alpha.len() != gains.len() {
        return Err(Error::shape("activity and gain vectors differ in length"));
    }
    cov_from_weights(pilots, &alpha.component_mul(gains), noise_power)
}

/// Covariance for unknown pathloss: `S Diag(gamma) S^H + sigma^2 I`.
pub fn cov_unknown(pilots: &CMat, gamma: &DVector<f64>, noise_power: f64) -> Result<CMat> {
    cov_from_weights(pilots, gamma, noise_power)
}

fn split(sigma: &CMat) -> (DMatrix<f64>, DMatrix<f64>) {
    (sigma.map(|z| z.re), sigma.map(|z| z.im))
}

/// Condition number estimate `(max l_ii / min l_ii)^2` from a Cholesky factor.
fn cholesky_condition(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let diag = l.diagonal();
    let max = diag.max();
    let min = diag.min();
    (max / min).powi(2)
}

fn checked_cholesky(a: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(a).ok_or(Error::Conditioning { cond: f64::INFINITY })?;
    let cond = cholesky_condition(&chol);
    if !(cond < MAX_CONDITION) {
        return Err(Error::Conditioning { cond });
    }
    Ok(chol)
}

/// Inverse of a Hermitian positive definite matrix from two real inversions:
///
/// `Re(Sigma^{-1}) = (A + B A^{-1} B)^{-1}` and
/// `Im(Sigma^{-1}) = -A^{-1} B (A + B A^{-1} B)^{-1}`, with `A = Re(Sigma)`,
/// `B = Im(Sigma)`.
pub fn frobenius_inverse(sigma: &CMat) -> Result<CMat> {
    if !sigma.is_square() {
        return Err(Error::shape("inverse of a non-square matrix"));
    }
    let (a, b) = split(sigma);
    let chol_a = checked_cholesky(a.clone())?;
    let a_inv_b = chol_a.solve(&b);
    let mut schur = a + &b * &a_inv_b;
    schur = (&schur + schur.transpose()) * 0.5;
    let chol_s = checked_cholesky(schur)?;
    let re = chol_s.inverse();
    let im = -(&a_inv_b * &re);
    let mut inv = CMat::from_fn(sigma.nrows(), sigma.ncols(), |i, j| Complex64::new(re[(i, j)], im[(i, j)]));
    hermitize(&mut inv);
    Ok(inv)
}

/// `Sigma^{-1} - delta Sigma^{-1} s s^H Sigma^{-1} / (1 + delta s^H Sigma^{-1} s)`,
/// the inverse of `Sigma + delta s s^H`.
pub fn woodbury_rank1(sigma_inv: &CMat, s: &DVector<Complex64>, delta: f64) -> Result<CMat> {
    let u = sigma_inv * s;
    let q = s.dotc(&u).re;
    let mut out = sigma_inv.clone();
    woodbury_rank1_in_place(&mut out, &u, q, delta)?;
    Ok(out)
}

/// In-place rank-one update given `u = Sigma^{-1} s` and `q = s^H u`.
pub fn woodbury_rank1_in_place(sigma_inv: &mut CMat, u: &DVector<Complex64>, q: f64, delta: f64) -> Result<()> {
    if delta == 0.0 {
        return Ok(());
    }
    let denom = 1.0 + delta * q;
    if !(denom > 1e-14) {
        return Err(Error::SingularUpdate { denom });
    }
    let c = Complex64::from(-delta / denom);
    sigma_inv.gerc(c, u, u, Complex64::from(1.0));
    Ok(())
}

/// Batched quadratic forms `(q, r)` for every pilot column, via
/// `W = Sigma^{-1} S`, `V = Sigma_Y W` and column reductions.
pub fn quad_forms(pilots: &CMat, sigma_inv: &CMat, emp_cov: &CMat) -> Result<(DVector<f64>, DVector<f64>)> {
    quad_forms_split(&SplitPilots::new(pilots), sigma_inv, emp_cov)
}

/// [`quad_forms`] on split pilots.
pub fn quad_forms_split(pilots: &SplitPilots, sigma_inv: &CMat, emp_cov: &CMat) -> Result<(DVector<f64>, DVector<f64>)> {
    let l = pilots.nrows();
    if sigma_inv.shape() != (l, l) || emp_cov.shape() != (l, l) {
        return Err(Error::shape(format!(
            "pilots have {l} rows, inverse is {:?}, empirical covariance is {:?}",
            sigma_inv.shape(),
            emp_cov.shape()
        )));
    }
    // [W_re; W_im] = Sigma^{-1} S and [V_re; V_im] = Sigma_Y W, in real form.
    let w = realify(sigma_inv) * &pilots.stacked;
    let v = realify(emp_cov) * &w;
    let n = pilots.ncols();
    let q = DVector::from_fn(n, |j, _| pilots.stacked.column(j).dot(&w.column(j)));
    let r = DVector::from_fn(n, |j, _| w.column(j).dot(&v.column(j)));
    Ok((q, r))
}

/// `log det Sigma` from a complex Cholesky factorization.
pub fn log_det(sigma: &CMat) -> Result<f64> {
    let not_pd = || Error::domain("log-determinant of a matrix that is not positive definite");
    let chol = Cholesky::new(sigma.clone()).ok_or_else(not_pd)?;
    let mut acc = 0.0;
    for d in chol.l_dirty().diagonal().iter() {
        if !(d.re > 0.0 && d.im.abs() <= 1e-12 * d.re) {
            return Err(not_pd());
        }
        acc += d.re.ln();
    }
    Ok(2.0 * acc)
}

/// `Re tr(A B)` without forming the product.
pub(crate) fn trace_of_product(a: &CMat, b: &CMat) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += (a[(i, j)] * b[(j, i)]).re;
        }
    }
    acc
}

/// Negative normalized log-likelihood `log|Sigma| + tr(Sigma^{-1} Sigma_Y)`.
pub fn eval_objective(sigma: &CMat, sigma_inv: &CMat, emp_cov: &CMat) -> Result<f64> {
    let value = log_det(sigma)? + trace_of_product(sigma_inv, emp_cov);
    if !value.is_finite() {
        return Err(Error::domain("objective is not finite"));
    }
    Ok(value)
}
