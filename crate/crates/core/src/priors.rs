//! Prior distributions for the MAP detectors.
//!
//! Activity priors (independent Bernoulli and the second-order multivariate
//! Bernoulli model) enter the known-pathloss objective through the penalty
//! `-(1/M) log p(alpha)`. The unknown-pathloss objective uses the density of
//! the effective pathloss `gamma = alpha g`, a point mass at zero plus a
//! continuous part on `[g_low, g_high]`, replaced here by a differentiable
//! Hermite-smoothed density on `[0, g_high]`.
//!
//! The MVB normalization constant is never evaluated; it cancels from every
//! gradient and only shifts objective values by a constant.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sysmodel::{ActivityModel, PathlossLaw, SystemConfig};

/// Density value below which `log p` is considered `-inf` in the
/// unknown-pathloss penalty.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// Default magnitude of the dead-zone gradient, in units of `1 / (M eps)`.
pub const DEFAULT_DEAD_ZONE_PUSH: f64 = 1e3;

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("probability {p} not in (0,1)")))
    }
}

/// Density of the device distance, uniform over the annulus area.
pub fn pdf_distance(d: f64, d_inner: f64, d_outer: f64) -> f64 {
    if d < d_inner || d > d_outer {
        return 0.0;
    }
    2.0 * d / (d_outer * d_outer - d_inner * d_inner)
}

/// Independent Bernoulli activity prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependentPrior {
    pub p: Vec<f64>,
}

impl IndependentPrior {
    pub fn uniform(n: usize, p: f64) -> Self {
        Self { p: vec![p; n] }
    }
}

/// Second-order MVB prior `log p(alpha) = sum c1_n alpha_n + sum_{n<m} c2_nm alpha_n alpha_m + const`.
///
/// `pairs` holds the nonzero upper-triangle entries `(n, m, c2_nm)` with `n < m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMvbPrior {
    pub c1: Vec<f64>,
    pub pairs: Vec<(usize, usize, f64)>,
}

impl PairwiseMvbPrior {
    pub fn validate(&self) -> Result<()> {
        let n = self.c1.len();
        for &(a, b, c) in &self.pairs {
            if a >= b || b >= n {
                return Err(Error::domain(format!(
                    "pair ({a}, {b}) is not a strict upper-triangle entry for {n} devices"
                )));
            }
            if !c.is_finite() {
                return Err(Error::domain(format!("pair coefficient {c} is not finite")));
            }
        }
        Ok(())
    }

    /// The independent prior with `p_n = sigmoid(c1_n)`.
    pub fn from_independent(prior: &IndependentPrior) -> Result<Self> {
        for &p in &prior.p {
            check_probability(p)?;
        }
        Ok(Self { c1: prior.p.iter().map(|&p| logit(p)).collect(), pairs: Vec::new() })
    }

    /// Log-probability up to the normalization constant.
    pub fn unnormalized_log_pmf(&self, alpha: &DVector<f64>) -> f64 {
        let linear: f64 = self.c1.iter().zip(alpha.iter()).map(|(c, a)| c * a).sum();
        let pairwise: f64 = self.pairs.iter().map(|&(n, m, c)| c * alpha[n] * alpha[m]).sum();
        linear + pairwise
    }

    /// Fit a second-order model to an activity law by moment matching.
    ///
    /// For the group law every group is an exchangeable block, so the fit is
    /// a symmetric two-parameter family `P(k) ~ C(K,k) exp(a k + b k(k-1)/2)`
    /// over the number `k` of active members. The all-or-nothing group law
    /// has no finite fit (its second-order coefficients diverge), so the
    /// target moments are those of the mixture `(1 - tau) law + tau iid`.
    pub fn fit(model: &ActivityModel, n_devices: usize, tau: f64) -> Result<Self> {
        match *model {
            ActivityModel::Iid { p } => Self::from_independent(&IndependentPrior::uniform(n_devices, p)),
            ActivityModel::Group { group_size, p_group } => {
                check_probability(p_group)?;
                if group_size == 0 || n_devices % group_size != 0 {
                    return Err(Error::config(format!(
                        "group size {group_size} does not divide {n_devices} devices"
                    )));
                }
                if group_size == 1 {
                    return Self::from_independent(&IndependentPrior::uniform(n_devices, p_group));
                }
                if !(tau > 0.0 && tau < 1.0) {
                    return Err(Error::config(format!("smoothing weight {tau} not in (0,1)")));
                }
                let (a, b) = fit_exchangeable(group_size, p_group, tau)?;
                let mut pairs = Vec::new();
                for start in (0..n_devices).step_by(group_size) {
                    for n in start..start + group_size {
                        for m in n + 1..start + group_size {
                            pairs.push((n, m, b));
                        }
                    }
                }
                Ok(Self { c1: vec![a; n_devices], pairs })
            }
        }
    }
}

fn ln_binomial(k_total: usize, k: usize) -> f64 {
    (1..=k).map(|i| ((k_total - k + i) as f64 / i as f64).ln()).sum()
}

/// Moments `(E k, E k(k-1)/2)` under `P(k) ~ C(K,k) exp(a k + b k(k-1)/2)`,
/// together with the covariance matrix of the two statistics.
fn exchangeable_moments(group_size: usize, a: f64, b: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let logw: Vec<f64> = (0..=group_size)
        .map(|k| {
            let kf = k as f64;
            ln_binomial(group_size, k) + a * kf + b * kf * (kf - 1.0) / 2.0
        })
        .collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut m = [0.0; 2];
    let mut s = [[0.0; 2]; 2];
    for (k, wk) in w.iter().enumerate() {
        let pk = wk / z;
        let t = [k as f64, (k * k.saturating_sub(1)) as f64 / 2.0];
        for i in 0..2 {
            m[i] += pk * t[i];
            for j in 0..2 {
                s[i][j] += pk * t[i] * t[j];
            }
        }
    }
    for i in 0..2 {
        for j in 0..2 {
            s[i][j] -= m[i] * m[j];
        }
    }
    (m, s)
}

/// Newton's method on the convex dual `log Z(a,b) - a m1 - b m2`.
fn fit_exchangeable(group_size: usize, p_group: f64, tau: f64) -> Result<(f64, f64)> {
    let kf = group_size as f64;
    let pairs = kf * (kf - 1.0) / 2.0;
    // Group law: k = K with probability p_group, else 0. Iid law: Binomial(K, p_group).
    let target = [
        (1.0 - tau) * p_group * kf + tau * kf * p_group,
        (1.0 - tau) * p_group * pairs + tau * pairs * p_group * p_group,
    ];
    let dual = |a: f64, b: f64| -> f64 {
        let logw = (0..=group_size).map(|k| {
            let k = k as f64;
            a * k + b * k * (k - 1.0) / 2.0
        });
        let terms: Vec<f64> = logw
            .enumerate()
            .map(|(k, l)| l + ln_binomial(group_size, k))
            .collect();
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln() - a * target[0] - b * target[1]
    };
    let (mut a, mut b) = (logit(p_group), 0.0);
    for _ in 0..200 {
        let (m, s) = exchangeable_moments(group_size, a, b);
        let g = [m[0] - target[0], m[1] - target[1]];
        if g[0].abs() < 1e-12 * kf && g[1].abs() < 1e-12 * pairs {
            return Ok((a, b));
        }
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        if !(det > 0.0) {
            break;
        }
        let da = (s[1][1] * g[0] - s[0][1] * g[1]) / det;
        let db = (s[0][0] * g[1] - s[1][0] * g[0]) / det;
        let f0 = dual(a, b);
        let mut t = 1.0;
        while t > 1e-10 && !(dual(a - t * da, b - t * db) <= f0) {
            t *= 0.5;
        }
        a -= t * da;
        b -= t * db;
    }
    let (m, _) = exchangeable_moments(group_size, a, b);
    if (m[0] - target[0]).abs() < 1e-8 * kf && (m[1] - target[1]).abs() < 1e-8 * pairs {
        Ok((a, b))
    } else {
        Err(Error::domain(format!(
            "pairwise fit did not converge for group size {group_size}, p = {p_group}"
        )))
    }
}

/// Activity prior of the known-pathloss MAP detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ActivityPrior {
    Independent(IndependentPrior),
    Pairwise(PairwiseMvbPrior),
}

impl ActivityPrior {
    pub fn n_devices(&self) -> usize {
        match self {
            ActivityPrior::Independent(p) => p.p.len(),
            ActivityPrior::Pairwise(p) => p.c1.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ActivityPrior::Independent(prior) => prior.p.iter().try_for_each(|&p| check_probability(p)),
            ActivityPrior::Pairwise(prior) => prior.validate(),
        }
    }

    /// Shift every first-order log-odds by `shift` and scale the pairwise
    /// coefficients by `scale`. These are the two trainable prior parameters
    /// of the unrolled MAP detectors.
    pub fn adjusted(&self, shift: f64, scale: f64) -> Self {
        match self {
            ActivityPrior::Independent(prior) => ActivityPrior::Independent(IndependentPrior {
                p: prior.p.iter().map(|&p| sigmoid(logit(p) + shift)).collect(),
            }),
            ActivityPrior::Pairwise(prior) => ActivityPrior::Pairwise(PairwiseMvbPrior {
                c1: prior.c1.iter().map(|c| c + shift).collect(),
                pairs: prior.pairs.iter().map(|&(n, m, c)| (n, m, c * scale)).collect(),
            }),
        }
    }
}

fn check_len(len: usize, n: usize) -> Result<()> {
    if len != n {
        return Err(Error::shape(format!("prior covers {n} devices, vector has {len}")));
    }
    Ok(())
}

/// Penalty `f_t(alpha) = -(1/M) log p(alpha)`, up to a constant.
pub fn log_prior_penalty_known(alpha: &DVector<f64>, prior: &ActivityPrior, m: usize) -> Result<f64> {
    check_len(alpha.len(), prior.n_devices())?;
    let mf = m as f64;
    match prior {
        ActivityPrior::Independent(ind) => {
            let mut acc = 0.0;
            for (&p, &a) in ind.p.iter().zip(alpha.iter()) {
                check_probability(p)?;
                acc += logit(p) * a;
            }
            Ok(-acc / mf)
        }
        ActivityPrior::Pairwise(pw) => Ok(-pw.unnormalized_log_pmf(alpha) / mf),
    }
}

/// Gradient of [`log_prior_penalty_known`].
pub fn log_prior_grad_known(alpha: &DVector<f64>, prior: &ActivityPrior, m: usize) -> Result<DVector<f64>> {
    check_len(alpha.len(), prior.n_devices())?;
    let mf = m as f64;
    match prior {
        ActivityPrior::Independent(ind) => {
            let mut out = DVector::zeros(alpha.len());
            for (o, &p) in out.iter_mut().zip(ind.p.iter()) {
                check_probability(p)?;
                *o = -logit(p) / mf;
            }
            Ok(out)
        }
        ActivityPrior::Pairwise(pw) => {
            let mut out = DVector::from_column_slice(&pw.c1);
            for &(n, k, c) in &pw.pairs {
                out[n] += c * alpha[k];
                out[k] += c * alpha[n];
            }
            Ok(out / -mf)
        }
    }
}

/// Smoothed prior of the effective pathloss `gamma_n = alpha_n g_n`.
///
/// The gain support `[g_low, g_high] = [phi(d_outer), phi(d_inner)]` is the
/// same for all devices; activity probabilities may differ per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffPathlossPrior {
    pub p: Vec<f64>,
    /// Smoothing width; `0 < eps < g_low / 2` keeps the pieces disjoint.
    pub eps: f64,
    pub d_inner: f64,
    pub d_outer: f64,
    pub law: PathlossLaw,
    /// Dead-zone gradient magnitude in units of `1 / (M eps)`.
    pub dead_zone_push: f64,
}

/// Which piece of the smoothed density a point falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Piece {
    Head,
    DeadZone,
    Ramp,
    Body,
}

impl EffPathlossPrior {
    /// Prior matching a scene configuration, with `eps = 0.1 g_low`.
    pub fn from_config(cfg: &SystemConfig) -> Result<Self> {
        let law = cfg.law();
        let g_low = law.gain(cfg.d_outer)?;
        let prior = Self {
            p: vec![cfg.activity.marginal(); cfg.n_devices],
            eps: 0.1 * g_low,
            d_inner: cfg.d_inner,
            d_outer: cfg.d_outer,
            law,
            dead_zone_push: DEFAULT_DEAD_ZONE_PUSH,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn g_low(&self) -> f64 {
        self.law.gain(self.d_outer).unwrap_or(f64::NAN)
    }

    pub fn g_high(&self) -> f64 {
        self.law.gain(self.d_inner).unwrap_or(f64::NAN)
    }

    pub fn validate(&self) -> Result<()> {
        self.p.iter().try_for_each(|&p| check_probability(p))?;
        if !(self.d_inner > 0.0 && self.d_inner < self.d_outer) {
            return Err(Error::domain("annulus radii must satisfy 0 < d_inner < d_outer"));
        }
        let (lo, hi) = (self.g_low(), self.g_high());
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::domain(format!("gain support [{lo}, {hi}] is empty")));
        }
        if !(self.eps > 0.0 && 2.0 * self.eps < lo) {
            return Err(Error::domain(format!(
                "smoothing width {} must lie in (0, g_low/2) = (0, {})",
                self.eps,
                lo / 2.0
            )));
        }
        if !(self.dead_zone_push > 0.0) {
            return Err(Error::domain("dead-zone push must be positive"));
        }
        Ok(())
    }

    /// Same prior with every activity log-odds shifted by `shift`.
    pub fn adjusted(&self, shift: f64) -> Self {
        Self { p: self.p.iter().map(|&p| sigmoid(logit(p) + shift)).collect(), ..self.clone() }
    }

    fn span(&self) -> f64 {
        self.d_outer * self.d_outer - self.d_inner * self.d_inner
    }

    /// Density of the large-scale gain, `-2 phi^{-1}(g) (phi^{-1})'(g) / (d_u^2 - d_l^2)`.
    pub fn pdf_pathloss(&self, g: f64) -> f64 {
        if g < self.g_low() || g > self.g_high() {
            return 0.0;
        }
        -2.0 * self.law.inverse(g) * self.law.inverse_d1(g) / self.span()
    }

    fn dpdf_pathloss(&self, g: f64) -> f64 {
        let d1 = self.law.inverse_d1(g);
        -2.0 * (d1 * d1 + self.law.inverse(g) * self.law.inverse_d2(g)) / self.span()
    }

    /// Exact mixed law: `(atom mass, density)` at `gamma`.
    pub fn pdf_eff_exact(&self, gamma: f64, n: usize) -> (f64, f64) {
        let p = self.p[n];
        if gamma == 0.0 {
            (1.0 - p, 0.0)
        } else {
            (0.0, p * self.pdf_pathloss(gamma))
        }
    }

    pub fn piece(&self, gamma: f64) -> Result<Piece> {
        let (lo, hi) = (self.g_low(), self.g_high());
        if !(gamma >= 0.0 && gamma <= hi) {
            return Err(Error::domain(format!("effective pathloss {gamma} outside [0, {hi}]")));
        }
        Ok(if gamma < self.eps {
            Piece::Head
        } else if gamma < lo - self.eps {
            Piece::DeadZone
        } else if gamma < lo {
            Piece::Ramp
        } else {
            Piece::Body
        })
    }

    /// Cubic Hermite coefficients `(A, B)` of the ramp: value and slope of
    /// the exact density at `g_low`.
    fn ramp_coefs(&self, n: usize) -> (f64, f64) {
        let lo = self.g_low();
        let p = self.p[n];
        (p * self.pdf_pathloss(lo), p * self.dpdf_pathloss(lo))
    }

    /// Smoothed density `p^eps(gamma)` on `[0, g_high]`.
    pub fn pdf_eff_smooth(&self, gamma: f64, n: usize) -> Result<f64> {
        let eps = self.eps;
        let p = self.p[n];
        Ok(match self.piece(gamma)? {
            Piece::Head => {
                let u = (gamma - eps) / eps;
                (1.0 - p) * (1.0 + 2.0 * gamma / eps) * u * u
            }
            Piece::DeadZone => 0.0,
            Piece::Ramp => {
                let (a, b) = self.ramp_coefs(n);
                let t = gamma - self.g_low();
                let u = (t + eps) / eps;
                a * (1.0 - 2.0 * t / eps) * u * u + b * t * u * u
            }
            Piece::Body => p * self.pdf_pathloss(gamma),
        })
    }

    /// Derivative of [`Self::pdf_eff_smooth`].
    pub fn dpdf_eff_smooth(&self, gamma: f64, n: usize) -> Result<f64> {
        let eps = self.eps;
        let p = self.p[n];
        Ok(match self.piece(gamma)? {
            Piece::Head => 6.0 * (1.0 - p) * gamma * (gamma - eps) / (eps * eps * eps),
            Piece::DeadZone => 0.0,
            Piece::Ramp => {
                let (a, b) = self.ramp_coefs(n);
                let t = gamma - self.g_low();
                -6.0 * a * t * (t + eps) / (eps * eps * eps) + b * (t + eps) * (3.0 * t + eps) / (eps * eps)
            }
            Piece::Body => p * self.dpdf_pathloss(gamma),
        })
    }

    /// Dead-zone gradient: pushes toward zero from the lower half of the gap
    /// and toward `g_low` from the upper half.
    pub fn dead_zone_gradient(&self, gamma: f64, m: usize) -> f64 {
        let magnitude = self.dead_zone_push / (m as f64 * self.eps);
        if gamma < 0.5 * self.g_low() {
            magnitude
        } else {
            -magnitude
        }
    }
}

/// Penalty `-(1/M) sum_n log max(p^eps(gamma_n), floor)`.
pub fn log_prior_penalty_unknown(gamma: &DVector<f64>, prior: &EffPathlossPrior, m: usize) -> Result<f64> {
    check_len(gamma.len(), prior.p.len())?;
    let mut acc = 0.0;
    for (n, &g) in gamma.iter().enumerate() {
        acc += prior.pdf_eff_smooth(g, n)?.max(DENSITY_FLOOR).ln();
    }
    Ok(-acc / m as f64)
}

/// Gradient `-(1/M) p'/p` of the unknown-pathloss penalty, with the
/// dead-zone rule where the smoothed density vanishes.
pub fn log_prior_grad_unknown(gamma: &DVector<f64>, prior: &EffPathlossPrior, m: usize) -> Result<DVector<f64>> {
    check_len(gamma.len(), prior.p.len())?;
    let mf = m as f64;
    let mut out = DVector::zeros(gamma.len());
    for (n, &g) in gamma.iter().enumerate() {
        let value = prior.pdf_eff_smooth(g, n)?;
        out[n] = if value <= DENSITY_FLOOR {
            prior.dead_zone_gradient(g, m)
        } else {
            -prior.dpdf_eff_smooth(g, n)? / (value * mf)
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prior() -> EffPathlossPrior {
        EffPathlossPrior::from_config(&SystemConfig::desk()).unwrap()
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn distance_density() {
        assert!((pdf_distance(200.0, 20.0, 200.0) - 400.0 / 39600.0).abs() < 1e-15);
        assert_eq!(pdf_distance(10.0, 20.0, 200.0), 0.0);
        let mass = simpson(|d| pdf_distance(d, 20.0, 200.0), 20.0, 200.0, 1000);
        assert!((mass - 1.0).abs() < 1e-8);
    }

    #[test]
    fn gain_density_is_normalized_change_of_variables() {
        let pr = prior();
        let (lo, hi) = (pr.g_low(), pr.g_high());
        // Integrate in log-gain to resolve the heavy concentration near g_low.
        let mass = simpson(|t| { let g = t.exp(); pr.pdf_pathloss(g) * g }, lo.ln(), hi.ln(), 20_000);
        assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
        for i in 0..20 {
            let g = lo * (hi / lo).powf(i as f64 / 19.0);
            let d = pr.law.inverse(g);
            let h = 1e-6 * g;
            let jac = ((pr.law.inverse(g + h) - pr.law.inverse(g - h)) / (2.0 * h)).abs();
            let oracle = pdf_distance(d.clamp(pr.d_inner, pr.d_outer), pr.d_inner, pr.d_outer) * jac;
            let value = pr.pdf_pathloss(g);
            assert!(value > 0.0);
            assert!((value - oracle).abs() <= 1e-6 * oracle, "{value} vs {oracle}");
            let exact = pdf_distance(d.clamp(pr.d_inner, pr.d_outer), pr.d_inner, pr.d_outer) * pr.law.inverse_d1(g).abs();
            assert!((value - exact).abs() <= 1e-10 * exact);
        }
        assert_eq!(pr.pdf_pathloss(0.5 * lo), 0.0);
    }

    #[test]
    fn inverse_law_derivatives_match_finite_differences() {
        let law = SystemConfig::desk().law();
        let g = law.gain(60.0).unwrap();
        let h = 1e-5 * g;
        let d1 = (law.inverse(g + h) - law.inverse(g - h)) / (2.0 * h);
        let d2 = (law.inverse_d1(g + h) - law.inverse_d1(g - h)) / (2.0 * h);
        assert!((d1 - law.inverse_d1(g)).abs() < 1e-8 * d1.abs());
        assert!((d2 - law.inverse_d2(g)).abs() < 1e-8 * d2.abs());
    }

    #[test]
    fn exact_mixture() {
        let pr = prior();
        assert_eq!(pr.pdf_eff_exact(0.0, 0), (0.95, 0.0));
        let lo = pr.g_low();
        assert_eq!(pr.pdf_eff_exact(lo, 0).1, 0.05 * pr.pdf_pathloss(lo));
        assert_eq!(pr.pdf_eff_exact(0.5 * lo, 0), (0.0, 0.0));
        let cont = simpson(|t| { let g = t.exp(); pr.pdf_eff_exact(g, 0).1 * g }, lo.ln(), pr.g_high().ln(), 20_000);
        assert!((0.95 + cont - 1.0).abs() < 1e-6);
    }

    #[test]
    fn smoothed_density_landmarks() {
        let pr = prior();
        let lo = pr.g_low();
        assert_eq!(pr.pdf_eff_smooth(0.0, 3).unwrap(), 0.95);
        assert_eq!(pr.pdf_eff_smooth(pr.eps, 3).unwrap(), 0.0);
        assert!(pr.pdf_eff_smooth(lo - pr.eps, 3).unwrap().abs() < 1e-9 * pr.pdf_pathloss(lo));
        let at_lo = pr.pdf_eff_smooth(lo, 3).unwrap();
        let oracle = 0.05 * pr.pdf_pathloss(lo);
        assert!((at_lo - oracle).abs() <= 1e-10 * oracle);
        assert_eq!(pr.dpdf_eff_smooth(0.0, 3).unwrap(), 0.0);
        assert_eq!(pr.dpdf_eff_smooth(pr.eps, 3).unwrap(), 0.0);
        assert!(matches!(pr.pdf_eff_smooth(-1e-20, 0), Err(Error::Domain(_))));
        assert!(matches!(pr.pdf_eff_smooth(2.0 * pr.g_high(), 0), Err(Error::Domain(_))));
    }

    #[test]
    fn smoothed_equals_exact_on_body() {
        let pr = prior();
        let (lo, hi) = (pr.g_low(), pr.g_high());
        for i in 0..50 {
            let g = lo + (hi - lo) * i as f64 / 49.0;
            assert_eq!(pr.pdf_eff_smooth(g, 0).unwrap(), pr.pdf_eff_exact(g, 0).1);
        }
    }

    #[test]
    fn derivative_matches_finite_differences_in_every_piece() {
        let pr = prior();
        let (lo, hi, eps) = (pr.g_low(), pr.g_high(), pr.eps);
        let points = [0.3 * eps, 0.8 * eps, 0.5 * lo, lo - 0.7 * eps, lo - 0.2 * eps, 1.3 * lo, 0.5 * (lo + hi)];
        for &g in &points {
            let h = 1e-7 * eps;
            let fd = (pr.pdf_eff_smooth(g + h, 0).unwrap() - pr.pdf_eff_smooth(g - h, 0).unwrap()) / (2.0 * h);
            let an = pr.dpdf_eff_smooth(g, 0).unwrap();
            assert!((fd - an).abs() <= (1e-6f64).max(1e-4 * an.abs()), "at {g}: {fd} vs {an}");
        }
    }

    #[test]
    fn smoothing_shrinks_density_in_gap() {
        let base = prior();
        let lo = base.g_low();
        let gamma = 0.3 * lo;
        let mut last = f64::INFINITY;
        for frac in [0.5, 0.25, 0.125] {
            let pr = EffPathlossPrior { eps: frac * lo * 0.999, ..base.clone() };
            let v = pr.pdf_eff_smooth(gamma, 0).unwrap();
            assert!(v <= last);
            last = v;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn independent_gradient_values() {
        let alpha = DVector::from_element(4, 0.3);
        let half = ActivityPrior::Independent(IndependentPrior::uniform(4, 0.5));
        assert!(log_prior_grad_known(&alpha, &half, 64).unwrap().iter().all(|&v| v == 0.0));
        let sparse = ActivityPrior::Independent(IndependentPrior::uniform(4, 0.05));
        let g = log_prior_grad_known(&alpha, &sparse, 64).unwrap();
        assert!((g[0] - 0.046_006_6).abs() < 1e-6, "{}", g[0]);
        let bad = ActivityPrior::Independent(IndependentPrior::uniform(4, 1.0));
        assert!(log_prior_grad_known(&alpha, &bad, 64).is_err());
    }

    #[test]
    fn pairwise_without_pairs_reduces_to_independent() {
        let c1 = vec![-2.0, 0.5, 1.5];
        let pw = ActivityPrior::Pairwise(PairwiseMvbPrior { c1: c1.clone(), pairs: vec![] });
        let ind = ActivityPrior::Independent(IndependentPrior {
            p: c1.iter().map(|&c| c.exp() / (c.exp() + 1.0)).collect(),
        });
        let alpha = DVector::from_vec(vec![0.1, 0.7, 0.4]);
        let a = log_prior_grad_known(&alpha, &pw, 32).unwrap();
        let b = log_prior_grad_known(&alpha, &ind, 32).unwrap();
        assert!((a - b).norm() < 1e-15);
    }

    #[test]
    fn pairwise_gradient_matches_finite_differences() {
        let pw = ActivityPrior::Pairwise(PairwiseMvbPrior {
            c1: vec![-1.0, 0.3, -0.2, 0.8],
            pairs: vec![(0, 1, 1.5), (1, 3, -0.7), (0, 2, 2.0)],
        });
        let alpha = DVector::from_vec(vec![0.2, 0.6, 0.5, 0.9]);
        let g = log_prior_grad_known(&alpha, &pw, 16).unwrap();
        for n in 0..4 {
            let h = 1e-6;
            let mut up = alpha.clone();
            up[n] += h;
            let mut dn = alpha.clone();
            dn[n] -= h;
            let fd = (log_prior_penalty_known(&up, &pw, 16).unwrap() - log_prior_penalty_known(&dn, &pw, 16).unwrap()) / (2.0 * h);
            assert!((fd - g[n]).abs() < 1e-8);
        }
    }

    #[test]
    fn group_fit_matches_target_moments() {
        let model = ActivityModel::Group { group_size: 4, p_group: 0.05 };
        let fit = PairwiseMvbPrior::fit(&model, 8, 0.01).unwrap();
        assert_eq!(fit.pairs.len(), 12);
        assert!(fit.pairs.iter().all(|&(n, m, _)| n / 4 == m / 4));
        let b = fit.pairs[0].2;
        assert!(b > 0.0, "within-group coupling should be attractive, got {b}");
        let (m, _) = exchangeable_moments(4, fit.c1[0], b);
        assert!((m[0] / 4.0 - 0.05).abs() < 1e-9);
        let iid = PairwiseMvbPrior::fit(&ActivityModel::Iid { p: 0.05 }, 8, 0.01).unwrap();
        assert!(iid.pairs.is_empty());
        assert!((iid.c1[0] - logit(0.05)).abs() < 1e-15);
    }

    #[test]
    fn unknown_gradient_rules() {
        let pr = prior();
        let lo = pr.g_low();
        let mut gamma = DVector::zeros(pr.p.len());
        gamma[1] = 0.3 * lo;
        gamma[2] = 0.8 * lo;
        gamma[3] = lo;
        let g = log_prior_grad_unknown(&gamma, &pr, 64).unwrap();
        assert_eq!(g[0], 0.0);
        let push = pr.dead_zone_push / (64.0 * pr.eps);
        assert_eq!(g[1], push);
        assert_eq!(g[2], -push);
        let h = 1e-7 * lo;
        let logp = |x: f64| pr.pdf_eff_smooth(x, 3).unwrap().ln();
        let fd = -(logp(lo + h) - logp(lo - h)) / (2.0 * h) / 64.0;
        assert!((fd - g[3]).abs() <= 1e-5 * g[3].abs());
    }
}
