//! Synthetic grant-free access scenes.
//!
//! A scene is one coherence block: `N` single-antenna devices with
//! non-orthogonal pilots of length `L`, a base station with `M` antennas,
//! Rayleigh small-scale fading and a distance-dependent large-scale gain.
//! Devices are dropped uniformly in an annulus around the base station.
//!
//! All randomness comes from ChaCha8 streams: sample `i` of a dataset with
//! seed `s` is drawn from `ChaCha8Rng::seed_from_u64(s)` with stream `i`.
//! Frozen pilots use stream `u64::MAX`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;

/// Stream index reserved for pilots shared by a whole dataset.
const FROZEN_PILOT_STREAM: u64 = u64::MAX;

/// Device activity law used when drawing scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ActivityModel {
    /// Every device is active independently with probability `p`.
    Iid { p: f64 },
    /// Contiguous disjoint groups of `group_size` devices switch on together;
    /// each group is active independently with probability `p_group`.
    Group { group_size: usize, p_group: f64 },
}

impl ActivityModel {
    /// Marginal activity probability of a single device.
    pub fn marginal(&self) -> f64 {
        match *self {
            ActivityModel::Iid { p } => p,
            ActivityModel::Group { p_group, .. } => p_group,
        }
    }

    pub fn group_size(&self) -> usize {
        match *self {
            ActivityModel::Iid { .. } => 1,
            ActivityModel::Group { group_size, .. } => group_size,
        }
    }

    fn validate(&self, n_devices: usize) -> Result<()> {
        let p = self.marginal();
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::config(format!("activity probability {p} not in (0,1)")));
        }
        if let ActivityModel::Group { group_size, .. } = *self {
            if group_size == 0 || n_devices % group_size != 0 {
                return Err(Error::config(format!(
                    "group size {group_size} does not divide {n_devices} devices"
                )));
            }
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, n_devices: usize, rng: &mut R) -> Vec<bool> {
        match *self {
            ActivityModel::Iid { p } => (0..n_devices).map(|_| rng.random::<f64>() < p).collect(),
            ActivityModel::Group { group_size, p_group } => {
                let mut out = Vec::with_capacity(n_devices);
                for _ in 0..n_devices / group_size {
                    let on = rng.random::<f64>() < p_group;
                    out.extend(std::iter::repeat_n(on, group_size));
                }
                out
            }
        }
    }
}

/// Distance-to-gain law `g = P * (4 pi d / lambda)^(-eta)`, i.e. a pathloss
/// of `10 eta log10(4 pi d / lambda)` dB with the transmit power folded in.
///
/// Gains are linear and expressed in mW, the same scale as the noise power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathlossLaw {
    pub tx_power_dbm: f64,
    pub exponent: f64,
    pub wavelength: f64,
}

impl PathlossLaw {
    /// Transmit power in mW.
    pub fn tx_power_mw(&self) -> f64 {
        10f64.powf(self.tx_power_dbm / 10.0)
    }

    /// Pathloss in dB at distance `d`.
    pub fn pathloss_db(&self, d: f64) -> f64 {
        10.0 * self.exponent * (4.0 * std::f64::consts::PI * d / self.wavelength).log10()
    }

    /// Large-scale gain without transmit power.
    pub fn raw_gain(&self, d: f64) -> Result<f64> {
        if !(d > 0.0) {
            return Err(Error::domain(format!("distance must be positive, got {d}")));
        }
        Ok(10f64.powf(-self.pathloss_db(d) / 10.0))
    }

    /// The gain `phi(d)` including transmit power. Strictly decreasing in `d`
    /// for a positive exponent.
    pub fn gain(&self, d: f64) -> Result<f64> {
        Ok(self.tx_power_mw() * self.raw_gain(d)?)
    }

    fn inverse_scale(&self) -> f64 {
        self.wavelength / (4.0 * std::f64::consts::PI) * self.tx_power_mw().powf(1.0 / self.exponent)
    }

    /// `phi^{-1}(g)`: distance at which the gain equals `g`.
    pub fn inverse(&self, g: f64) -> f64 {
        self.inverse_scale() * g.powf(-1.0 / self.exponent)
    }

    /// First derivative of `phi^{-1}`.
    pub fn inverse_d1(&self, g: f64) -> f64 {
        let a = 1.0 / self.exponent;
        -a * self.inverse_scale() * g.powf(-a - 1.0)
    }

    /// Second derivative of `phi^{-1}`.
    pub fn inverse_d2(&self, g: f64) -> f64 {
        let a = 1.0 / self.exponent;
        a * (a + 1.0) * self.inverse_scale() * g.powf(-a - 2.0)
    }
}

/// Scenario scalars shared by generation, detection and the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub n_devices: usize,
    pub pilot_len: usize,
    pub n_antennas: usize,
    /// Noise power in mW.
    pub noise_power: f64,
    pub tx_power_dbm: f64,
    /// Inner annulus radius in meters.
    pub d_inner: f64,
    /// Outer annulus radius in meters.
    pub d_outer: f64,
    pub pathloss_exp: f64,
    /// Carrier wavelength in meters.
    pub wavelength: f64,
    pub activity: ActivityModel,
    pub seed: u64,
    /// Reuse one pilot matrix for every sample of a dataset.
    #[serde(default)]
    pub freeze_pilots: bool,
}

impl SystemConfig {
    /// The full-scale scenario: 1000 devices, L = 40, M = 256, 23 dBm,
    /// -114 dBm noise, 20-200 m annulus, eta = 2.5, lambda = 0.086 m, p = 0.05.
    pub fn reference() -> Self {
        Self {
            n_devices: 1000,
            pilot_len: 40,
            n_antennas: 256,
            noise_power: 10f64.powf(-11.4),
            tx_power_dbm: 23.0,
            d_inner: 20.0,
            d_outer: 200.0,
            pathloss_exp: 2.5,
            wavelength: 0.086,
            activity: ActivityModel::Iid { p: 0.05 },
            seed: 0,
            freeze_pilots: false,
        }
    }

    /// Desk-scale variant of [`SystemConfig::reference`].
    pub fn desk() -> Self {
        Self {
            n_devices: 200,
            pilot_len: 16,
            n_antennas: 64,
            ..Self::reference()
        }
    }

    pub fn law(&self) -> PathlossLaw {
        PathlossLaw {
            tx_power_dbm: self.tx_power_dbm,
            exponent: self.pathloss_exp,
            wavelength: self.wavelength,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pilot_len == 0 || self.pilot_len >= self.n_devices {
            return Err(Error::config(format!(
                "need 0 < L < N, got L = {}, N = {}",
                self.pilot_len, self.n_devices
            )));
        }
        if self.n_antennas == 0 {
            return Err(Error::config("need at least one antenna"));
        }
        let positive = [
            ("noise_power", self.noise_power),
            ("d_inner", self.d_inner),
            ("d_outer", self.d_outer),
            ("wavelength", self.wavelength),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.tx_power_dbm.is_finite() || !(self.pathloss_exp >= 0.0) {
            return Err(Error::config("transmit power and pathloss exponent must be finite, exponent >= 0"));
        }
        if self.d_inner >= self.d_outer {
            return Err(Error::config("d_inner must be smaller than d_outer"));
        }
        self.activity.validate(self.n_devices)
    }
}

/// Linear gain (transmit power folded in) at distance `d`.
pub fn pathloss_gain(d: f64, cfg: &SystemConfig) -> Result<f64> {
    cfg.law().gain(d)
}

/// One realization of the uplink pilot phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `L x N`, every column has norm `sqrt(L)`.
    pub pilots: CMat,
    /// Large-scale gains `g` (mW, transmit power included).
    pub gains: DVector<f64>,
    pub activities: Vec<bool>,
    /// `gamma_n = alpha_n g_n`.
    pub eff_pathloss: DVector<f64>,
    /// `L x M` received pilot signal.
    pub received: CMat,
    /// `(1/M) Y Y^H`.
    pub emp_cov: CMat,
    pub noise_power: f64,
}

impl Sample {
    pub fn n_devices(&self) -> usize {
        self.pilots.ncols()
    }

    pub fn pilot_len(&self) -> usize {
        self.pilots.nrows()
    }

    pub fn n_antennas(&self) -> usize {
        self.received.ncols()
    }

    pub fn activity_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.activities.len(),
            self.activities.iter().map(|&a| if a { 1.0 } else { 0.0 }),
        )
    }

    pub fn n_active(&self) -> usize {
        self.activities.iter().filter(|&&a| a).count()
    }

    /// The same scene observed by the first `m` antennas only.
    pub fn truncate_antennas(&self, m: usize) -> Result<Sample> {
        if m == 0 || m > self.n_antennas() {
            return Err(Error::domain(format!(
                "cannot keep {m} of {} antennas",
                self.n_antennas()
            )));
        }
        let received = self.received.columns(0, m).into_owned();
        let emp_cov = empirical_cov(&received, m)?;
        Ok(Sample {
            received,
            emp_cov,
            ..self.clone()
        })
    }
}

/// Deterministic generator for sample `index` of a dataset seeded with `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// I.i.d. standard complex Gaussian pilots, each column rescaled to norm `sqrt(L)`.
pub fn draw_pilots<R: Rng + ?Sized>(pilot_len: usize, n_devices: usize, rng: &mut R) -> CMat {
    let mut s = CMat::from_fn(pilot_len, n_devices, |_, _| complex_gaussian(rng, 1.0));
    let target = (pilot_len as f64).sqrt();
    for mut col in s.column_iter_mut() {
        let norm = col.norm();
        col *= Complex64::from(target / norm);
    }
    s
}

/// Distance with density `2d / (d_outer^2 - d_inner^2)` on the annulus, by
/// inverting the CDF.
fn draw_distance<R: Rng + ?Sized>(d_inner: f64, d_outer: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    (d_inner * d_inner + u * (d_outer * d_outer - d_inner * d_inner)).sqrt()
}

/// `(1/M) Y Y^H`, made exactly Hermitian.
pub fn empirical_cov(received: &CMat, m: usize) -> Result<CMat> {
    if m == 0 {
        return Err(Error::domain("empirical covariance needs M >= 1"));
    }
    let mut cov = received * received.adjoint();
    cov /= Complex64::from(m as f64);
    hermitize(&mut cov);
    Ok(cov)
}

/// Replace `a` by `(a + a^H) / 2`.
pub(crate) fn hermitize(a: &mut CMat) {
    let n = a.nrows();
    for j in 0..n {
        a[(j, j)].im = 0.0;
        for i in 0..j {
            let avg = (a[(i, j)] + a[(j, i)].conj()) * 0.5;
            a[(i, j)] = avg;
            a[(j, i)] = avg.conj();
        }
    }
}

/// Draw one scene. Uses `pilots` when given (frozen pilots), otherwise draws
/// fresh ones from `rng` first.
pub fn sample_scene_with<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    pilots: Option<&CMat>,
    rng: &mut R,
) -> Result<Sample> {
    cfg.validate()?;
    let (n, l, m) = (cfg.n_devices, cfg.pilot_len, cfg.n_antennas);
    let pilots = match pilots {
        Some(p) if p.shape() == (l, n) => p.clone(),
        Some(p) => {
            return Err(Error::shape(format!(
                "frozen pilots are {:?}, expected ({l}, {n})",
                p.shape()
            )))
        }
        None => draw_pilots(l, n, rng),
    };
    let law = cfg.law();
    let mut gains = DVector::zeros(n);
    for g in gains.iter_mut() {
        *g = law.gain(draw_distance(cfg.d_inner, cfg.d_outer, rng))?;
    }
    let activities = cfg.activity.draw(n, rng);
    let eff_pathloss = DVector::from_iterator(
        n,
        activities
            .iter()
            .zip(gains.iter())
            .map(|(&a, &g)| if a { g } else { 0.0 }),
    );
    let channels = CMat::from_fn(n, m, |_, _| complex_gaussian(rng, 1.0));
    let mut scaled = pilots.clone();
    for (mut col, &gamma) in scaled.column_iter_mut().zip(eff_pathloss.iter()) {
        col *= Complex64::from(gamma.sqrt());
    }
    let mut received = &scaled * &channels;
    for y in received.iter_mut() {
        *y += complex_gaussian(rng, cfg.noise_power);
    }
    let emp_cov = empirical_cov(&received, m)?;
    Ok(Sample {
        pilots,
        gains,
        activities,
        eff_pathloss,
        received,
        emp_cov,
        noise_power: cfg.noise_power,
    })
}

/// Draw one scene with fresh pilots.
pub fn sample_scene<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Result<Sample> {
    sample_scene_with(cfg, None, rng)
}

/// Samples `range` of the dataset defined by `(cfg, seed)`. Sample `i` is the
/// same regardless of which range it is requested in.
pub fn generate_dataset(
    cfg: &SystemConfig,
    seed: u64,
    range: std::ops::Range<u64>,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let frozen = cfg.freeze_pilots.then(|| {
        let mut rng = scene_rng(seed, FROZEN_PILOT_STREAM);
        draw_pilots(cfg.pilot_len, cfg.n_devices, &mut rng)
    });
    range
        .map(|i| {
            let mut rng = scene_rng(seed, i);
            sample_scene_with(cfg, frozen.as_ref(), &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SystemConfig {
        SystemConfig {
            n_devices: 40,
            pilot_len: 8,
            n_antennas: 16,
            ..SystemConfig::reference()
        }
    }

    #[test]
    fn pathloss_at_twenty_meters() {
        let law = SystemConfig::reference().law();
        // 40-digit evaluation of the dB law at d = 20 m.
        let expected_db = 86.643_535_211_062_742_96;
        let expected_raw = 2.165_940_284_718_321_4e-9;
        assert!((law.pathloss_db(20.0) - 86.645).abs() < 2e-3);
        assert!((law.pathloss_db(20.0) - expected_db).abs() < 1e-12);
        let raw = law.raw_gain(20.0).unwrap();
        assert!((raw - expected_raw).abs() / expected_raw < 1e-13, "raw = {raw:e}");
    }

    #[test]
    fn zero_exponent_is_unit_gain() {
        let law = PathlossLaw { tx_power_dbm: 0.0, exponent: 0.0, wavelength: 0.086 };
        for d in [1.0, 20.0, 137.0, 1e4] {
            assert_eq!(law.raw_gain(d).unwrap(), 1.0);
        }
    }

    #[test]
    fn doubling_distance_scales_by_two_to_minus_eta() {
        let law = SystemConfig::reference().law();
        for d in [20.0, 55.0, 100.0] {
            let ratio = law.gain(2.0 * d).unwrap() / law.gain(d).unwrap();
            assert!((ratio - 2f64.powf(-2.5)).abs() < 1e-12);
            assert!((ratio - 0.17678).abs() < 1e-5);
        }
    }

    #[test]
    fn nonpositive_distance_rejected() {
        let cfg = SystemConfig::reference();
        assert!(matches!(pathloss_gain(0.0, &cfg), Err(Error::Domain(_))));
        assert!(matches!(pathloss_gain(-3.0, &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn inverse_law_round_trips() {
        let law = SystemConfig::reference().law();
        for d in [20.0, 73.5, 200.0] {
            let g = law.gain(d).unwrap();
            assert!((law.inverse(g) - d).abs() < 1e-9 * d);
        }
    }

    #[test]
    fn silent_noiseless_scene_is_zero() {
        let cfg = SystemConfig {
            noise_power: 1e-300,
            activity: ActivityModel::Iid { p: 1e-12 },
            ..small_cfg()
        };
        let mut rng = scene_rng(3, 0);
        let s = sample_scene(&cfg, &mut rng).unwrap();
        assert_eq!(s.n_active(), 0);
        assert!(s.received.iter().all(|y| y.norm() < 1e-140));
        assert!(s.emp_cov.iter().all(|c| c.norm() < 1e-280));
    }

    #[test]
    fn pilot_columns_have_norm_sqrt_l() {
        let mut rng = scene_rng(1, 0);
        let s = sample_scene(&small_cfg(), &mut rng).unwrap();
        for col in s.pilots.column_iter() {
            assert!((col.norm() - 8f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn scene_invariants_hold() {
        let mut rng = scene_rng(5, 2);
        let s = sample_scene(&small_cfg(), &mut rng).unwrap();
        for n in 0..s.n_devices() {
            let a = if s.activities[n] { 1.0 } else { 0.0 };
            assert_eq!(s.eff_pathloss[n], a * s.gains[n]);
        }
        let diff = (&s.emp_cov - s.emp_cov.adjoint()).norm();
        assert_eq!(diff, 0.0);
        let eig = s.emp_cov.clone().symmetric_eigenvalues();
        let scale = s.emp_cov.norm();
        assert!(eig.iter().all(|&e| e >= -1e-12 * scale));
    }

    #[test]
    fn mean_active_count_matches_binomial() {
        let cfg = SystemConfig {
            n_devices: 1000,
            pilot_len: 2,
            n_antennas: 1,
            ..SystemConfig::reference()
        };
        let mut total = 0usize;
        for i in 0..2000 {
            let mut rng = scene_rng(11, i);
            total += cfg.activity.draw(cfg.n_devices, &mut rng).iter().filter(|&&a| a).count();
        }
        let mean = total as f64 / 2000.0;
        assert!((47.0..=53.0).contains(&mean), "mean active count {mean}");
    }

    #[test]
    fn group_activity_switches_whole_groups() {
        let model = ActivityModel::Group { group_size: 4, p_group: 0.3 };
        let mut rng = scene_rng(2, 0);
        let a = model.draw(40, &mut rng);
        for chunk in a.chunks(4) {
            assert!(chunk.iter().all(|&x| x == chunk[0]));
        }
        assert!(model.validate(42).is_err());
    }

    #[test]
    fn empirical_cov_edge_cases() {
        let y = CMat::zeros(4, 3);
        assert_eq!(empirical_cov(&y, 3).unwrap(), CMat::zeros(4, 4));
        assert!(empirical_cov(&y, 0).is_err());

        let col = CMat::from_fn(3, 1, |i, _| Complex64::new(i as f64 + 1.0, 0.5 - i as f64));
        let cov = empirical_cov(&col, 1).unwrap();
        let outer = &col * col.adjoint();
        assert!((&cov - &outer).norm() < 1e-15);
        let rank = cov.clone().symmetric_eigenvalues().iter().filter(|e| e.abs() > 1e-10).count();
        assert_eq!(rank, 1);
    }

    #[test]
    fn random_empirical_cov_is_hermitian_psd() {
        let mut rng = scene_rng(9, 9);
        let y = CMat::from_fn(6, 5, |_, _| complex_gaussian(&mut rng, 1.0));
        let cov = empirical_cov(&y, 5).unwrap();
        assert!((&cov - cov.adjoint()).norm() < 1e-12);
        assert!(cov.symmetric_eigenvalues().iter().all(|&e| e >= -1e-12));
    }

    #[test]
    fn seeded_generation_is_bit_identical() {
        let cfg = small_cfg();
        let a = generate_dataset(&cfg, 77, 0..3).unwrap();
        let b = generate_dataset(&cfg, 77, 1..3).unwrap();
        assert_eq!(a[1], b[0]);
        assert_eq!(a[2], b[1]);
        let c = generate_dataset(&cfg, 78, 0..1).unwrap();
        assert_ne!(a[0], c[0]);
    }

    #[test]
    fn frozen_pilots_are_shared() {
        let cfg = SystemConfig { freeze_pilots: true, ..small_cfg() };
        let d = generate_dataset(&cfg, 4, 0..3).unwrap();
        assert_eq!(d[0].pilots, d[1].pilots);
        assert_eq!(d[1].pilots, d[2].pilots);
        assert_ne!(d[0].gains, d[1].gains);
    }

    #[test]
    fn truncation_keeps_scene() {
        let mut rng = scene_rng(6, 1);
        let s = sample_scene(&small_cfg(), &mut rng).unwrap();
        let t = s.truncate_antennas(8).unwrap();
        assert_eq!(t.n_antennas(), 8);
        assert_eq!(t.eff_pathloss, s.eff_pathloss);
        assert!(s.truncate_antennas(17).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small_cfg();
        c.pilot_len = 40;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.d_inner = 300.0;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.noise_power = 0.0;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.activity = ActivityModel::Iid { p: 1.0 };
        assert!(c.validate().is_err());
    }
}
