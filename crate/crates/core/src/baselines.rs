//! Reference detectors: sequential block coordinate descent (BCD) with
//! rank-one inverse updates, and parallel projected gradient (PG) with a
//! nonmonotone line search.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::covlinalg::{woodbury_rank1_in_place, CovState, SplitPilots};
use crate::error::{Error, Result};
use crate::estimators::{check_sample, gradient, objective, DetectorTrace, ProblemKind, RunOptions};
use crate::priors::{log_prior_grad_known, ActivityPrior};
use crate::sysmodel::{CMat, Sample};

/// Exact ML coordinate step for a known-pathloss coordinate: the minimizer
/// over `delta` of `log(1 + delta g q) - delta g r / (1 + delta g q)`,
/// clamped so that `alpha + delta` stays in `[0, 1]`.
pub fn ml_coordinate_step_known(alpha: f64, g: f64, q: f64, r: f64) -> f64 {
    ((r - q) / (g * q * q)).clamp(-alpha, 1.0 - alpha)
}

/// Unknown-pathloss analogue: `gamma + delta >= 0`.
pub fn ml_coordinate_step_unknown(gamma: f64, q: f64, r: f64) -> f64 {
    ((r - q) / (q * q)).max(-gamma)
}

/// Exact coordinate objective along `alpha_n`, up to a constant:
/// `log(1 + delta g q) - delta g r / (1 + delta g q) + c delta`.
pub fn map_coordinate_objective(delta: f64, g: f64, q: f64, r: f64, c: f64) -> f64 {
    let y = 1.0 + delta * g * q;
    y.ln() - delta * g * r / y + c * delta
}

/// Which branch of the MAP coordinate rule applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapCase {
    /// The prior favors inactivity (or is neutral): unimodal, closed form.
    Unimodal,
    /// Mild pull toward activity: compare the stationary point with both ends.
    Compare,
    /// Strong pull toward activity: the coordinate derivative is negative everywhere.
    Saturate,
}

/// MAP coordinate step for the known-pathloss problem with linear prior
/// slope `c = d f_t / d alpha_n`. Returns `(delta, case)`.
///
/// Stationary points solve `c y^2 + g q y - g r = 0` in `y = 1 + delta g q`;
/// the relevant root is `y = 2 g r / (g q + sqrt(g^2 q^2 + 4 c g r))`.
pub fn map_coordinate_step(alpha: f64, g: f64, q: f64, r: f64, c: f64) -> (f64, MapCase) {
    let gq = g * q;
    let gr = g * r;
    let (lo, hi) = (-alpha, 1.0 - alpha);
    let disc = gq * gq + 4.0 * c * gr;
    let pull = -c;
    let case = if pull <= 0.0 {
        MapCase::Unimodal
    } else if pull <= g * q * q / (4.0 * r) {
        MapCase::Compare
    } else {
        MapCase::Saturate
    };
    match case {
        MapCase::Saturate => (hi, case),
        _ => {
            assert!(disc >= 0.0, "negative discriminant {disc} in MAP coordinate step");
            let y = 2.0 * gr / (gq + disc.sqrt());
            let root = ((y - 1.0) / gq).clamp(lo, hi);
            if case == MapCase::Unimodal {
                return (root, case);
            }
            let mut best = (root, map_coordinate_objective(root, g, q, r, c));
            for cand in [lo, hi] {
                let v = map_coordinate_objective(cand, g, q, r, c);
                if v < best.1 {
                    best = (cand, v);
                }
            }
            (best.0, case)
        }
    }
}

enum BcdRule<'a> {
    MlKnown,
    MlUnknown,
    MapKnown(&'a ActivityPrior),
}

fn bcd(sample: &Sample, rule: BcdRule<'_>, opts: &RunOptions, method: &str) -> Result<DetectorTrace> {
    check_sample(sample)?;
    let n = sample.n_devices();
    let l = sample.pilot_len();
    let m = sample.n_antennas();
    let kind = match rule {
        BcdRule::MlKnown => ProblemKind::MlK,
        BcdRule::MlUnknown => ProblemKind::MlUd,
        BcdRule::MapKnown(prior) => {
            prior.validate()?;
            if prior.n_devices() != n {
                return Err(Error::shape("prior and scene sizes differ"));
            }
            ProblemKind::MapK { prior: prior.clone() }
        }
    };
    let known = kind.known();
    let mut trace = DetectorTrace::new(method, n);
    let mut x = DVector::<f64>::zeros(n);
    let mut inv = CMat::identity(l, l) / num_complex::Complex64::from(sample.noise_power);
    if opts.record_objective {
        trace.initial_objective = Some(objective(&kind, &x, sample)?);
    }
    let mut u = DVector::zeros(l);
    let mut v = DVector::zeros(l);
    let one = num_complex::Complex64::from(1.0);
    let zero = num_complex::Complex64::from(0.0);
    for sweep in 0..opts.max_iter {
        let start = Instant::now();
        let prev = x.clone();
        let mut prior_slope = match rule {
            BcdRule::MapKnown(prior) => Some(log_prior_grad_known(&x, prior, m)?),
            _ => None,
        };
        for j in 0..n {
            let s = sample.pilots.column(j);
            u.gemv(one, &inv, &s, zero);
            v.gemv(one, &sample.emp_cov, &u, zero);
            let q = s.dotc(&u).re;
            let r = u.dotc(&v).re;
            let delta = match rule {
                BcdRule::MlKnown => ml_coordinate_step_known(x[j], sample.gains[j], q, r),
                BcdRule::MlUnknown => ml_coordinate_step_unknown(x[j], q, r),
                BcdRule::MapKnown(prior) => {
                    let c = match prior {
                        ActivityPrior::Independent(_) => prior_slope.as_ref().map_or(0.0, |s| s[j]),
                        ActivityPrior::Pairwise(_) => {
                            // The slope depends on the neighbours, which may have moved.
                            prior_slope = Some(log_prior_grad_known(&x, prior, m)?);
                            prior_slope.as_ref().map_or(0.0, |s| s[j])
                        }
                    };
                    map_coordinate_step(x[j], sample.gains[j], q, r, c).0
                }
            };
            if delta == 0.0 {
                continue;
            }
            let weight_delta = if known { delta * sample.gains[j] } else { delta };
            if let Err(e) = woodbury_rank1_in_place(&mut inv, &u, q, weight_delta) {
                trace.final_estimate = x;
                return Err(Error::Aborted { iteration: sweep, reason: Box::new(e), trace: Box::new(trace) });
            }
            x[j] = if known { (x[j] + delta).clamp(0.0, 1.0) } else { (x[j] + delta).max(0.0) };
        }
        let elapsed = start.elapsed().as_secs_f64();
        let diff = (&x - &prev).norm();
        trace.update_norm.push(diff);
        trace.wall_times.push(elapsed);
        if opts.record_iterates {
            trace.iterates.push(x.clone());
        }
        if opts.record_objective {
            trace.objective.push(objective(&kind, &x, sample)?);
        }
        let scale = if known { 1.0 } else { x.norm() };
        if diff < opts.tol * scale {
            trace.converged = true;
            break;
        }
    }
    trace.final_estimate = x;
    Ok(trace)
}

/// BCD for the ML problems; `known` selects alpha in `[0,1]` versus gamma >= 0.
pub fn bcd_ml(sample: &Sample, known: bool, opts: &RunOptions) -> Result<DetectorTrace> {
    if known {
        bcd(sample, BcdRule::MlKnown, opts, "bcd-ml-k")
    } else {
        bcd(sample, BcdRule::MlUnknown, opts, "bcd-ml-ud")
    }
}

/// BCD for the known-pathloss MAP problem.
pub fn bcd_map_k(sample: &Sample, prior: &ActivityPrior, opts: &RunOptions) -> Result<DetectorTrace> {
    bcd(sample, BcdRule::MapKnown(prior), opts, "bcd-map-k")
}

/// Step-size rule of the projected gradient method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StepMode {
    Fixed { step: f64 },
    /// Grippo-style nonmonotone Armijo search with a Barzilai-Borwein trial step.
    Nonmonotone { window: usize },
}

impl Default for StepMode {
    fn default() -> Self {
        StepMode::Nonmonotone { window: LINE_SEARCH_WINDOW }
    }
}

pub const LINE_SEARCH_WINDOW: usize = 10;
const SUFFICIENT_DECREASE: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 30;
const STEP_MIN: f64 = 1e-12;
const STEP_MAX: f64 = 1e12;

/// Projected gradient for the ML problems.
///
/// The unknown-pathloss problem is solved in noise-normalized coordinates
/// `z = gamma / sigma^2` so that step sizes and their clipping range are
/// scale-free; iterates are reported in gamma units.
pub fn pg_ml(sample: &Sample, known: bool, opts: &RunOptions, mode: StepMode) -> Result<DetectorTrace> {
    check_sample(sample)?;
    let n = sample.n_devices();
    let m = sample.n_antennas();
    let kind = if known { ProblemKind::MlK } else { ProblemKind::MlUd };
    let scale = if known { 1.0 } else { sample.noise_power };
    let hi = if known { 1.0 } else { f64::INFINITY };
    let project = |z: &DVector<f64>| z.map(|v| v.clamp(0.0, hi));
    let mut trace = DetectorTrace::new(if known { "pg-ml-k" } else { "pg-ml-ud" }, n);

    // Objective and gradient in the working coordinates.
    let split = SplitPilots::new(&sample.pilots);
    let eval = |z: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let x = z * scale;
        let state = CovState::from_split(&split, &kind.weights(&x, &sample.gains), sample.noise_power, &sample.emp_cov)?;
        let f = crate::estimators::objective_at(&kind, &x, sample, &state)?;
        let g = gradient(&kind, &x, &state, &sample.gains, m)? * scale;
        Ok((f, g))
    };
    let fail = |k: usize, e: Error, mut trace: DetectorTrace, z: &DVector<f64>| -> Error {
        trace.final_estimate = z * scale;
        Error::Aborted { iteration: k, reason: Box::new(e), trace: Box::new(trace) }
    };

    let mut z = DVector::<f64>::zeros(n);
    let (mut f, mut g) = eval(&z)?;
    if opts.record_objective {
        trace.initial_objective = Some(f);
    }
    let mut history: VecDeque<f64> = VecDeque::from([f]);
    let window = match mode {
        StepMode::Nonmonotone { window } => window.max(1),
        StepMode::Fixed { .. } => 1,
    };
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut last_good = (1.0 / g.amax().max(1e-300)).clamp(STEP_MIN, STEP_MAX);
    for k in 0..opts.max_iter {
        let start = Instant::now();
        let (next, f_next, g_next) = match mode {
            StepMode::Fixed { step } => {
                let cand = project(&(&z - &g * step));
                match eval(&cand) {
                    Ok((fc, gc)) => (cand, fc, gc),
                    Err(e) => return Err(fail(k, e, trace, &z)),
                }
            }
            StepMode::Nonmonotone { .. } => {
                let mut d = match &prev {
                    Some((dz, dg)) => {
                        let sy = dz.dot(dg);
                        if sy > 0.0 { dz.dot(dz) / sy } else { STEP_MAX }
                    }
                    None => last_good,
                }
                .clamp(STEP_MIN, STEP_MAX);
                let reference = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut accepted = None;
                for _ in 0..=MAX_BACKTRACKS {
                    let cand = project(&(&z - &g * d));
                    if let Ok((fc, gc)) = eval(&cand) {
                        if fc <= reference + SUFFICIENT_DECREASE * g.dot(&(&cand - &z)) {
                            accepted = Some((cand, fc, gc));
                            break;
                        }
                    }
                    d *= BACKTRACK;
                }
                match accepted {
                    Some(v) => {
                        last_good = d;
                        v
                    }
                    None => {
                        trace.flags.push(format!("iteration {}: line search failed, keeping the last iterate", k + 1));
                        (z.clone(), f, g.clone())
                    }
                }
            }
        };
        let elapsed = start.elapsed().as_secs_f64();
        let diff = (&next - &z).norm() * scale;
        prev = Some((&next - &z, &g_next - &g));
        z = next;
        f = f_next;
        g = g_next;
        history.push_back(f);
        while history.len() > window {
            history.pop_front();
        }
        trace.update_norm.push(diff);
        trace.wall_times.push(elapsed);
        if opts.record_iterates {
            trace.iterates.push(&z * scale);
        }
        if opts.record_objective {
            trace.objective.push(f);
        }
        let tol_scale = if known { 1.0 } else { z.norm() * scale };
        if diff < opts.tol * tol_scale {
            trace.converged = true;
            break;
        }
    }
    trace.final_estimate = z * scale;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covlinalg::frobenius_inverse;
    use crate::estimators::{coord_solution, psca_run, surrogate_coef, StepSchedule};
    use crate::priors::IndependentPrior;
    use crate::sysmodel::{generate_dataset, SystemConfig};
    use num_complex::Complex64;

    fn cfg() -> SystemConfig {
        SystemConfig { n_devices: 40, pilot_len: 8, n_antennas: 32, ..SystemConfig::desk() }
    }

    #[test]
    fn silent_scene_clamps_everything_to_zero() {
        let mut s = generate_dataset(&cfg(), 1, 0..1).unwrap().remove(0);
        s.emp_cov = CMat::zeros(8, 8);
        let t = bcd_ml(&s, true, &RunOptions::fixed(1)).unwrap();
        assert_eq!(t.final_estimate, DVector::zeros(40));
    }

    #[test]
    fn bcd_inverse_drift_after_sweep() {
        let s = generate_dataset(&cfg(), 2, 0..1).unwrap().remove(0);
        let t = bcd_ml(&s, true, &RunOptions::fixed(1)).unwrap();
        // Replay the sweep, keeping the running inverse.
        let mut inv = CMat::identity(8, 8) / Complex64::from(s.noise_power);
        let mut x = DVector::<f64>::zeros(40);
        for j in 0..40 {
            let col = s.pilots.column(j).into_owned();
            let u = &inv * &col;
            let q = col.dotc(&u).re;
            let r = u.dotc(&(&s.emp_cov * &u)).re;
            let d = ml_coordinate_step_known(x[j], s.gains[j], q, r);
            woodbury_rank1_in_place(&mut inv, &u, q, d * s.gains[j]).unwrap();
            x[j] += d;
        }
        assert_eq!(x, t.final_estimate);
        let fresh = frobenius_inverse(&crate::covlinalg::cov_known(&s.pilots, &x, &s.gains, s.noise_power).unwrap()).unwrap();
        assert!((&inv - &fresh).norm() / fresh.norm() < 1e-6);
    }

    #[test]
    fn bcd_step_matches_psca_candidate() {
        let s = generate_dataset(&cfg(), 3, 0..1).unwrap().remove(0);
        let x = DVector::from_fn(40, |n, _| (n as f64 * 0.37).fract());
        let kind = ProblemKind::MlK;
        let state = CovState::new(&s.pilots, &kind.weights(&x, &s.gains), s.noise_power, &s.emp_cov).unwrap();
        let grad = gradient(&kind, &x, &state, &s.gains, 32).unwrap();
        let cand = coord_solution(&kind, &x, &grad, &surrogate_coef(&kind, &state, &s.gains));
        for n in 0..40 {
            let d = ml_coordinate_step_known(x[n], s.gains[n], state.q[n], state.r[n]);
            assert!((x[n] + d - cand[n]).abs() <= 1e-12);
        }
    }

    #[test]
    fn map_step_cases() {
        let (g, q, r) = (2.0, 3.0, 4.5);
        let ml = ml_coordinate_step_known(0.2, g, q, r);
        let (d, case) = map_coordinate_step(0.2, g, q, r, 1e-9);
        assert_eq!(case, MapCase::Unimodal);
        assert!((d - ml).abs() < 1e-8);
        let (d, case) = map_coordinate_step(0.2, g, q, r, -1e6);
        assert_eq!((d, case), (0.8, MapCase::Saturate));
        let (_, case) = map_coordinate_step(0.2, g, q, r, -0.5 * g * q * q / (4.0 * r));
        assert_eq!(case, MapCase::Compare);
    }

    #[test]
    fn bcd_map_with_neutral_prior_is_ml() {
        let s = generate_dataset(&cfg(), 4, 0..1).unwrap().remove(0);
        let prior = ActivityPrior::Independent(IndependentPrior::uniform(40, 0.5));
        let a = bcd_ml(&s, true, &RunOptions::fixed(3)).unwrap();
        let b = bcd_map_k(&s, &prior, &RunOptions::fixed(3)).unwrap();
        let gap = (a.final_estimate - b.final_estimate).amax();
        assert!(gap < 1e-10, "gap {gap}");
    }

    #[test]
    fn pg_zero_gradient_is_fixed_point() {
        // A scene whose empirical covariance is the noise floor has its ML
        // optimum at zero with a positive gradient; projection keeps zero.
        let mut s = generate_dataset(&cfg(), 5, 0..1).unwrap().remove(0);
        s.emp_cov = CMat::identity(8, 8) * Complex64::from(s.noise_power);
        let t = pg_ml(&s, true, &RunOptions::fixed(3), StepMode::default()).unwrap();
        assert_eq!(t.final_estimate, DVector::zeros(40));
    }

    #[test]
    fn pg_fixed_small_step_is_monotone() {
        let s = generate_dataset(&cfg(), 6, 0..1).unwrap().remove(0);
        let state = CovState::new(&s.pilots, &DVector::zeros(40), s.noise_power, &s.emp_cov).unwrap();
        let g0 = gradient(&ProblemKind::MlK, &DVector::zeros(40), &state, &s.gains, 32).unwrap();
        let step = 1e-3 / g0.amax();
        let t = pg_ml(&s, true, &RunOptions::fixed(20).recording(), StepMode::Fixed { step }).unwrap();
        let mut last = t.initial_objective.unwrap();
        for &f in &t.objective {
            assert!(f <= last + 1e-12 * last.abs());
            last = f;
        }
    }

    #[test]
    fn baselines_stay_in_box() {
        let s = generate_dataset(&cfg(), 7, 0..1).unwrap().remove(0);
        let opts = RunOptions::fixed(5).recording();
        for t in [
            bcd_ml(&s, true, &opts).unwrap(),
            pg_ml(&s, true, &opts, StepMode::default()).unwrap(),
        ] {
            assert!(t.iterates.iter().all(|it| it.iter().all(|&v| (0.0..=1.0).contains(&v))));
        }
        for t in [bcd_ml(&s, false, &opts).unwrap(), pg_ml(&s, false, &opts, StepMode::default()).unwrap()] {
            assert!(t.iterates.iter().all(|it| it.iter().all(|&v| v >= 0.0)));
        }
        let p = psca_run(&ProblemKind::MlK, &s, &StepSchedule::Diminishing, &opts).unwrap();
        assert!(p.final_estimate.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
