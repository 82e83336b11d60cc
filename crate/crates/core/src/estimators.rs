//! The parallel successive convex approximation (PSCA) detectors.
//!
//! Every iteration rebuilds the covariance at the current iterate, inverts
//! it, evaluates the quadratic forms `q` and `r`, and moves all coordinates
//! at once toward the minimizers of a separable quadratic surrogate:
//!
//! ```text
//! x~_n    = clamp(x_n - grad_n / coef_n, lo_n, hi_n)
//! x^(k+1) = (1 - rho_k) x^(k) + rho_k x~
//! ```
//!
//! Known-pathloss problems estimate `alpha in [0,1]^N`; unknown-pathloss
//! problems estimate `gamma >= 0`.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::covlinalg::{eval_objective, CovState, SplitPilots};
use crate::error::{Error, Result};
use crate::priors::{
    log_prior_grad_known, log_prior_grad_unknown, log_prior_penalty_known, log_prior_penalty_unknown,
    ActivityPrior, EffPathlossPrior,
};
use crate::sysmodel::Sample;

/// The four estimation problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemKind {
    MlK,
    MapK { prior: ActivityPrior },
    MlUd,
    MapUr { prior: EffPathlossPrior },
}

impl ProblemKind {
    /// True for the known-pathloss problems, which estimate `alpha`.
    pub fn known(&self) -> bool {
        matches!(self, ProblemKind::MlK | ProblemKind::MapK { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProblemKind::MlK => "ml-k",
            ProblemKind::MapK { .. } => "map-k",
            ProblemKind::MlUd => "ml-ud",
            ProblemKind::MapUr { .. } => "map-ur",
        }
    }

    /// Box `(lo, hi)` for coordinate `n`.
    pub fn bounds(&self, n: usize) -> (f64, f64) {
        let _ = n;
        match self {
            ProblemKind::MlK | ProblemKind::MapK { .. } => (0.0, 1.0),
            ProblemKind::MlUd => (0.0, f64::INFINITY),
            ProblemKind::MapUr { prior } => (0.0, prior.g_high()),
        }
    }

    /// Covariance weights: `alpha g` for known pathloss, `gamma` otherwise.
    pub fn weights(&self, x: &DVector<f64>, gains: &DVector<f64>) -> DVector<f64> {
        if self.known() {
            x.component_mul(gains)
        } else {
            x.clone()
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            ProblemKind::MapK { prior } => {
                prior.validate()?;
                if prior.n_devices() != n {
                    return Err(Error::shape(format!("prior covers {} devices, scene has {n}", prior.n_devices())));
                }
            }
            ProblemKind::MapUr { prior } => {
                prior.validate()?;
                if prior.p.len() != n {
                    return Err(Error::shape(format!("prior covers {} devices, scene has {n}", prior.p.len())));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Step sizes `rho_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", content = "steps", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `rho_0 = 0.5`, `rho_{k+1} = rho_k (1 - 0.5 rho_k)`.
    Diminishing,
    /// One step per iteration; the last entry repeats past the end.
    Explicit(Vec<f64>),
}

impl StepSchedule {
    pub fn rho(&self, k: usize) -> f64 {
        match self {
            StepSchedule::Diminishing => default_schedule(k),
            StepSchedule::Explicit(steps) => steps[k.min(steps.len() - 1)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let StepSchedule::Explicit(steps) = self {
            if steps.is_empty() {
                return Err(Error::config("explicit step schedule is empty"));
            }
            if let Some(s) = steps.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
                return Err(Error::config(format!("step size {s} not in (0,1]")));
            }
        }
        Ok(())
    }
}

/// `rho_k` of the default diminishing schedule.
pub fn default_schedule(k: usize) -> f64 {
    let mut rho = 0.5;
    for _ in 0..k {
        rho *= 1.0 - 0.5 * rho;
    }
    rho
}

/// First `k` steps of the default schedule.
pub fn default_steps(k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k);
    let mut rho = 0.5;
    for _ in 0..k {
        out.push(rho);
        rho *= 1.0 - 0.5 * rho;
    }
    out
}

/// Stopping and recording options shared by all detectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOptions {
    pub max_iter: usize,
    /// Known pathloss: stop when `||x^(k) - x^(k-1)|| < tol`. Unknown
    /// pathloss: stop when the change is below `tol ||gamma^(k)||`.
    pub tol: f64,
    pub record_iterates: bool,
    /// Evaluate the objective after every iteration (outside the timed region).
    pub record_objective: bool,
}

impl RunOptions {
    pub fn new(max_iter: usize, tol: f64) -> Self {
        Self { max_iter, tol, record_iterates: false, record_objective: false }
    }

    pub fn fixed(max_iter: usize) -> Self {
        Self::new(max_iter, 0.0)
    }

    pub fn recording(mut self) -> Self {
        self.record_iterates = true;
        self.record_objective = true;
        self
    }
}

/// Per-iteration record of one detector run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DetectorTrace {
    pub method: String,
    /// Objective at the starting point, when recorded.
    pub initial_objective: Option<f64>,
    /// `x^(1), x^(2), ...` when recorded.
    pub iterates: Vec<DVector<f64>>,
    pub objective: Vec<f64>,
    pub update_norm: Vec<f64>,
    pub wall_times: Vec<f64>,
    pub rho: Vec<f64>,
    pub final_estimate: DVector<f64>,
    pub converged: bool,
    /// Diagnostics such as line-search fallbacks.
    pub flags: Vec<String>,
    /// Dead-zone gradient magnitude used by the unknown-pathloss MAP penalty.
    pub dead_zone_gradient: Option<f64>,
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    method: &'a str,
    iter: usize,
    objective: Option<f64>,
    update_norm: f64,
    wall_time_s: f64,
    rho: Option<f64>,
}

impl DetectorTrace {
    pub fn new(method: impl Into<String>, n: usize) -> Self {
        Self { method: method.into(), final_estimate: DVector::zeros(n), ..Default::default() }
    }

    pub fn iterations(&self) -> usize {
        self.update_norm.len()
    }

    pub fn total_time(&self) -> f64 {
        self.wall_times.iter().sum()
    }

    /// One JSON object per iteration.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for k in 0..self.iterations() {
            let rec = TraceRecord {
                method: &self.method,
                iter: k + 1,
                objective: self.objective.get(k).copied(),
                update_norm: self.update_norm[k],
                wall_time_s: self.wall_times[k],
                rho: self.rho.get(k).copied(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Objective of `kind` at `x`: `log|Sigma| + tr(Sigma^{-1} Sigma_Y)` plus the
/// prior penalty for MAP problems.
pub fn objective(kind: &ProblemKind, x: &DVector<f64>, sample: &Sample) -> Result<f64> {
    let state = CovState::new(&sample.pilots, &kind.weights(x, &sample.gains), sample.noise_power, &sample.emp_cov)?;
    objective_at(kind, x, sample, &state)
}

pub(crate) fn objective_at(kind: &ProblemKind, x: &DVector<f64>, sample: &Sample, state: &CovState) -> Result<f64> {
    let base = eval_objective(&state.sigma, &state.sigma_inv, &sample.emp_cov)?;
    let m = sample.n_antennas();
    Ok(base
        + match kind {
            ProblemKind::MapK { prior } => log_prior_penalty_known(x, prior, m)?,
            ProblemKind::MapUr { prior } => log_prior_penalty_unknown(x, prior, m)?,
            _ => 0.0,
        })
}

/// Gradient of the objective at `x`, given the state built from `x`.
pub fn gradient(kind: &ProblemKind, x: &DVector<f64>, state: &CovState, gains: &DVector<f64>, m: usize) -> Result<DVector<f64>> {
    let ml = &state.q - &state.r;
    Ok(match kind {
        ProblemKind::MlK => ml.component_mul(gains),
        ProblemKind::MapK { prior } => ml.component_mul(gains) + log_prior_grad_known(x, prior, m)?,
        ProblemKind::MlUd => ml,
        ProblemKind::MapUr { prior } => ml + log_prior_grad_unknown(x, prior, m)?,
    })
}

/// Quadratic surrogate weight: `(g_n q_n)^2` for known pathloss, `q_n^2` otherwise.
pub fn surrogate_coef(kind: &ProblemKind, state: &CovState, gains: &DVector<f64>) -> DVector<f64> {
    if kind.known() {
        state.q.component_mul(gains).map(|v| v * v)
    } else {
        state.q.map(|v| v * v)
    }
}

/// Lower bound `q_n >= L / lambda_max(Sigma) >= L / tr(Sigma)`; a violation
/// means the quadratic forms have underflowed.
fn check_curvature(state: &CovState, pilot_len: usize) -> Result<()> {
    let trace: f64 = state.sigma.diagonal().iter().map(|z| z.re).sum();
    let bound = pilot_len as f64 / trace * (1.0 - 1e-6);
    if let Some((device, &q)) = state.q.iter().enumerate().find(|(_, q)| !(**q >= bound)) {
        return Err(Error::DegenerateCurvature { device, q, bound });
    }
    Ok(())
}

/// Minimizers of the separable surrogate over the box.
pub fn coord_solution(kind: &ProblemKind, x: &DVector<f64>, grad: &DVector<f64>, coef: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |n, _| {
        let (lo, hi) = kind.bounds(n);
        (x[n] - grad[n] / coef[n]).clamp(lo, hi)
    })
}

/// `x - clamp(x - grad, lo, hi)`, the stationarity residual of the box problem.
pub fn projected_gradient_residual(kind: &ProblemKind, x: &DVector<f64>, grad: &DVector<f64>) -> f64 {
    (0..x.len())
        .map(|n| {
            let (lo, hi) = kind.bounds(n);
            (x[n] - (x[n] - grad[n]).clamp(lo, hi)).abs()
        })
        .fold(0.0, f64::max)
}

/// Stationarity residual at `x`. Unknown-pathloss problems are measured in
/// noise-normalized units `z = gamma / sigma^2`, where the gradient is
/// `sigma^2 grad_gamma`.
pub fn stationarity_residual(kind: &ProblemKind, x: &DVector<f64>, sample: &Sample) -> Result<f64> {
    let state = CovState::new(&sample.pilots, &kind.weights(x, &sample.gains), sample.noise_power, &sample.emp_cov)?;
    let grad = gradient(kind, x, &state, &sample.gains, sample.n_antennas())?;
    if kind.known() {
        return Ok(projected_gradient_residual(kind, x, &grad));
    }
    let s2 = sample.noise_power;
    let z = x / s2;
    let gz = grad * s2;
    let scaled = match kind {
        ProblemKind::MapUr { prior } => {
            let hi = prior.g_high() / s2;
            (0..z.len()).map(|n| (z[n] - (z[n] - gz[n]).clamp(0.0, hi)).abs()).fold(0.0, f64::max)
        }
        _ => (0..z.len()).map(|n| (z[n] - (z[n] - gz[n]).max(0.0)).abs()).fold(0.0, f64::max),
    };
    Ok(scaled)
}

fn abort(iteration: usize, reason: Error, trace: DetectorTrace) -> Error {
    Error::Aborted { iteration, reason: Box::new(reason), trace: Box::new(trace) }
}

pub(crate) fn check_sample(sample: &Sample) -> Result<()> {
    let (l, n) = sample.pilots.shape();
    if sample.gains.len() != n || sample.emp_cov.shape() != (l, l) {
        return Err(Error::shape("sample fields have inconsistent dimensions"));
    }
    if sample.gains.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::domain("large-scale gains must be positive"));
    }
    Ok(())
}

/// Run PSCA from the all-zero point.
pub fn psca_run(kind: &ProblemKind, sample: &Sample, schedule: &StepSchedule, opts: &RunOptions) -> Result<DetectorTrace> {
    check_sample(sample)?;
    schedule.validate()?;
    let n = sample.n_devices();
    kind.validate(n)?;
    let m = sample.n_antennas();
    let mut trace = DetectorTrace::new(format!("psca-{}", kind.name()), n);
    if let ProblemKind::MapUr { prior } = kind {
        trace.dead_zone_gradient = Some(prior.dead_zone_push / (m as f64 * prior.eps));
    }
    let split = SplitPilots::new(&sample.pilots);
    let mut x = DVector::<f64>::zeros(n);
    for k in 0..opts.max_iter {
        let start = Instant::now();
        let step = (|| -> Result<(CovState, DVector<f64>)> {
            let state = CovState::from_split(&split, &kind.weights(&x, &sample.gains), sample.noise_power, &sample.emp_cov)?;
            check_curvature(&state, sample.pilot_len())?;
            let grad = gradient(kind, &x, &state, &sample.gains, m)?;
            let coef = surrogate_coef(kind, &state, &sample.gains);
            let cand = coord_solution(kind, &x, &grad, &coef);
            Ok((state, cand))
        })();
        let (state, cand) = match step {
            Ok(v) => v,
            Err(e) => {
                trace.final_estimate = x;
                return Err(abort(k, e, trace));
            }
        };
        let rho = schedule.rho(k);
        let next = &x * (1.0 - rho) + &cand * rho;
        let elapsed = start.elapsed().as_secs_f64();
        if opts.record_objective {
            let f = objective_at(kind, &x, sample, &state);
            match f {
                Ok(f) if k == 0 => trace.initial_objective = Some(f),
                Ok(f) => trace.objective.push(f),
                Err(e) => {
                    trace.final_estimate = x;
                    return Err(abort(k, e, trace));
                }
            }
        }
        let diff = (&next - &x).norm();
        let scale = if kind.known() { 1.0 } else { next.norm() };
        x = next;
        trace.update_norm.push(diff);
        trace.wall_times.push(elapsed);
        trace.rho.push(rho);
        if opts.record_iterates {
            trace.iterates.push(x.clone());
        }
        if diff < opts.tol * scale {
            trace.converged = true;
            break;
        }
    }
    if opts.record_objective && trace.iterations() > 0 {
        match objective(kind, &x, sample) {
            Ok(f) => trace.objective.push(f),
            Err(e) => {
                let it = trace.iterations();
                trace.final_estimate = x;
                return Err(abort(it, e, trace));
            }
        }
    }
    trace.final_estimate = x;
    Ok(trace)
}
