//! Experiment harness: seeded datasets, method execution over a parameter
//! sweep, error-rate / timing / flop accounting, and CSV output.
//!
//! Every grid point draws its train, validation and test samples from one
//! seeded dataset (`[0, n_train)`, then validation, then test). Thresholds
//! of all methods are calibrated on the validation samples. Wall times
//! cover the detector only; forming the empirical covariance is timed
//! separately.

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{bcd_map_k, bcd_ml, pg_ml, StepMode};
use crate::error::{Error, Result};
use crate::estimators::{psca_run, DetectorTrace, ProblemKind, RunOptions, StepSchedule};
use crate::priors::{ActivityPrior, EffPathlossPrior, PairwiseMvbPrior};
use crate::sysmodel::{empirical_cov, generate_dataset, ActivityModel, Sample, SystemConfig};
use crate::unroll::{calibrate_threshold, forward, predict, score, train, ScoreScale, TrainBudget, UnrolledConfig};

/// Weight of the independent model mixed into the group law before the
/// pairwise prior is fitted.
pub const DEFAULT_MVB_SMOOTHING: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Psca,
    Bcd,
    Pg,
    Net,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Problem {
    MlK,
    MapK,
    MlUd,
    MapUr,
}

impl Problem {
    pub fn known(self) -> bool {
        matches!(self, Problem::MlK | Problem::MapK)
    }
}

/// A method id such as `psca-ml-k`, `bcd-map-k`, `pg-ml-ud` or `psca-map-ur-net`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MethodId {
    pub family: Family,
    pub problem: Problem,
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (family, problem) = match s {
            "psca-ml-k" => (Family::Psca, Problem::MlK),
            "psca-map-k" => (Family::Psca, Problem::MapK),
            "psca-ml-ud" => (Family::Psca, Problem::MlUd),
            "psca-map-ur" => (Family::Psca, Problem::MapUr),
            "bcd-ml-k" => (Family::Bcd, Problem::MlK),
            "bcd-map-k" => (Family::Bcd, Problem::MapK),
            "bcd-ml-ud" => (Family::Bcd, Problem::MlUd),
            "pg-ml-k" => (Family::Pg, Problem::MlK),
            "pg-ml-ud" => (Family::Pg, Problem::MlUd),
            "psca-ml-k-net" => (Family::Net, Problem::MlK),
            "psca-map-k-net" => (Family::Net, Problem::MapK),
            "psca-ml-ud-net" => (Family::Net, Problem::MlUd),
            "psca-map-ur-net" => (Family::Net, Problem::MapUr),
            other => return Err(Error::UnknownMethod(other.to_string())),
        };
        Ok(Self { family, problem })
    }
}

impl std::fmt::Display for MethodId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let family = match self.family {
            Family::Psca | Family::Net => "psca",
            Family::Bcd => "bcd",
            Family::Pg => "pg",
        };
        let problem = match self.problem {
            Problem::MlK => "ml-k",
            Problem::MapK => "map-k",
            Problem::MlUd => "ml-ud",
            Problem::MapUr => "map-ur",
        };
        let suffix = if self.family == Family::Net { "-net" } else { "" };
        write!(f, "{family}-{problem}{suffix}")
    }
}

/// All implemented method ids.
pub const METHODS: &[&str] = &[
    "psca-ml-k",
    "psca-map-k",
    "psca-ml-ud",
    "psca-map-ur",
    "bcd-ml-k",
    "bcd-map-k",
    "bcd-ml-ud",
    "pg-ml-k",
    "pg-ml-ud",
    "psca-ml-k-net",
    "psca-map-k-net",
    "psca-ml-ud-net",
    "psca-map-ur-net",
];

/// Dominant per-iteration cost `(count, general)`: `40 N L^2` for PSCA and
/// PG, `56 N L^2` for BCD. Known-pathloss MAP methods also report the count
/// of the general MVB prior, which adds `2^N`.
pub fn flop_model(method: &str, n: usize, l: usize) -> Result<(f64, Option<f64>)> {
    let id: MethodId = method.parse()?;
    let nl2 = n as f64 * (l * l) as f64;
    let count = match id.family {
        Family::Psca | Family::Net | Family::Pg => 40.0 * nl2,
        Family::Bcd => 56.0 * nl2,
    };
    let general = (id.problem == Problem::MapK).then(|| count + 2f64.powi(n.min(i32::MAX as usize) as i32));
    Ok((count, general))
}

/// Mean Hamming distance per device.
pub fn error_rate(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("prediction and truth sets differ in size or are empty"));
    }
    let mut wrong = 0usize;
    let mut total = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::shape("prediction and truth vectors differ in length"));
        }
        wrong += p.iter().zip(t).filter(|(a, b)| a != b).count();
        total += p.len();
    }
    Ok(wrong as f64 / total as f64)
}

/// The swept parameter and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "param", content = "values", rename_all = "snake_case")]
pub enum Sweep {
    PilotLen(Vec<usize>),
    Antennas(Vec<usize>),
    Devices(Vec<usize>),
    TxPowerDbm(Vec<f64>),
    GroupSize(Vec<usize>),
    Iterations(Vec<usize>),
}

impl Sweep {
    pub fn len(&self) -> usize {
        match self {
            Sweep::PilotLen(v) | Sweep::Antennas(v) | Sweep::Devices(v) | Sweep::GroupSize(v) | Sweep::Iterations(v) => v.len(),
            Sweep::TxPowerDbm(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self) -> &'static str {
        match self {
            Sweep::PilotLen(_) => "L",
            Sweep::Antennas(_) => "M",
            Sweep::Devices(_) => "N",
            Sweep::TxPowerDbm(_) => "P_dbm",
            Sweep::GroupSize(_) => "group_size",
            Sweep::Iterations(_) => "iterations",
        }
    }

    /// `L16`-style label of point `i`.
    pub fn label(&self, i: usize) -> String {
        let value = match self {
            Sweep::PilotLen(v) | Sweep::Antennas(v) | Sweep::Devices(v) | Sweep::GroupSize(v) | Sweep::Iterations(v) => {
                v[i].to_string()
            }
            Sweep::TxPowerDbm(v) => v[i].to_string(),
        };
        format!("{}{value}", self.name())
    }

    /// Parse `L=10,16,24` style specifications.
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("sweep `{spec}` is not of the form PARAM=v1,v2,...")))?;
        let ints = || -> Result<Vec<usize>> {
            values
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| Error::config(format!("bad sweep value `{v}`"))))
                .collect()
        };
        Ok(match key.trim() {
            "L" | "pilot_len" => Sweep::PilotLen(ints()?),
            "M" | "n_antennas" => Sweep::Antennas(ints()?),
            "N" | "n_devices" => Sweep::Devices(ints()?),
            "group_size" => Sweep::GroupSize(ints()?),
            "iterations" => Sweep::Iterations(ints()?),
            "P" | "P_dbm" | "tx_power_dbm" => Sweep::TxPowerDbm(
                values
                    .split(',')
                    .map(|v| v.trim().parse().map_err(|_| Error::config(format!("bad sweep value `{v}`"))))
                    .collect::<Result<_>>()?,
            ),
            other => return Err(Error::config(format!("unknown sweep parameter `{other}`"))),
        })
    }
}

/// Iteration counts per method family when the sweep does not set them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationBudget {
    pub psca: usize,
    pub bcd: usize,
    pub pg: usize,
    pub net_blocks: usize,
}

impl IterationBudget {
    pub fn for_family(&self, family: Family) -> usize {
        match family {
            Family::Psca => self.psca,
            Family::Bcd => self.bcd,
            Family::Pg => self.pg,
            Family::Net => self.net_blocks,
        }
    }
}

impl Default for IterationBudget {
    fn default() -> Self {
        Self { psca: 30, bcd: 5, pg: 5, net_blocks: 15 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub methods: Vec<String>,
    pub sweep: Sweep,
    pub fixed: SystemConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub iterations: IterationBudget,
    #[serde(default)]
    pub train_budget: TrainBudget,
    /// Stopping tolerance; zero runs the full iteration count.
    #[serde(default)]
    pub tol: f64,
    /// Worker threads; zero uses the rayon default.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_smoothing")]
    pub mvb_smoothing: f64,
    /// Threshold unknown-pathloss scores as raw gamma instead of gamma / g.
    #[serde(default)]
    pub raw_gamma_threshold: bool,
}

fn default_smoothing() -> f64 {
    DEFAULT_MVB_SMOOTHING
}

impl ExperimentGrid {
    /// Desk-scale defaults: N = 200, M = 64, P = 23 dBm, 200/100/200 samples.
    pub fn desk(methods: Vec<String>, sweep: Sweep) -> Self {
        Self {
            methods,
            sweep,
            fixed: SystemConfig::desk(),
            n_train: 200,
            n_val: 100,
            n_test: 200,
            seeds: vec![0],
            iterations: IterationBudget::default(),
            train_budget: TrainBudget::default(),
            tol: 0.0,
            workers: 0,
            mvb_smoothing: DEFAULT_MVB_SMOOTHING,
            raw_gamma_threshold: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.is_empty() {
            return Err(Error::config("the sweep has no values"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.n_val == 0 || self.n_test == 0 {
            return Err(Error::config("validation and test sets must be nonempty"));
        }
        for m in &self.methods {
            let id: MethodId = m.parse()?;
            if id.family == Family::Net && self.n_train == 0 {
                return Err(Error::config(format!("{m} needs training samples")));
            }
        }
        Ok(())
    }

    /// Configuration and iteration override of sweep point `i`.
    fn point(&self, i: usize) -> (SystemConfig, Option<usize>) {
        let mut cfg = self.fixed.clone();
        let mut iters = None;
        match &self.sweep {
            Sweep::PilotLen(v) => cfg.pilot_len = v[i],
            Sweep::Antennas(v) => cfg.n_antennas = v[i],
            Sweep::Devices(v) => cfg.n_devices = v[i],
            Sweep::TxPowerDbm(v) => cfg.tx_power_dbm = v[i],
            Sweep::GroupSize(v) => {
                cfg.activity = ActivityModel::Group { group_size: v[i], p_group: cfg.activity.marginal() }
            }
            Sweep::Iterations(v) => iters = Some(v[i]),
        }
        (cfg, iters)
    }
}

/// One CSV row: one method at one grid point and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "P_dbm")]
    pub p_dbm: f64,
    pub group_size: usize,
    pub iterations: usize,
    pub error_rate: f64,
    /// Mean detector time per test sample.
    pub mean_wall_time_s: f64,
    /// Mean detector time per iteration.
    pub mean_iter_time_s: f64,
    /// Mean time to form the empirical covariance per test sample.
    pub cov_time_s: f64,
    pub flop_model_count: f64,
    pub flop_model_general: Option<f64>,
    pub threshold: f64,
    pub seed: u64,
    pub error: String,
}

/// Columns that depend on the machine's timing.
pub const TIME_COLUMNS: &[&str] = &["mean_wall_time_s", "mean_iter_time_s", "cov_time_s"];

/// Everything a detector needs besides the sample.
pub struct Context {
    pub activity_prior: ActivityPrior,
    pub eff_prior: EffPathlossPrior,
}

impl Context {
    pub fn new(cfg: &SystemConfig, mvb_smoothing: f64) -> Result<Self> {
        let activity_prior = match cfg.activity {
            ActivityModel::Iid { p } => {
                ActivityPrior::Independent(crate::priors::IndependentPrior::uniform(cfg.n_devices, p))
            }
            ref group => ActivityPrior::Pairwise(PairwiseMvbPrior::fit(group, cfg.n_devices, mvb_smoothing)?),
        };
        Ok(Self { activity_prior, eff_prior: EffPathlossPrior::from_config(cfg)? })
    }

    pub fn kind(&self, problem: Problem) -> ProblemKind {
        match problem {
            Problem::MlK => ProblemKind::MlK,
            Problem::MapK => ProblemKind::MapK { prior: self.activity_prior.clone() },
            Problem::MlUd => ProblemKind::MlUd,
            Problem::MapUr => ProblemKind::MapUr { prior: self.eff_prior.clone() },
        }
    }
}

/// Run one non-trained detector for `iterations` iterations (or sweeps).
pub fn run_detector(id: MethodId, ctx: &Context, sample: &Sample, iterations: usize, tol: f64) -> Result<DetectorTrace> {
    run_detector_with(id, ctx, sample, &RunOptions::new(iterations, tol))
}

/// As [`run_detector`] with explicit run options.
pub fn run_detector_with(id: MethodId, ctx: &Context, sample: &Sample, opts: &RunOptions) -> Result<DetectorTrace> {
    let opts = opts.clone();
    match (id.family, id.problem) {
        (Family::Psca | Family::Net, p) => psca_run(&ctx.kind(p), sample, &StepSchedule::Diminishing, &opts),
        (Family::Bcd, Problem::MlK) => bcd_ml(sample, true, &opts),
        (Family::Bcd, Problem::MlUd) => bcd_ml(sample, false, &opts),
        (Family::Bcd, Problem::MapK) => bcd_map_k(sample, &ctx.activity_prior, &opts),
        (Family::Pg, Problem::MlK) => pg_ml(sample, true, &opts, StepMode::default()),
        (Family::Pg, Problem::MlUd) => pg_ml(sample, false, &opts, StepMode::default()),
        (family, problem) => Err(Error::UnknownMethod(format!("{family:?} detector for {problem:?}"))),
    }
}

struct Outcome {
    scores: Vec<DVector<f64>>,
    times: Vec<f64>,
    iterations: Vec<usize>,
}

fn evaluate<F>(samples: &[Sample], run: F) -> Result<Outcome>
where
    F: Fn(&Sample) -> Result<(DVector<f64>, f64, usize)> + Sync,
{
    let results: Vec<(DVector<f64>, f64, usize)> = samples.par_iter().map(&run).collect::<Result<_>>()?;
    let mut out = Outcome { scores: Vec::new(), times: Vec::new(), iterations: Vec::new() };
    for (s, t, k) in results {
        out.scores.push(s);
        out.times.push(t);
        out.iterations.push(k);
    }
    Ok(out)
}

fn truths(samples: &[Sample]) -> Vec<Vec<bool>> {
    samples.iter().map(|s| s.activities.clone()).collect()
}

struct PointData {
    cfg: SystemConfig,
    iterations: Option<usize>,
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
}

fn point_data(grid: &ExperimentGrid, i: usize, seed: u64) -> Result<PointData> {
    let (cfg, iterations) = grid.point(i);
    let (a, b, c) = (grid.n_train as u64, grid.n_val as u64, grid.n_test as u64);
    // Antenna sweeps observe the same scenes with nested antenna subsets.
    let (gen_cfg, keep) = match &grid.sweep {
        Sweep::Antennas(v) => {
            let max = *v.iter().max().expect("nonempty sweep");
            (SystemConfig { n_antennas: max, ..cfg.clone() }, Some(cfg.n_antennas))
        }
        _ => (cfg.clone(), None),
    };
    let mut all = generate_dataset(&gen_cfg, seed, 0..a + b + c)?;
    if let Some(m) = keep {
        all = all.iter().map(|s| s.truncate_antennas(m)).collect::<Result<_>>()?;
    }
    let test = all.split_off((a + b) as usize);
    let val = all.split_off(a as usize);
    Ok(PointData { cfg, iterations, train: all, val, test })
}

fn method_row(grid: &ExperimentGrid, id: MethodId, data: &PointData, ctx: &Context, seed: u64) -> Result<ResultRow> {
    let cfg = &data.cfg;
    let known = id.problem.known();
    let scale = if grid.raw_gamma_threshold { ScoreScale::Raw } else { ScoreScale::Ratio };
    let to_score = |soft: &DVector<f64>, s: &Sample| score(known, scale, soft, &s.gains);
    let (val, test, iterations) = match id.family {
        Family::Net => {
            let blocks = data.iterations.unwrap_or(grid.iterations.net_blocks);
            let mut net = UnrolledConfig::new(ctx.kind(id.problem), blocks);
            net.score_scale = scale;
            let budget = TrainBudget { seed, ..grid.train_budget.clone() };
            let (trained, _report) = train(&net, &data.train, &data.val, &budget)?;
            let run = |s: &Sample| -> Result<(DVector<f64>, f64, usize)> {
                let start = Instant::now();
                let soft = forward(&trained, s)?;
                Ok((to_score(&soft, s), start.elapsed().as_secs_f64(), blocks))
            };
            (evaluate(&data.val, run)?, evaluate(&data.test, run)?, blocks)
        }
        family => {
            let iterations = data.iterations.unwrap_or(grid.iterations.for_family(family));
            let run = |s: &Sample| -> Result<(DVector<f64>, f64, usize)> {
                let trace = run_detector(id, ctx, s, iterations, grid.tol)?;
                Ok((to_score(&trace.final_estimate, s), trace.total_time(), trace.iterations()))
            };
            (evaluate(&data.val, run)?, evaluate(&data.test, run)?, iterations)
        }
    };
    let (threshold, _) = calibrate_threshold(&val.scores, &truths(&data.val))?;
    let pred: Vec<Vec<bool>> = test.scores.iter().map(|s| predict(s, threshold)).collect();
    let err = error_rate(&pred, &truths(&data.test))?;
    let total_time: f64 = test.times.iter().sum();
    let total_iters: usize = test.iterations.iter().sum();
    let cov_time = data
        .test
        .iter()
        .map(|s| {
            let start = Instant::now();
            let _ = empirical_cov(&s.received, s.n_antennas());
            start.elapsed().as_secs_f64()
        })
        .sum::<f64>()
        / data.test.len() as f64;
    let (flops, general) = flop_model(&id.to_string(), cfg.n_devices, cfg.pilot_len)?;
    Ok(ResultRow {
        method: id.to_string(),
        n: cfg.n_devices,
        l: cfg.pilot_len,
        m: cfg.n_antennas,
        p_dbm: cfg.tx_power_dbm,
        group_size: cfg.activity.group_size(),
        iterations,
        error_rate: err,
        mean_wall_time_s: total_time / data.test.len() as f64,
        mean_iter_time_s: if total_iters > 0 { total_time / total_iters as f64 } else { 0.0 },
        cov_time_s: cov_time,
        flop_model_count: flops,
        flop_model_general: general,
        threshold,
        seed,
        error: String::new(),
    })
}

fn failed_row(method: &str, cfg: &SystemConfig, iterations: usize, seed: u64, err: &Error) -> ResultRow {
    ResultRow {
        method: method.to_string(),
        n: cfg.n_devices,
        l: cfg.pilot_len,
        m: cfg.n_antennas,
        p_dbm: cfg.tx_power_dbm,
        group_size: cfg.activity.group_size(),
        iterations,
        error_rate: f64::NAN,
        mean_wall_time_s: f64::NAN,
        mean_iter_time_s: f64::NAN,
        cov_time_s: f64::NAN,
        flop_model_count: f64::NAN,
        flop_model_general: None,
        threshold: f64::NAN,
        seed,
        error: err.to_string(),
    }
}

/// Run every method at every sweep point and seed. Failures become rows
/// with a nonempty `error` field.
pub fn run_grid(grid: &ExperimentGrid) -> Result<Vec<ResultRow>> {
    grid.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(grid.workers)
        .build()
        .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| {
        let mut rows = Vec::new();
        if grid.methods.is_empty() {
            return Ok(rows);
        }
        for seed in &grid.seeds {
            for i in 0..grid.sweep.len() {
                let (cfg, iters) = grid.point(i);
                let prepared = point_data(grid, i, *seed).and_then(|d| Ok((Context::new(&d.cfg, grid.mvb_smoothing)?, d)));
                for method in &grid.methods {
                    let row = match &prepared {
                        Ok((ctx, data)) => method
                            .parse::<MethodId>()
                            .and_then(|id| method_row(grid, id, data, ctx, *seed)),
                        Err(e) => Err(Error::config(e.to_string())),
                    };
                    rows.push(row.unwrap_or_else(|e| failed_row(method, &cfg, iters.unwrap_or(0), *seed, &e)));
                }
            }
        }
        Ok(rows)
    })
}

/// Recorded run of one detector on the first test sample of a grid point.
#[derive(Debug, Clone)]
pub struct PointTrace {
    /// `{method}_{point}_seed{seed}`, usable as a file stem.
    pub label: String,
    pub trace: DetectorTrace,
}

/// Per-iteration traces of every untrained method at every grid point and
/// seed, each on the first test sample. Trained methods are skipped.
pub fn trace_grid(grid: &ExperimentGrid) -> Result<Vec<PointTrace>> {
    grid.validate()?;
    let mut out = Vec::new();
    for &seed in &grid.seeds {
        for i in 0..grid.sweep.len() {
            let (cfg, iters) = grid.point(i);
            let first_test = (grid.n_train + grid.n_val) as u64;
            let sample = match &grid.sweep {
                Sweep::Antennas(v) => {
                    let max = *v.iter().max().expect("nonempty sweep");
                    let gen_cfg = SystemConfig { n_antennas: max, ..cfg.clone() };
                    generate_dataset(&gen_cfg, seed, first_test..first_test + 1)?.remove(0).truncate_antennas(cfg.n_antennas)?
                }
                _ => generate_dataset(&cfg, seed, first_test..first_test + 1)?.remove(0),
            };
            let ctx = Context::new(&cfg, grid.mvb_smoothing)?;
            for method in &grid.methods {
                let id: MethodId = method.parse()?;
                if id.family == Family::Net {
                    continue;
                }
                let iterations = iters.unwrap_or(grid.iterations.for_family(id.family));
                let opts = RunOptions { record_objective: true, ..RunOptions::new(iterations, grid.tol) };
                let mut trace = run_detector_with(id, &ctx, &sample, &opts)?;
                trace.method = id.to_string();
                out.push(PointTrace { label: format!("{id}_{}_seed{seed}", grid.sweep.label(i)), trace });
            }
        }
    }
    Ok(out)
}

/// Write rows as CSV with a header.
pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "method",
            "N",
            "L",
            "M",
            "P_dbm",
            "group_size",
            "iterations",
            "error_rate",
            "mean_wall_time_s",
            "mean_iter_time_s",
            "cov_time_s",
            "flop_model_count",
            "flop_model_general",
            "threshold",
            "seed",
            "error",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Plain-text table of mean error rate and per-iteration time per method
/// and grid point, averaged over seeds.
pub fn summarize(rows: &[ResultRow]) -> String {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, usize, usize, usize, String, usize, usize), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.error.is_empty()) {
        groups
            .entry((r.method.clone(), r.n, r.l, r.m, format!("{}", r.p_dbm), r.group_size, r.iterations))
            .or_default()
            .push(r);
    }
    let mut out = String::from("method             N     L     M   P_dbm  group  iters  error_rate  iter_time_s\n");
    for ((method, n, l, m, p, g, it), rs) in groups {
        let k = rs.len() as f64;
        let err = rs.iter().map(|r| r.error_rate).sum::<f64>() / k;
        let t = rs.iter().map(|r| r.mean_iter_time_s).sum::<f64>() / k;
        out.push_str(&format!("{method:<16} {n:>5} {l:>5} {m:>5} {p:>7} {g:>6} {it:>6}  {err:>10.5}  {t:>11.3e}\n"));
    }
    let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
    if failed > 0 {
        out.push_str(&format!("{failed} failed rows\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_rate_values() {
        let truth = vec![vec![true, false, false]; 2];
        assert_eq!(error_rate(&truth, &truth).unwrap(), 0.0);
        let comp: Vec<Vec<bool>> = truth.iter().map(|t| t.iter().map(|b| !b).collect()).collect();
        assert_eq!(error_rate(&comp, &truth).unwrap(), 1.0);
        let t10 = vec![vec![false; 100]; 10];
        let mut p10 = t10.clone();
        p10[4][17] = true;
        assert!((error_rate(&p10, &t10).unwrap() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn traces_cover_untrained_methods() {
        let mut grid = ExperimentGrid::desk(
            vec!["psca-ml-k".into(), "bcd-ml-ud".into(), "psca-ml-k-net".into()],
            Sweep::PilotLen(vec![6, 8]),
        );
        grid.fixed = SystemConfig { n_devices: 20, n_antennas: 16, ..SystemConfig::desk() };
        grid.iterations.psca = 4;
        grid.iterations.bcd = 2;
        let traces = trace_grid(&grid).unwrap();
        let labels: Vec<&str> = traces.iter().map(|t| t.label.as_str()).collect();
        assert_eq!(labels, ["psca-ml-k_L6_seed0", "bcd-ml-ud_L6_seed0", "psca-ml-k_L8_seed0", "bcd-ml-ud_L8_seed0"]);
        assert_eq!(traces[0].trace.iterations(), 4);
        assert_eq!(traces[0].trace.objective.len(), 4);
        let mut buf = Vec::new();
        traces[1].trace.write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }

    #[test]
    fn flop_counts() {
        assert_eq!(flop_model("psca-ml-k", 1000, 40).unwrap().0, 6.4e7);
        assert_eq!(flop_model("bcd-ml-k", 1000, 40).unwrap().0, 8.96e7);
        assert_eq!(flop_model("pg-ml-ud", 1000, 40).unwrap().0, 6.4e7);
        let (c, g) = flop_model("psca-map-k", 10, 4).unwrap();
        assert_eq!(g, Some(c + 1024.0));
        assert!(matches!(flop_model("amp-k", 10, 4), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn method_ids_round_trip() {
        for m in METHODS {
            assert_eq!(m.parse::<MethodId>().unwrap().to_string(), *m);
        }
    }

    #[test]
    fn sweep_parsing() {
        assert_eq!(Sweep::parse("L=10,16").unwrap(), Sweep::PilotLen(vec![10, 16]));
        assert_eq!(Sweep::parse("P=20.5").unwrap(), Sweep::TxPowerDbm(vec![20.5]));
        assert!(Sweep::parse("Q=1").is_err());
        assert!(Sweep::parse("L").is_err());
    }

    #[test]
    fn empty_method_list_gives_header_only() {
        let grid = ExperimentGrid::desk(vec![], Sweep::PilotLen(vec![8]));
        let rows = run_grid(&grid).unwrap();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("method,N,L,M,P_dbm"));
    }

    #[test]
    fn failures_become_rows() {
        let mut grid = ExperimentGrid::desk(vec!["psca-ml-k".into()], Sweep::PilotLen(vec![8, 300]));
        grid.fixed = SystemConfig { n_devices: 50, n_antennas: 16, ..SystemConfig::desk() };
        grid.n_train = 0;
        grid.n_val = 3;
        grid.n_test = 3;
        let rows = run_grid(&grid).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].error.is_empty());
        assert!(!rows[1].error.is_empty(), "L >= N must be rejected");
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0].method, "psca-ml-k");
        assert!(summarize(&back).contains("1 failed rows"));
    }
}
