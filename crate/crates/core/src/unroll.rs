//! Unrolled PSCA detectors: a fixed number of PSCA iterations whose step
//! sizes (and optionally two prior parameters) are tuned on training data.
//!
//! Training minimizes the mean binary cross-entropy of the soft outputs with
//! a derivative-free search: cyclic golden-section line searches over each
//! log-step, then SPSA refinement. The parameters that score best on the
//! validation set are kept.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::{default_steps, psca_run, ProblemKind, RunOptions, StepSchedule};
use crate::sysmodel::{Sample, SystemConfig};

/// Probability clamp used inside the cross-entropy.
pub const BCE_CLAMP: f64 = 1e-6;

const LOG_STEP_MIN: f64 = -9.0;
const SHIFT_RANGE: f64 = 8.0;
const LOG_SCALE_RANGE: f64 = 3.0;

/// Scale on which unknown-pathloss outputs are thresholded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    /// `gamma / g`, comparable with activities (requires known gains).
    #[default]
    Ratio,
    /// Raw `gamma`.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnrolledConfig {
    pub kind: ProblemKind,
    pub n_blocks: usize,
    pub steps: Vec<f64>,
    pub prior_params_trainable: bool,
    /// Added to every prior log-odds.
    #[serde(default)]
    pub prior_shift: f64,
    /// Multiplies the pairwise prior coefficients.
    #[serde(default = "one")]
    pub prior_scale: f64,
    #[serde(default)]
    pub score_scale: ScoreScale,
}

fn one() -> f64 {
    1.0
}

impl UnrolledConfig {
    /// `n_blocks` blocks initialized with the default diminishing schedule.
    pub fn new(kind: ProblemKind, n_blocks: usize) -> Self {
        Self {
            kind,
            n_blocks,
            steps: default_steps(n_blocks),
            prior_params_trainable: false,
            prior_shift: 0.0,
            prior_scale: 1.0,
            score_scale: ScoreScale::Ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::config("an unrolled detector needs at least one block"));
        }
        if self.steps.len() != self.n_blocks {
            return Err(Error::config(format!("{} steps for {} blocks", self.steps.len(), self.n_blocks)));
        }
        StepSchedule::Explicit(self.steps.clone()).validate()
    }

    /// Problem with the prior adjustments applied.
    pub fn effective_kind(&self) -> ProblemKind {
        match &self.kind {
            ProblemKind::MapK { prior } if self.prior_shift != 0.0 || self.prior_scale != 1.0 => {
                ProblemKind::MapK { prior: prior.adjusted(self.prior_shift, self.prior_scale) }
            }
            ProblemKind::MapUr { prior } if self.prior_shift != 0.0 => {
                ProblemKind::MapUr { prior: prior.adjusted(self.prior_shift) }
            }
            other => other.clone(),
        }
    }

    fn n_prior_params(&self) -> usize {
        if !self.prior_params_trainable {
            return 0;
        }
        match &self.kind {
            ProblemKind::MapK { .. } => 2,
            ProblemKind::MapUr { .. } => 1,
            _ => 0,
        }
    }

    fn to_params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.steps.iter().map(|s| s.ln()).collect();
        let extra = self.n_prior_params();
        if extra >= 1 {
            p.push(self.prior_shift);
        }
        if extra >= 2 {
            p.push(self.prior_scale.ln());
        }
        p
    }

    fn param_bounds(&self, i: usize) -> (f64, f64) {
        if i < self.n_blocks {
            (LOG_STEP_MIN, 0.0)
        } else if i == self.n_blocks {
            (-SHIFT_RANGE, SHIFT_RANGE)
        } else {
            (-LOG_SCALE_RANGE, LOG_SCALE_RANGE)
        }
    }

    fn with_params(&self, p: &[f64]) -> Self {
        let mut out = self.clone();
        for (i, s) in out.steps.iter_mut().enumerate() {
            *s = p[i].clamp(LOG_STEP_MIN, 0.0).exp();
        }
        let extra = self.n_prior_params();
        if extra >= 1 {
            out.prior_shift = p[self.n_blocks];
        }
        if extra >= 2 {
            out.prior_scale = p[self.n_blocks + 1].exp();
        }
        out
    }
}

/// Soft output of the unrolled detector: the final PSCA iterate.
pub fn forward(cfg: &UnrolledConfig, sample: &Sample) -> Result<DVector<f64>> {
    cfg.validate()?;
    let schedule = StepSchedule::Explicit(cfg.steps.clone());
    let trace = psca_run(&cfg.effective_kind(), sample, &schedule, &RunOptions::fixed(cfg.n_blocks))?;
    Ok(trace.final_estimate)
}

/// Detection score: the soft output itself for known pathloss; `gamma / g`
/// or raw `gamma` for unknown pathloss.
pub fn score(known: bool, scale: ScoreScale, soft: &DVector<f64>, gains: &DVector<f64>) -> DVector<f64> {
    if known || scale == ScoreScale::Raw {
        soft.clone()
    } else {
        soft.component_div(gains)
    }
}

/// Mean binary cross-entropy over samples and devices. Probabilities are the
/// soft outputs (known pathloss) or `gamma / g` (unknown pathloss), clamped
/// to `[delta, 1 - delta]`.
pub fn bce_loss(soft: &[DVector<f64>], truth: &[Vec<bool>], known: bool, gains: &[DVector<f64>]) -> Result<f64> {
    if soft.len() != truth.len() || (!known && gains.len() != soft.len()) {
        return Err(Error::shape("cross-entropy inputs have different sample counts"));
    }
    if soft.is_empty() {
        return Err(Error::shape("cross-entropy of an empty batch"));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (i, (s, t)) in soft.iter().zip(truth).enumerate() {
        if s.len() != t.len() || (!known && gains[i].len() != s.len()) {
            return Err(Error::shape(format!("sample {i} has mismatched lengths")));
        }
        for n in 0..s.len() {
            let raw = if known {
                s[n]
            } else {
                if !(gains[i][n] > 0.0) {
                    return Err(Error::domain("cross-entropy needs positive gains"));
                }
                s[n] / gains[i][n]
            };
            let u = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            acc -= if t[n] { u.ln() } else { (1.0 - u).ln() };
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Threshold minimizing the error rate of `score >= theta` over the
/// candidates `{midpoints of sorted distinct scores} U {0.5}`; ties go to
/// the smallest threshold. Returns `(theta, error rate)`.
pub fn calibrate_threshold(scores: &[DVector<f64>], truth: &[Vec<bool>]) -> Result<(f64, f64)> {
    let mut pts: Vec<(f64, bool)> = Vec::new();
    for (s, t) in scores.iter().zip(truth) {
        if s.len() != t.len() {
            return Err(Error::shape("score and truth lengths differ"));
        }
        pts.extend(s.iter().copied().zip(t.iter().copied()));
    }
    if pts.is_empty() || scores.len() != truth.len() {
        return Err(Error::shape("threshold calibration needs a nonempty validation set"));
    }
    if pts.iter().any(|p| p.0.is_nan()) {
        return Err(Error::domain("NaN score in threshold calibration"));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = pts.len() as f64;
    let n_pos = pts.iter().filter(|p| p.1).count();
    let mut candidates: Vec<f64> = pts
        .windows(2)
        .filter(|w| w[1].0 > w[0].0)
        .map(|w| 0.5 * (w[0].0 + w[1].0))
        .collect();
    candidates.push(0.5);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    // Sweep: `below` counts points with score < theta.
    let (mut below, mut pos_below) = (0usize, 0usize);
    let mut best = (f64::NAN, usize::MAX);
    for &theta in &candidates {
        while below < pts.len() && pts[below].0 < theta {
            if pts[below].1 {
                pos_below += 1;
            }
            below += 1;
        }
        let neg_above = (pts.len() - below) - (n_pos - pos_below);
        let errors = pos_below + neg_above;
        if errors < best.1 {
            best = (theta, errors);
        }
    }
    Ok((best.0, best.1 as f64 / total))
}

/// Hard decision `score >= theta`.
pub fn predict(score: &DVector<f64>, theta: f64) -> Vec<bool> {
    score.iter().map(|&s| s >= theta).collect()
}

/// Derivative-free training budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainBudget {
    /// Upper bound on forward passes over a batch.
    pub max_batches: usize,
    pub batch_size: usize,
    pub sweeps: usize,
    /// Golden-section interval reductions per coordinate search.
    pub golden_iters: usize,
    pub spsa_pairs: usize,
    pub spsa_a: f64,
    pub spsa_c: f64,
    /// Early stop when the best validation loss improves by less than this
    /// relative amount over `patience` evaluations.
    pub min_rel_improvement: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self {
            max_batches: 5000,
            batch_size: 64,
            sweeps: 3,
            golden_iters: 12,
            spsa_pairs: 100,
            spsa_a: 0.1,
            spsa_c: 0.05,
            min_rel_improvement: 1e-4,
            patience: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss_curve: Vec<f64>,
    pub val_loss_curve: Vec<f64>,
    pub best_steps: Vec<f64>,
    pub best_prior_shift: f64,
    pub best_prior_scale: f64,
    /// Calibrated on the validation set with the best parameters.
    pub threshold: f64,
    pub val_error_rate: f64,
    /// Number of validation evaluations when training stopped.
    pub stopped_epoch: usize,
    pub budget_exhausted: bool,
    pub early_stopped: bool,
}

/// Soft outputs for a set of samples.
pub fn forward_batch(cfg: &UnrolledConfig, samples: &[Sample]) -> Result<Vec<DVector<f64>>> {
    samples.par_iter().map(|s| forward(cfg, s)).collect()
}

/// Mean cross-entropy of `cfg` on `samples`.
pub fn batch_loss(cfg: &UnrolledConfig, samples: &[Sample]) -> Result<f64> {
    let soft = forward_batch(cfg, samples)?;
    let truth: Vec<Vec<bool>> = samples.iter().map(|s| s.activities.clone()).collect();
    let gains: Vec<DVector<f64>> = samples.iter().map(|s| s.gains.clone()).collect();
    bce_loss(&soft, &truth, cfg.kind.known(), &gains)
}

struct Trainer<'a> {
    base: UnrolledConfig,
    train: &'a [Sample],
    val: &'a [Sample],
    budget: &'a TrainBudget,
    batches_used: usize,
    batch_index: usize,
    best: (f64, Vec<f64>),
    val_curve: Vec<f64>,
    train_curve: Vec<f64>,
    stale: usize,
    last_ref: f64,
}

enum Stop {
    Budget,
    Early,
}

impl<'a> Trainer<'a> {
    fn charge(&mut self, batches: usize) -> Result<(), Stop> {
        if self.batches_used + batches > self.budget.max_batches {
            return Err(Stop::Budget);
        }
        self.batches_used += batches;
        Ok(())
    }

    fn n_batches(&self, len: usize) -> usize {
        len.div_ceil(self.budget.batch_size).max(1)
    }

    /// Loss on the fixed first training batch. Failures count as infinite loss.
    fn fixed_loss(&mut self, p: &[f64]) -> Result<f64, Stop> {
        self.charge(1)?;
        let end = self.budget.batch_size.min(self.train.len());
        Ok(batch_loss(&self.base.with_params(p), &self.train[..end]).unwrap_or(f64::INFINITY))
    }

    /// Loss on the next batch in the rotation over the training set.
    fn rotating_batch(&mut self) -> &'a [Sample] {
        let bs = self.budget.batch_size.min(self.train.len());
        let n_batches = self.train.len().div_ceil(bs);
        let b = self.batch_index % n_batches;
        self.batch_index += 1;
        let start = b * bs;
        &self.train[start..(start + bs).min(self.train.len())]
    }

    fn validate(&mut self, p: &[f64]) -> Result<(), Stop> {
        self.charge(self.n_batches(self.val.len()))?;
        let loss = batch_loss(&self.base.with_params(p), self.val).unwrap_or(f64::INFINITY);
        self.val_curve.push(loss);
        if loss < self.best.0 {
            self.best = (loss, p.to_vec());
        }
        if self.best.0 < self.last_ref * (1.0 - self.budget.min_rel_improvement) {
            self.last_ref = self.best.0;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.budget.patience {
                return Err(Stop::Early);
            }
        }
        Ok(())
    }

    fn golden(&mut self, p: &mut [f64], i: usize, current: f64) -> Result<f64, Stop> {
        const INV_PHI: f64 = 0.618_033_988_749_894_9;
        let (mut lo, mut hi) = self.base.param_bounds(i);
        let eval = |t: &mut Self, p: &mut [f64], x: f64| -> Result<f64, Stop> {
            let keep = p[i];
            p[i] = x;
            let v = t.fixed_loss(p);
            p[i] = keep;
            v
        };
        let mut best = (p[i], current);
        let mut x1 = hi - INV_PHI * (hi - lo);
        let mut x2 = lo + INV_PHI * (hi - lo);
        let mut f1 = eval(self, p, x1)?;
        let mut f2 = eval(self, p, x2)?;
        for _ in 0..self.budget.golden_iters {
            for (x, f) in [(x1, f1), (x2, f2)] {
                if f < best.1 {
                    best = (x, f);
                }
            }
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - INV_PHI * (hi - lo);
                f1 = eval(self, p, x1)?;
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + INV_PHI * (hi - lo);
                f2 = eval(self, p, x2)?;
            }
        }
        for (x, f) in [(x1, f1), (x2, f2)] {
            if f < best.1 {
                best = (x, f);
            }
        }
        p[i] = best.0;
        Ok(best.1)
    }

    fn run(&mut self) -> Stop {
        match self.run_inner() {
            Ok(()) => Stop::Early,
            Err(s) => s,
        }
    }

    fn run_inner(&mut self) -> Result<(), Stop> {
        let mut p = self.base.to_params();
        self.validate(&p)?;
        let mut current = self.fixed_loss(&p)?;
        self.train_curve.push(current);
        for _ in 0..self.budget.sweeps {
            for i in 0..p.len() {
                current = self.golden(&mut p, i, current)?;
            }
            self.train_curve.push(current);
            self.validate(&p)?;
        }
        // SPSA from the best validated point.
        let mut p = self.best.1.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.budget.seed);
        let stability = 0.1 * self.budget.spsa_pairs as f64;
        for k in 0..self.budget.spsa_pairs {
            let ak = self.budget.spsa_a / (k as f64 + 1.0 + stability).powf(0.602);
            let ck = self.budget.spsa_c / (k as f64 + 1.0).powf(0.101);
            let delta: Vec<f64> = (0..p.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let clip = |base: &UnrolledConfig, v: Vec<f64>| -> Vec<f64> {
                v.iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let (lo, hi) = base.param_bounds(i);
                        x.clamp(lo, hi)
                    })
                    .collect()
            };
            let plus = clip(&self.base, p.iter().zip(&delta).map(|(x, d)| x + ck * d).collect());
            let minus = clip(&self.base, p.iter().zip(&delta).map(|(x, d)| x - ck * d).collect());
            self.charge(2)?;
            let batch = self.rotating_batch();
            let lp = batch_loss(&self.base.with_params(&plus), batch).unwrap_or(f64::INFINITY);
            let lm = batch_loss(&self.base.with_params(&minus), batch).unwrap_or(f64::INFINITY);
            if lp.is_finite() && lm.is_finite() {
                let diff = (lp - lm) / (2.0 * ck);
                let next: Vec<f64> = p.iter().zip(&delta).map(|(x, d)| x - ak * diff / d).collect();
                p = clip(&self.base, next);
            }
            self.train_curve.push(0.5 * (lp + lm));
            if (k + 1) % 10 == 0 {
                self.validate(&p)?;
            }
        }
        if self.budget.spsa_pairs % 10 != 0 {
            self.validate(&p)?;
        }
        Ok(())
    }
}

/// Tune the step sizes (and prior parameters when enabled) of `cfg`.
pub fn train(cfg: &UnrolledConfig, train_set: &[Sample], val_set: &[Sample], budget: &TrainBudget) -> Result<(UnrolledConfig, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::config("training needs nonempty training and validation sets"));
    }
    if budget.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut trainer = Trainer {
        base: cfg.clone(),
        train: train_set,
        val: val_set,
        budget,
        batches_used: 0,
        batch_index: 0,
        best: (f64::INFINITY, cfg.to_params()),
        val_curve: Vec::new(),
        train_curve: Vec::new(),
        stale: 0,
        last_ref: f64::INFINITY,
    };
    let stop = trainer.run();
    let best = cfg.with_params(&trainer.best.1);
    let soft = forward_batch(&best, val_set)?;
    let scores: Vec<DVector<f64>> = soft
        .iter()
        .zip(val_set)
        .map(|(s, smp)| score(best.kind.known(), best.score_scale, s, &smp.gains))
        .collect();
    let truth: Vec<Vec<bool>> = val_set.iter().map(|s| s.activities.clone()).collect();
    let (threshold, val_error_rate) = calibrate_threshold(&scores, &truth)?;
    let report = TrainReport {
        train_loss_curve: trainer.train_curve,
        stopped_epoch: trainer.val_curve.len(),
        val_loss_curve: trainer.val_curve,
        best_steps: best.steps.clone(),
        best_prior_shift: best.prior_shift,
        best_prior_scale: best.prior_scale,
        threshold,
        val_error_rate,
        budget_exhausted: matches!(stop, Stop::Budget),
        early_stopped: matches!(stop, Stop::Early) && trainer.stale >= budget.patience,
    };
    Ok((best, report))
}

/// SHA-256 over the sufficient statistics and activities of a dataset.
pub fn dataset_fingerprint(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        for z in s.emp_cov.iter() {
            h.update(z.re.to_le_bytes());
            h.update(z.im.to_le_bytes());
        }
        for g in s.gains.iter() {
            h.update(g.to_le_bytes());
        }
        h.update(s.activities.iter().map(|&a| a as u8).collect::<Vec<u8>>());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// A trained detector as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: UnrolledConfig,
    pub threshold: f64,
    pub system: SystemConfig,
    pub dataset_fingerprint: String,
    pub report: Option<TrainReport>,
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let model: Self = serde_json::from_reader(std::io::BufReader::new(file))?;
        model.config.validate()?;
        Ok(model)
    }

    pub fn predict(&self, sample: &Sample) -> Result<Vec<bool>> {
        let soft = forward(&self.config, sample)?;
        let s = score(self.config.kind.known(), self.config.score_scale, &soft, &sample.gains);
        Ok(predict(&s, self.threshold))
    }
}
