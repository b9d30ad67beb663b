//! Meta-training: Adam on the inference networks, prior and noise level.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::codec::ArrayRecord;
use crate::datagen::{split, Task};
use crate::error::{BnnpError, Result};
use crate::linalg::Mat;
use crate::model::{contiguous_batches, Bnnp, InferOptions, NetworkConfig};
use crate::objectives::{evaluate, task_noise, Components, ObjectiveEstimate, ObjectiveKind, TaskTerms, TermWeights};
use crate::params::{Binder, Param, ParamRecord, Parameterised};
use crate::rng::{derive_seed, substream, NoiseSource};

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_NONFINITE_STREAK: usize = 10;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Linear learning-rate schedule from `start` at step 0 to `end` at step T.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
}

pub fn lr_at(step: usize, schedule: &LrSchedule, total_steps: usize) -> f64 {
    let frac = if total_steps == 0 { 1.0 } else { (step.min(total_steps) as f64) / total_steps as f64 };
    schedule.start * (1.0 - frac) + schedule.end * frac
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

fn default_meta_batch() -> usize {
    5
}
fn default_samples() -> usize {
    8
}
fn default_objective() -> ObjectiveKind {
    ObjectiveKind::PpAvi
}
fn default_lr() -> LrSchedule {
    LrSchedule { start: 5e-3, end: 5e-5 }
}
fn default_context_range() -> (f64, f64) {
    (0.7, 0.9)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "default_meta_batch")]
    pub meta_batch: usize,
    #[serde(default = "default_samples")]
    pub num_samples: usize,
    #[serde(default = "default_objective")]
    pub objective: ObjectiveKind,
    #[serde(default = "default_lr")]
    pub lr: LrSchedule,
    #[serde(default)]
    pub seed: u64,
    /// Context proportion is drawn uniformly from this range per encounter.
    #[serde(default = "default_context_range")]
    pub context_range: (f64, f64),
    #[serde(default)]
    pub term_weights: TermWeights,
    /// Save a checkpoint every this many steps; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Split each context set into batches of this size; only one batch per
    /// task keeps gradients through its data.
    #[serde(default)]
    pub context_batch_size: Option<usize>,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            meta_batch: default_meta_batch(),
            num_samples: default_samples(),
            objective: default_objective(),
            lr: default_lr(),
            seed: 0,
            context_range: default_context_range(),
            term_weights: TermWeights::default(),
            checkpoint_every: 0,
            context_batch_size: None,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.context_range;
        let bad = |m: &str| Err(BnnpError::InvalidInput(format!("train config: {m}")));
        if !(0.0 < a && a <= b && b <= 1.0) {
            return bad("context_range must satisfy 0 < a <= b <= 1");
        }
        if self.steps == 0 || self.meta_batch == 0 || self.num_samples == 0 {
            return bad("steps, meta_batch and num_samples must be positive");
        }
        if self.context_batch_size == Some(0) {
            return bad("context_batch_size must be positive");
        }
        if !(self.lr.start >= 0.0 && self.lr.end >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        Ok(())
    }
}

/// Adam moments aligned with [`Parameterised::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    /// Number of applied updates.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Param]) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|p| Mat::zeros(p.value.nrows(), p.value.ncols())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Bnnp,
    pub adam: AdamState,
    /// Steps attempted so far, including skipped ones.
    pub step: usize,
    pub nonfinite_streak: usize,
    pub skipped_steps: usize,
}

impl TrainState {
    pub fn new(model: Bnnp) -> Self {
        let adam = AdamState::new(&model.params());
        Self { model, adam, step: 0, nonfinite_streak: 0, skipped_steps: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    /// `None` when the step was skipped.
    pub estimate: Option<ObjectiveEstimate>,
    pub lr: f64,
}

impl StepReport {
    /// Negative objective, or NaN for a skipped step.
    pub fn loss(&self) -> f64 {
        self.estimate.map_or(f64::NAN, |e| -e.value)
    }
}

/// Tasks for `step`, each freshly re-split.
pub fn sample_meta_batch(tasks: &[Task], config: &TrainConfig, step: usize) -> Result<Vec<Task>> {
    if tasks.is_empty() {
        return Err(BnnpError::InvalidInput("empty meta-dataset".into()));
    }
    let mut rng = substream(config.seed, &[step as u64, 0]);
    let size = config.meta_batch.min(tasks.len());
    let (a, b) = config.context_range;
    sample(&mut rng, tasks.len(), size)
        .into_iter()
        .enumerate()
        .map(|(i, idx)| {
            let p = if a < b { rng.random_range(a..=b) } else { a };
            split(&tasks[idx], p, derive_seed(config.seed, &[step as u64, 2, i as u64]))
        })
        .collect()
}

fn step_noise(config: &TrainConfig, step: usize) -> NoiseSource {
    NoiseSource::new(derive_seed(config.seed, &[step as u64, 1]))
}

fn task_options(config: &TrainConfig, task: &Task, step: usize, index: usize) -> InferOptions {
    let mut opts = InferOptions::new(config.num_samples);
    if let Some(size) = config.context_batch_size {
        let batches = contiguous_batches(task.context.len(), size);
        if batches.len() > 1 {
            let mut rng = substream(config.seed, &[step as u64, 3, index as u64]);
            opts.grad_batch = Some(rng.random_range(0..batches.len()));
            opts.batches = Some(batches);
        }
    }
    opts
}

/// Objective value and gradients for every parameter in canonical order.
pub fn objective_and_gradients(model: &Bnnp, batch: &[Task], config: &TrainConfig, step: usize) -> Result<(ObjectiveEstimate, Vec<Mat>)> {
    let tape = Tape::new();
    let mut binder = Binder::tracking(&tape);
    let bound = model.bind(&mut binder);
    let noise = step_noise(config, step);
    let mut values = Vec::with_capacity(batch.len());
    let mut comps = Vec::with_capacity(batch.len());
    for (i, task) in batch.iter().enumerate() {
        let opts = task_options(config, task, step, i);
        let terms = TaskTerms::compute(&bound, task, &opts, task_noise(noise, i))?;
        values.push(terms.objective(config.objective, config.term_weights));
        comps.push(terms.components());
    }
    let n = batch.len() as f64;
    let objective = tape.sum_all(&values).scale(1.0 / n);
    let grads = binder.gradients(objective, &model.params());
    let components = Components::mean(&comps);
    Ok((ObjectiveEstimate { value: objective.scalar(), components, num_samples: config.num_samples }, grads))
}

impl AdamState {
    /// Ascent step on the objective whose gradients are `grads`; entries that
    /// are not trainable keep their values and moments.
    pub fn step(&mut self, params: Vec<&mut Param>, grads: &[Mat], lr: f64, cfg: &AdamConfig) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            if !p.learnable {
                continue;
            }
            for idx in 0..g.len() {
                if !p.is_trainable(idx) {
                    continue;
                }
                let gi = -g[idx];
                m[idx] = cfg.beta1 * m[idx] + (1.0 - cfg.beta1) * gi;
                v[idx] = cfg.beta2 * v[idx] + (1.0 - cfg.beta2) * gi * gi;
                p.value[idx] -= lr * (m[idx] / c1) / ((v[idx] / c2).sqrt() + cfg.eps);
            }
        }
    }
}

/// One optimisation step on an already split meta-batch. Non-finite
/// objectives or gradients, and numerical failures, skip the update.
pub fn train_step(state: &mut TrainState, batch: &[Task], config: &TrainConfig) -> Result<StepReport> {
    let step = state.step;
    let lr = lr_at(step, &config.lr, config.steps);
    state.step += 1;
    let outcome = objective_and_gradients(&state.model, batch, config, step);
    let result = match outcome {
        Ok((est, grads)) if est.value.is_finite() && grads.iter().all(|g| g.iter().all(|v| v.is_finite())) => Some((est, grads)),
        Ok(_) => None,
        Err(e) if e.is_numerical() => {
            log::warn!("step {step}: {e}");
            None
        }
        Err(e) => return Err(e),
    };
    match result {
        Some((est, grads)) => {
            state.adam.step(state.model.params_mut(), &grads, lr, &config.adam);
            state.nonfinite_streak = 0;
            Ok(StepReport { step, estimate: Some(est), lr })
        }
        None => {
            state.nonfinite_streak += 1;
            state.skipped_steps += 1;
            log::warn!("step {step}: non-finite objective or gradient, update skipped ({} in a row)", state.nonfinite_streak);
            if state.nonfinite_streak >= MAX_NONFINITE_STREAK {
                return Err(BnnpError::NonFiniteGradient { consecutive: state.nonfinite_streak });
            }
            Ok(StepReport { step, estimate: None, lr })
        }
    }
}

/// Runs from `state.step` up to `config.steps`. `on_step` is called after
/// every step and may write checkpoints.
pub fn train(state: &mut TrainState, tasks: &[Task], config: &TrainConfig, mut on_step: impl FnMut(&TrainState, &StepReport) -> Result<()>) -> Result<Vec<StepReport>> {
    config.validate()?;
    let mut reports = Vec::with_capacity(config.steps.saturating_sub(state.step));
    while state.step < config.steps {
        let batch = sample_meta_batch(tasks, config, state.step)?;
        let report = train_step(state, &batch, config)?;
        on_step(state, &report)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Largest gap between reverse-mode and central-difference gradients over
/// all trainable entries, relative to the largest finite-difference entry.
pub fn gradient_check(model: &Bnnp, task: &Task, kind: ObjectiveKind, num_samples: usize, h: f64, seed: u64) -> Result<f64> {
    let noise = NoiseSource::new(seed);
    let tasks = std::slice::from_ref(task);
    let weights = TermWeights::default();
    let tape = Tape::new();
    let mut binder = Binder::tracking(&tape);
    let bound = model.bind(&mut binder);
    let (obj, _) = crate::objectives::meta_objective(&bound, tasks, kind, &InferOptions::new(num_samples), noise, weights)?;
    let grads = binder.gradients(obj, &model.params());
    let eval = |m: &Bnnp| evaluate(m, tasks, kind, num_samples, noise, weights).map(|e| e.value);
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for (pi, g) in grads.iter().enumerate() {
        for idx in 0..g.len() {
            if !model.params()[pi].is_trainable(idx) {
                continue;
            }
            let mut plus = model.clone();
            plus.params_mut()[pi].value[idx] += h;
            let mut minus = model.clone();
            minus.params_mut()[pi].value[idx] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max((fd - g[idx]).abs());
            scale = scale.max(fd.abs());
        }
    }
    Ok(worst / scale.max(1e-12))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub step: usize,
}

/// Serialized training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub params: Vec<ParamRecord>,
    pub adam_m: Vec<ArrayRecord>,
    pub adam_v: Vec<ArrayRecord>,
    pub adam_t: u64,
    pub nonfinite_streak: usize,
    pub skipped_steps: usize,
    pub rng: RngState,
}

/// SHA-256 of the network and training configuration.
pub fn config_hash(network: &NetworkConfig, train: &TrainConfig) -> Result<String> {
    let text = serde_json::to_string(&(network, train))?;
    Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &TrainConfig) -> Result<Self> {
        let params = state.model.params();
        let names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        let named = |ms: &[Mat], prefix: &str| -> Vec<ArrayRecord> { ms.iter().zip(&names).map(|(m, n)| ArrayRecord::new(format!("{prefix}.{n}"), m)).collect() };
        Ok(Self {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash(&state.model.config, config)?,
            network: state.model.config.clone(),
            train: config.clone(),
            params: params.iter().map(|p| ParamRecord::from(*p)).collect(),
            adam_m: named(&state.adam.m, "adam.m"),
            adam_v: named(&state.adam.v, "adam.v"),
            adam_t: state.adam.t,
            nonfinite_streak: state.nonfinite_streak,
            skipped_steps: state.skipped_steps,
            rng: RngState { seed: config.seed, step: state.step },
        })
    }

    pub fn to_state(&self) -> Result<TrainState> {
        if self.version != CHECKPOINT_VERSION {
            return Err(BnnpError::Version { found: self.version, expected: CHECKPOINT_VERSION });
        }
        if config_hash(&self.network, &self.train)? != self.config_hash {
            return Err(BnnpError::InvalidInput("checkpoint config hash does not match its configuration".into()));
        }
        let mut model = Bnnp::new(self.network.clone(), 0)?;
        {
            let mut params = model.params_mut();
            if params.len() != self.params.len() {
                return Err(BnnpError::DimensionMismatch(format!("checkpoint has {} parameters, model has {}", self.params.len(), params.len())));
            }
            for (p, rec) in params.iter_mut().zip(&self.params) {
                let loaded = Param::try_from(rec)?;
                if loaded.name != p.name || loaded.value.shape() != p.value.shape() {
                    return Err(BnnpError::DimensionMismatch(format!("checkpoint parameter '{}' does not match '{}'", loaded.name, p.name)));
                }
                **p = loaded;
            }
        }
        let load = |recs: &[ArrayRecord]| recs.iter().map(|r| r.to_mat()).collect::<Result<Vec<_>>>();
        let adam = AdamState { m: load(&self.adam_m)?, v: load(&self.adam_v)?, t: self.adam_t };
        if adam.m.len() != self.params.len() || adam.v.len() != self.params.len() {
            return Err(BnnpError::DimensionMismatch("optimizer state does not match parameters".into()));
        }
        Ok(TrainState { model, adam, step: self.rng.step, nonfinite_streak: self.nonfinite_streak, skipped_steps: self.skipped_steps })
    }
}

pub fn save_checkpoint(path: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    let ckpt = Checkpoint::from_state(state, config)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec(&ckpt)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint. With `expected`, the stored configuration must hash
/// identically.
pub fn load_checkpoint(path: &Path, expected: Option<(&NetworkConfig, &TrainConfig)>) -> Result<(TrainState, TrainConfig)> {
    let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
    let state = ckpt.to_state()?;
    if let Some((net, train)) = expected {
        if config_hash(net, train)? != ckpt.config_hash {
            return Err(BnnpError::InvalidInput("checkpoint was written with a different configuration".into()));
        }
    }
    Ok((state, ckpt.train))
}
