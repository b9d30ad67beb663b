//! Built-in experiment recipes shared by the CLI and the acceptance tests.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{elbo_of, fit, Family, FitConfig};
use crate::datagen::{generate, GeneratorSpec, Task};
use crate::error::{BnnpError, Result};
use crate::eval::{bnnp_elbo, kl_gap, lml_mc, Estimate, DEFAULT_LML_SAMPLES};
use crate::gaussian::Structure;
use crate::layer::Activation;
use crate::model::{Bnnp, NetworkConfig};
use crate::objectives::ObjectiveKind;
use crate::priors::PriorSet;
use crate::rng::{derive_seed, NoiseSource};
use crate::trainer::{train, LrSchedule, TrainConfig, TrainState};

/// Approximate posterior fitted in the KL-gap study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlGapMethod {
    Mfvi,
    Ucvi,
    Lcvi,
    Fcvi,
    /// A BNNP trained on the single task with the prior and noise fixed.
    Bnnp,
}

impl KlGapMethod {
    pub const ALL: [KlGapMethod; 5] = [KlGapMethod::Mfvi, KlGapMethod::Ucvi, KlGapMethod::Lcvi, KlGapMethod::Fcvi, KlGapMethod::Bnnp];

    pub fn name(self) -> &'static str {
        match self {
            KlGapMethod::Mfvi => "mfvi",
            KlGapMethod::Ucvi => "ucvi",
            KlGapMethod::Lcvi => "lcvi",
            KlGapMethod::Fcvi => "fcvi",
            KlGapMethod::Bnnp => "bnnp",
        }
    }

    fn family(self) -> Option<Family> {
        match self {
            KlGapMethod::Mfvi => Some(Family::MeanField),
            KlGapMethod::Ucvi => Some(Family::UnitwiseCorrelated),
            KlGapMethod::Lcvi => Some(Family::LayerwiseCorrelated),
            KlGapMethod::Fcvi => Some(Family::FullyCorrelated),
            KlGapMethod::Bnnp => None,
        }
    }
}

/// `n` points evenly spaced in log10 space on `[10^a, 10^b]`.
pub fn logspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![10f64.powf(a)],
        _ => (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect(),
    }
}

fn default_grid() -> Vec<f64> {
    logspace(-2.0, 1.0, 8)
}
fn default_methods() -> Vec<KlGapMethod> {
    KlGapMethod::ALL.to_vec()
}
fn default_seeds() -> Vec<u64> {
    vec![21, 42, 69]
}
fn default_lml_samples() -> usize {
    DEFAULT_LML_SAMPLES
}
fn default_elbo_samples() -> usize {
    10_000
}
fn default_steps() -> usize {
    20_000
}
fn default_k() -> usize {
    8
}
fn default_bnnp_lr() -> LrSchedule {
    LrSchedule { start: 5e-3, end: 5e-5 }
}
fn default_hidden() -> Vec<usize> {
    vec![50, 50]
}

/// Settings of the KL-gap study. The network architecture is the one that
/// generates the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlGapConfig {
    #[serde(default = "GeneratorSpec::bnn_prior")]
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub task_seed: u64,
    #[serde(default = "default_grid")]
    pub sigma_grid: Vec<f64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<KlGapMethod>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_lml_samples")]
    pub lml_samples: usize,
    #[serde(default = "default_elbo_samples")]
    pub elbo_samples: usize,
    #[serde(default = "default_steps")]
    pub baseline_steps: usize,
    /// Overrides the per-family default schedule.
    #[serde(default)]
    pub baseline_lr: Option<LrSchedule>,
    #[serde(default = "default_steps")]
    pub bnnp_steps: usize,
    #[serde(default = "default_bnnp_lr")]
    pub bnnp_lr: LrSchedule,
    #[serde(default = "default_hidden")]
    pub inference_hidden: Vec<usize>,
    /// Monte Carlo samples per training step.
    #[serde(default = "default_k")]
    pub num_samples: usize,
}

impl Default for KlGapConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl KlGapConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        let bad = |m: &str| Err(BnnpError::InvalidInput(format!("klgap config: {m}")));
        if self.generator.widths.len() < 2 {
            return bad("generator.widths must describe a network");
        }
        if self.sigma_grid.is_empty() || self.sigma_grid.iter().any(|s| !(*s > 0.0)) {
            return bad("sigma_grid must be non-empty and positive");
        }
        if self.methods.is_empty() || self.seeds.is_empty() {
            return bad("methods and seeds must be non-empty");
        }
        if self.lml_samples == 0 || self.elbo_samples == 0 || self.num_samples == 0 {
            return bad("sample counts must be positive");
        }
        if self.baseline_steps == 0 || self.bnnp_steps == 0 {
            return bad("step counts must be positive");
        }
        Ok(())
    }

    /// Network matching the generator with a diagonal prior.
    pub fn network(&self, sigma_y: f64) -> NetworkConfig {
        NetworkConfig {
            activation: self.generator.activation,
            bias: self.generator.bias,
            structure: Structure::Diagonal,
            log_sigma_y: vec![sigma_y.ln()],
            learn_sigma_y: false,
            learn_prior: false,
            inference_hidden: self.inference_hidden.clone(),
            inference_activation: Activation::Relu,
            ..NetworkConfig::new(self.generator.widths.clone())
        }
    }

    pub fn prior(&self) -> Result<PriorSet> {
        PriorSet::standard_init(&self.generator.widths, self.generator.bias, Structure::Diagonal)
    }

    pub fn task(&self) -> Result<Task> {
        generate(&self.generator, self.task_seed)
    }
}

/// One output row of the KL-gap study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlGapRow {
    pub method: KlGapMethod,
    pub seed: u64,
    pub sigma_y: f64,
    pub elbo: f64,
    pub elbo_stderr: f64,
    pub lml: f64,
    pub lml_stderr: f64,
    pub kl: f64,
}

pub const KLGAP_CSV_HEADER: &str = "method,seed,sigma_y,elbo,elbo_stderr,lml,lml_stderr,kl";

impl KlGapRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.method.name(),
            self.seed,
            self.sigma_y,
            self.elbo,
            self.elbo_stderr,
            self.lml,
            self.lml_stderr,
            self.kl
        )
    }
}

/// ELBO of one method at one noise level and seed.
pub fn fit_and_score(cfg: &KlGapConfig, method: KlGapMethod, task: &Task, sigma_y: f64, seed: u64) -> Result<Estimate> {
    let net = cfg.network(sigma_y);
    let eval_seed = derive_seed(seed, &[1]);
    match method.family() {
        Some(family) => {
            let prior = cfg.prior()?;
            let fit_cfg = FitConfig {
                steps: cfg.baseline_steps,
                num_samples: cfg.num_samples,
                lr: cfg.baseline_lr.unwrap_or(family.default_lr()),
                seed,
                ..FitConfig::for_family(family)
            };
            let fitted = fit(family, &task.x, &task.y, &prior, &net, sigma_y, &fit_cfg)?;
            let e = elbo_of(&fitted.posterior, &task.x, &task.y, &prior, &net, sigma_y, cfg.elbo_samples, eval_seed)?;
            Ok(Estimate { value: e.value, stderr: e.stderr })
        }
        None => {
            let model = Bnnp::new(net, derive_seed(seed, &[0]))?;
            let train_cfg = TrainConfig {
                meta_batch: 1,
                num_samples: cfg.num_samples,
                objective: ObjectiveKind::Avi,
                lr: cfg.bnnp_lr,
                seed,
                context_range: (1.0, 1.0),
                ..TrainConfig::new(cfg.bnnp_steps)
            };
            let mut state = TrainState::new(model);
            train(&mut state, std::slice::from_ref(task), &train_cfg, |_, _| Ok(()))?;
            bnnp_elbo(&state.model, &task.x, &task.y, cfg.elbo_samples, NoiseSource::new(eval_seed))
        }
    }
}

/// Runs every (noise level, method, seed) combination; `on_row` sees rows
/// as they finish. Rows are returned in grid, method, seed order.
pub fn run_klgap(cfg: &KlGapConfig, on_row: impl Fn(&KlGapRow) + Sync) -> Result<Vec<KlGapRow>> {
    cfg.validate()?;
    let task = cfg.task()?;
    let prior = cfg.prior()?;
    let mut rows = Vec::new();
    for (gi, &sigma_y) in cfg.sigma_grid.iter().enumerate() {
        let lml = lml_mc(&prior, &cfg.network(sigma_y), &task.x, &task.y, &[sigma_y], cfg.lml_samples, derive_seed(cfg.task_seed, &[1, gi as u64]))?;
        let jobs: Vec<(KlGapMethod, u64)> = cfg.methods.iter().flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
        let chunk = jobs
            .par_iter()
            .map(|&(method, seed)| {
                let elbo = fit_and_score(cfg, method, &task, sigma_y, seed)?;
                let row = KlGapRow { method, seed, sigma_y, elbo: elbo.value, elbo_stderr: elbo.stderr, lml: lml.value, lml_stderr: lml.stderr, kl: kl_gap(lml.value, elbo.value) };
                on_row(&row);
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(chunk);
    }
    Ok(rows)
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logspace_endpoints() {
        let g = logspace(-2.0, 1.0, 8);
        assert_eq!(g.len(), 8);
        assert!((g[0] - 0.01).abs() < 1e-15 && (g[7] - 10.0).abs() < 1e-12);
        assert!(g.windows(2).all(|w| (w[1] / w[0] - 10f64.powf(3.0 / 7.0)).abs() < 1e-12));
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn tiny_study_has_one_row_per_combination() {
        let cfg = KlGapConfig {
            generator: GeneratorSpec { widths: vec![1, 3, 1], n_range: (5, 5), ..GeneratorSpec::bnn_prior() },
            sigma_grid: vec![0.3],
            seeds: vec![1, 2],
            lml_samples: 500,
            elbo_samples: 50,
            baseline_steps: 5,
            bnnp_steps: 5,
            inference_hidden: vec![4],
            ..KlGapConfig::default()
        };
        let rows = run_klgap(&cfg, |_| ()).unwrap();
        assert_eq!(rows.len(), 5 * 2);
        for r in &rows {
            assert!(r.elbo.is_finite() && (r.kl - (r.lml - r.elbo)).abs() < 1e-12);
            assert_eq!(r.to_csv().split(',').count(), KLGAP_CSV_HEADER.split(',').count());
        }
        assert_eq!(rows, run_klgap(&cfg, |_| ()).unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<KlGapConfig>("{\"sigma\": [0.1]}").is_err());
    }
}
