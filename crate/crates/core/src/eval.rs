//! Evaluation metrics and function-sample export.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::baselines::mean_and_stderr;
use crate::datagen::Task;
use crate::error::{BnnpError, Result};
use crate::linalg::{log_sum_exp, Mat};
use crate::model::{predict, sample_prior_weights, Bnnp, InferOptions, NetworkConfig};
use crate::objectives::{log_likelihood, log_posterior_predictive, task_noise};
use crate::params::Binder;
use crate::priors::PriorSet;
use crate::rng::NoiseSource;

/// Number of weight draws held in memory at once.
pub const EVAL_CHUNK: usize = 2048;

/// Default number of prior draws for [`lml_mc`].
pub const DEFAULT_LML_SAMPLES: usize = 1_000_000;

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// `log (1/M) Σ_m exp(ll_m)` with a jackknife standard error.
pub fn log_mean_exp_jackknife(ll: &[f64]) -> Estimate {
    let m = ll.len();
    let value = log_sum_exp(ll) - (m as f64).ln();
    if m < 2 {
        return Estimate { value, stderr: 0.0 };
    }
    let mx = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = ll.iter().map(|v| (v - mx).exp()).sum();
    let loo: Vec<f64> = ll
        .iter()
        .map(|v| {
            let rest = (total - (v - mx).exp()).max(f64::MIN_POSITIVE);
            mx + rest.ln() - ((m - 1) as f64).ln()
        })
        .collect();
    let mean = loo.iter().sum::<f64>() / m as f64;
    let var = loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (m - 1) as f64 / m as f64;
    Estimate { value, stderr: var.sqrt() }
}

/// Joint log-likelihoods of `(x, y)` under prior draws
/// `0..num_samples`, computed in chunks.
pub fn prior_log_likelihoods(prior: &PriorSet, config: &NetworkConfig, x: &Mat, y: &Mat, sigma_y: &[f64], num_samples: usize, seed: u64) -> Result<Vec<f64>> {
    let noise = NoiseSource::new(seed);
    let starts: Vec<usize> = (0..num_samples).step_by(EVAL_CHUNK).collect();
    let chunks = starts
        .par_iter()
        .map(|&start| {
            let k = EVAL_CHUNK.min(num_samples - start);
            let samples = sample_prior_weights(prior, config, k, noise, start)?;
            Ok(predict(config, &samples, x).iter().map(|p| log_likelihood(y, p, sigma_y)).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.concat())
}

/// Log marginal likelihood of `(x, y)` by simple Monte Carlo over the prior.
pub fn lml_mc(prior: &PriorSet, config: &NetworkConfig, x: &Mat, y: &Mat, sigma_y: &[f64], num_samples: usize, seed: u64) -> Result<Estimate> {
    if num_samples == 0 {
        return Err(BnnpError::InvalidInput("LML needs at least one sample".into()));
    }
    if x.nrows() != y.nrows() {
        return Err(BnnpError::InvalidInput(format!("x has {} rows, y has {}", x.nrows(), y.nrows())));
    }
    let ll = prior_log_likelihoods(prior, config, x, y, sigma_y, num_samples, seed)?;
    Ok(log_mean_exp_jackknife(&ll))
}

/// `KL[q ‖ p(W | D)] = LML - ELBO`, reported without clipping.
pub fn kl_gap(lml: f64, elbo: f64) -> f64 {
    lml - elbo
}

/// Per-datapoint log posterior predictive density of a target set.
pub fn lppd(predictions: &[Mat], targets: &Mat, sigma_y: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(BnnpError::InvalidInput("lppd needs at least one prediction".into()));
    }
    if targets.nrows() == 0 {
        return Err(BnnpError::InvalidInput("lppd needs at least one target".into()));
    }
    Ok(log_posterior_predictive(targets, predictions, sigma_y) / targets.nrows() as f64)
}

/// Mean absolute error of a predictive mean.
pub fn mae(mean: &Mat, targets: &Mat) -> Result<f64> {
    if mean.shape() != targets.shape() || targets.is_empty() {
        return Err(BnnpError::InvalidInput(format!("mae shapes {:?} and {:?}", mean.shape(), targets.shape())));
    }
    Ok((mean - targets).abs().mean())
}

/// Average of sample predictions.
pub fn predictive_mean(predictions: &[Mat]) -> Mat {
    let mut out = predictions[0].clone();
    for p in &predictions[1..] {
        out += p;
    }
    out / predictions.len() as f64
}

/// ELBO of a BNNP on a context set, per path, chunked over paths.
pub fn bnnp_elbo(model: &Bnnp, x: &Mat, y: &Mat, num_samples: usize, noise: NoiseSource) -> Result<Estimate> {
    if num_samples == 0 {
        return Err(BnnpError::InvalidInput("ELBO needs at least one sample".into()));
    }
    let mut per_path = Vec::with_capacity(num_samples);
    let mut offset = 0;
    while offset < num_samples {
        let k = EVAL_CHUNK.min(num_samples - offset);
        let tape = Tape::new();
        let mut binder = Binder::constant(&tape);
        let bound = model.bind(&mut binder);
        let opts = InferOptions { sample_offset: offset, ..InferOptions::new(k) };
        let trace = bound.infer(x, y, &opts, noise)?;
        for (path, kl) in trace.weights.iter().zip(&trace.kl) {
            let ll = if x.nrows() > 0 { bound.log_likelihood(bound.forward(path, x), y).scalar() } else { 0.0 };
            per_path.push(ll - kl.scalar());
        }
        offset += k;
    }
    let (value, stderr) = mean_and_stderr(&per_path);
    Ok(Estimate { value, stderr })
}

/// Metrics computable by [`evaluate_tasks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Per-point target log posterior predictive density.
    Lppd,
    /// Mean absolute error of the target predictive mean.
    Mae,
    /// Context-set ELBO.
    Elbo,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Lppd => "lppd",
            Metric::Mae => "mae",
            Metric::Elbo => "elbo",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = BnnpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lppd" => Ok(Metric::Lppd),
            "mae" => Ok(Metric::Mae),
            "elbo" => Ok(Metric::Elbo),
            other => Err(BnnpError::InvalidInput(format!("unknown metric '{other}' (expected lppd, mae or elbo)"))),
        }
    }
}

/// Aggregate of one metric over tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub per_task: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(metric: Metric, per_task: Vec<f64>) -> Self {
        let (mean, stderr) = if per_task.is_empty() { (f64::NAN, f64::NAN) } else { mean_and_stderr(&per_task) };
        Self { metric: metric.name().to_string(), mean, stderr, per_task }
    }
}

/// Evaluates `metrics` on every task; task `i` uses noise child `i`.
pub fn evaluate_tasks(model: &Bnnp, tasks: &[Task], metrics: &[Metric], num_samples: usize, seed: u64) -> Result<Vec<MetricSummary>> {
    if metrics.is_empty() {
        return Err(BnnpError::InvalidInput("no metrics requested".into()));
    }
    if num_samples == 0 {
        return Err(BnnpError::InvalidInput("need at least one sample".into()));
    }
    let noise = NoiseSource::new(seed);
    let sigma = model.sigma_y();
    let rows = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let tn = task_noise(noise, i);
            let (xc, yc, xt, yt) = (task.context_x(), task.context_y(), task.target_x(), task.target_y());
            let needs_pred = metrics.iter().any(|m| matches!(m, Metric::Lppd | Metric::Mae));
            let preds = if needs_pred {
                let (_, samples) = model.infer(&xc, &yc, num_samples, tn)?;
                Some(predict(&model.config, &samples, &xt))
            } else {
                None
            };
            metrics
                .iter()
                .map(|m| match m {
                    Metric::Lppd => lppd(preds.as_ref().unwrap(), &yt, &sigma),
                    Metric::Mae => mae(&predictive_mean(preds.as_ref().unwrap()), &yt),
                    Metric::Elbo => Ok(bnnp_elbo(model, &xc, &yc, num_samples, tn)?.value),
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(metrics
        .iter()
        .enumerate()
        .map(|(j, &m)| MetricSummary::from_values(m, rows.iter().map(|r| r[j]).collect()))
        .collect())
}

/// Writes function samples as CSV with columns `sample_id, x0.., y0..`,
/// ordered by sample then grid row.
pub fn export_function_samples(samples: &[Mat], grid: &Mat, path: &Path) -> Result<()> {
    for s in samples {
        if s.nrows() != grid.nrows() {
            return Err(BnnpError::InvalidInput(format!("sample has {} rows, grid has {}", s.nrows(), grid.nrows())));
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dy = samples.first().map_or(0, |s| s.ncols());
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..grid.ncols()).map(|j| format!("x{j}")));
    header.extend((0..dy).map(|j| format!("y{j}")));
    writeln!(w, "{}", header.join(","))?;
    for (k, s) in samples.iter().enumerate() {
        for n in 0..grid.nrows() {
            let mut row = vec![k.to_string()];
            row.extend(grid.row(n).iter().map(|v| format!("{v:?}")));
            row.extend(s.row(n).iter().map(|v| format!("{v:?}")));
            writeln!(w, "{}", row.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses a CSV written by [`export_function_samples`] into
/// `(sample_id, x, y)` rows.
pub fn read_function_samples(path: &Path) -> Result<Vec<(usize, Vec<f64>, Vec<f64>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| BnnpError::Format { line: 1, message: "missing header".into() })?.split(',').collect();
    let dx = header.iter().filter(|h| h.starts_with('x')).count();
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |m: String| BnnpError::Format { line: i + 2, message: m };
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.len() {
                return Err(bad(format!("expected {} cells, found {}", header.len(), cells.len())));
            }
            let id = cells[0].parse().map_err(|e| bad(format!("{e}")))?;
            let nums = cells[1..].iter().map(|c| c.parse::<f64>().map_err(|e| bad(format!("{e}")))).collect::<Result<Vec<_>>>()?;
            Ok((id, nums[..dx].to_vec(), nums[dx..].to_vec()))
        })
        .collect()
}

/// JSON file holding a list of [`MetricSummary`].
pub fn write_metrics(path: &Path, summaries: &[MetricSummary]) -> Result<()> {
    let text = serde_json::to_string_pretty(summaries).map_err(|e| BnnpError::InvalidInput(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
