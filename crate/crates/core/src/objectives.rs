//! Monte Carlo training objectives built from sampled weight paths.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datagen::Task;
use crate::error::{BnnpError, Result};
use crate::linalg::{log_sum_exp, Mat};
use crate::model::{BoundBnnp, Bnnp, InferOptions};
use crate::params::Binder;
use crate::rng::NoiseSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Target posterior predictive plus context ELBO.
    PpAvi,
    /// Context ELBO.
    Avi,
    /// Target posterior predictive.
    Npml,
    /// Target expected log-likelihood plus context ELBO.
    TellAvi,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = BnnpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pp_avi" => Ok(Self::PpAvi),
            "avi" => Ok(Self::Avi),
            "npml" => Ok(Self::Npml),
            "tell_avi" => Ok(Self::TellAvi),
            other => Err(BnnpError::InvalidInput(format!("unknown objective '{other}'"))),
        }
    }
}

/// Multipliers on the posterior predictive and KL terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermWeights {
    #[serde(default = "one")]
    pub predictive: f64,
    #[serde(default = "one")]
    pub kl: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for TermWeights {
    fn default() -> Self {
        Self { predictive: 1.0, kl: 1.0 }
    }
}

/// Per-term values of an objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    /// `log (1/K) Σ_k p(Y_t | W_k)`.
    pub log_posterior_predictive: f64,
    /// `(1/K) Σ_k log p(Y_c | W_k)`.
    pub expected_log_lik_context: f64,
    /// Path-averaged sum of layerwise KL divergences.
    pub kl_sum: f64,
    /// `(1/K) Σ_k log p(Y_t | W_k)`.
    pub expected_log_lik_target: f64,
}

impl Components {
    pub(crate) fn mean(items: &[Components]) -> Components {
        let n = items.len().max(1) as f64;
        let mut out = Components::default();
        for c in items {
            out.log_posterior_predictive += c.log_posterior_predictive / n;
            out.expected_log_lik_context += c.expected_log_lik_context / n;
            out.kl_sum += c.kl_sum / n;
            out.expected_log_lik_target += c.expected_log_lik_target / n;
        }
        out
    }

    /// Context ELBO implied by the components.
    pub fn elbo(&self) -> f64 {
        self.expected_log_lik_context - self.kl_sum
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveEstimate {
    pub value: f64,
    pub components: Components,
    pub num_samples: usize,
}

/// Tape values of the per-task terms, sharing one set of weight paths.
pub struct TaskTerms<'t> {
    pub log_posterior_predictive: Var<'t>,
    pub expected_log_lik_context: Var<'t>,
    pub kl_sum: Var<'t>,
    pub expected_log_lik_target: Var<'t>,
}

impl<'t> TaskTerms<'t> {
    /// Infers `q(W | D_c)` and evaluates context and target log-likelihoods
    /// under each of the `opts.num_samples` paths.
    pub fn compute(model: &BoundBnnp<'t>, task: &Task, opts: &InferOptions, noise: NoiseSource) -> Result<Self> {
        let tape = model.log_sigma_y.tape();
        let (xc, yc, xt, yt) = (task.context_x(), task.context_y(), task.target_x(), task.target_y());
        let trace = model.infer(&xc, &yc, opts, noise)?;
        let k = opts.num_samples as f64;
        let n_c = xc.nrows();
        let x_all = stack_rows(&xc, &xt);
        let mut ll_c = Vec::with_capacity(trace.weights.len());
        let mut ll_t = Vec::with_capacity(trace.weights.len());
        for path in &trace.weights {
            if x_all.nrows() == 0 {
                ll_c.push(tape.scalar(0.0));
                ll_t.push(tape.scalar(0.0));
                continue;
            }
            let pred = model.forward(path, &x_all);
            ll_c.push(if n_c > 0 { model.log_likelihood(pred.rows_range(0, n_c), &yc) } else { tape.scalar(0.0) });
            ll_t.push(if xt.nrows() > 0 { model.log_likelihood(pred.rows_range(n_c, xt.nrows()), &yt) } else { tape.scalar(0.0) });
        }
        let lpp = tape.vcat(&ll_t).log_sum_exp().offset(-k.ln());
        Ok(Self {
            log_posterior_predictive: lpp,
            expected_log_lik_context: tape.sum_all(&ll_c).scale(1.0 / k),
            kl_sum: tape.sum_all(&trace.kl).scale(1.0 / k),
            expected_log_lik_target: tape.sum_all(&ll_t).scale(1.0 / k),
        })
    }

    /// Objective to maximise.
    pub fn objective(&self, kind: ObjectiveKind, weights: TermWeights) -> Var<'t> {
        let elbo = self.expected_log_lik_context - self.kl_sum.scale(weights.kl);
        match kind {
            ObjectiveKind::PpAvi => self.log_posterior_predictive.scale(weights.predictive) + elbo,
            ObjectiveKind::Avi => elbo,
            ObjectiveKind::Npml => self.log_posterior_predictive.scale(weights.predictive),
            ObjectiveKind::TellAvi => self.expected_log_lik_target + elbo,
        }
    }

    pub fn components(&self) -> Components {
        Components {
            log_posterior_predictive: self.log_posterior_predictive.scalar(),
            expected_log_lik_context: self.expected_log_lik_context.scalar(),
            kl_sum: self.kl_sum.scalar(),
            expected_log_lik_target: self.expected_log_lik_target.scalar(),
        }
    }
}

fn stack_rows(a: &Mat, b: &Mat) -> Mat {
    let cols = a.ncols().max(b.ncols());
    let mut out = Mat::zeros(a.nrows() + b.nrows(), cols);
    if a.nrows() > 0 {
        out.rows_mut(0, a.nrows()).copy_from(a);
    }
    if b.nrows() > 0 {
        out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    }
    out
}

/// Noise for task `index` of a meta-batch.
pub fn task_noise(noise: NoiseSource, index: usize) -> NoiseSource {
    noise.child(&[index as u64])
}

/// Meta-batch objective on the tape: the mean of per-task objectives.
pub fn meta_objective<'t>(
    model: &BoundBnnp<'t>,
    tasks: &[Task],
    kind: ObjectiveKind,
    opts: &InferOptions,
    noise: NoiseSource,
    weights: TermWeights,
) -> Result<(Var<'t>, Components)> {
    if tasks.is_empty() {
        return Err(BnnpError::InvalidInput("objective over an empty meta-batch".into()));
    }
    let tape: &'t Tape = model.log_sigma_y.tape();
    let mut values = Vec::with_capacity(tasks.len());
    let mut comps = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let terms = TaskTerms::compute(model, task, opts, task_noise(noise, i))?;
        values.push(terms.objective(kind, weights));
        comps.push(terms.components());
    }
    Ok((tape.sum_all(&values).scale(1.0 / tasks.len() as f64), Components::mean(&comps)))
}

/// Evaluates an objective averaged over `tasks` without gradients.
pub fn evaluate(model: &Bnnp, tasks: &[Task], kind: ObjectiveKind, num_samples: usize, noise: NoiseSource, weights: TermWeights) -> Result<ObjectiveEstimate> {
    if num_samples == 0 {
        return Err(BnnpError::InvalidInput("need K >= 1".into()));
    }
    let tape = Tape::new();
    let mut binder = Binder::constant(&tape);
    let bound = model.bind(&mut binder);
    let (value, components) = meta_objective(&bound, tasks, kind, &InferOptions::new(num_samples), noise, weights)?;
    Ok(ObjectiveEstimate { value: value.scalar(), components, num_samples })
}

/// ELBO of the model on a single dataset treated as context.
pub fn elbo(model: &Bnnp, x: &Mat, y: &Mat, num_samples: usize, noise: NoiseSource) -> Result<ObjectiveEstimate> {
    let task = Task::new(x.clone(), y.clone(), "elbo")?;
    evaluate(model, &[task], ObjectiveKind::Avi, num_samples, noise, TermWeights::default())
}

pub fn pp_avi(model: &Bnnp, task: &Task, num_samples: usize, noise: NoiseSource) -> Result<ObjectiveEstimate> {
    evaluate(model, std::slice::from_ref(task), ObjectiveKind::PpAvi, num_samples, noise, TermWeights::default())
}

pub fn avi(model: &Bnnp, tasks: &[Task], num_samples: usize, noise: NoiseSource) -> Result<ObjectiveEstimate> {
    evaluate(model, tasks, ObjectiveKind::Avi, num_samples, noise, TermWeights::default())
}

pub fn npml(model: &Bnnp, tasks: &[Task], num_samples: usize, noise: NoiseSource) -> Result<ObjectiveEstimate> {
    evaluate(model, tasks, ObjectiveKind::Npml, num_samples, noise, TermWeights::default())
}

pub fn tell_avi(model: &Bnnp, tasks: &[Task], num_samples: usize, noise: NoiseSource) -> Result<ObjectiveEstimate> {
    evaluate(model, tasks, ObjectiveKind::TellAvi, num_samples, noise, TermWeights::default())
}

/// Joint Gaussian log-likelihood of `y` given a prediction.
pub fn log_likelihood(y: &Mat, pred: &Mat, sigma_y: &[f64]) -> f64 {
    let mut total = 0.0;
    for n in 0..y.nrows() {
        for d in 0..y.ncols() {
            let s = sigma_y[if sigma_y.len() == 1 { 0 } else { d }];
            let r = (y[(n, d)] - pred[(n, d)]) / s;
            total += -0.5 * (2.0 * std::f64::consts::PI).ln() - s.ln() - 0.5 * r * r;
        }
    }
    total
}

/// `log (1/K) Σ_k p(y | f_k)` over predictions from `K` weight samples.
pub fn log_posterior_predictive(y: &Mat, predictions: &[Mat], sigma_y: &[f64]) -> f64 {
    let ll: Vec<f64> = predictions.iter().map(|p| log_likelihood(y, p, sigma_y)).collect();
    log_sum_exp(&ll) - (ll.len() as f64).ln()
}
