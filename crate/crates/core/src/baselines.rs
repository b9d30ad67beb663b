//! Per-task Gaussian variational posteriors over all weights, fit by
//! reparameterised gradient ascent on the ELBO with an analytic KL.
//!
//! Mean-field standard deviations are stored in log space. Correlated
//! families store a lower Cholesky factor per block with a log diagonal, so
//! freezing the off-diagonal entries of a correlated family reproduces the
//! mean-field parameterisation exactly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{decode_cholesky, Tape, Var};
use crate::error::{BnnpError, Result};
use crate::gaussian::{kl_divergence, GaussianFactor, PriorRoot, Structure};
use crate::linalg::{block_diag, cholesky_jittered, Mat, Vector};
use crate::model::{forward_weights, gaussian_log_likelihood, predict, NetworkConfig, WeightSample};
use crate::objectives::log_likelihood;
use crate::params::{Binder, Param, Parameterised};
use crate::priors::{encode_covariance, log_chol_floor, PriorSet};
use crate::rng::NoiseSource;
use crate::trainer::{lr_at, AdamConfig, AdamState, LrSchedule, MAX_NONFINITE_STREAK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MeanField,
    UnitwiseCorrelated,
    LayerwiseCorrelated,
    FullyCorrelated,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::MeanField, Family::UnitwiseCorrelated, Family::LayerwiseCorrelated, Family::FullyCorrelated];

    pub fn short_name(self) -> &'static str {
        match self {
            Family::MeanField => "mfvi",
            Family::UnitwiseCorrelated => "ucvi",
            Family::LayerwiseCorrelated => "lcvi",
            Family::FullyCorrelated => "fcvi",
        }
    }

    /// Default learning-rate schedule.
    pub fn default_lr(self) -> LrSchedule {
        match self {
            Family::FullyCorrelated => LrSchedule { start: 5e-4, end: 5e-5 },
            _ => LrSchedule { start: 5e-3, end: 5e-5 },
        }
    }
}

impl std::str::FromStr for Family {
    type Err = BnnpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mfvi" | "mean_field" => Ok(Family::MeanField),
            "ucvi" | "unitwise_correlated" => Ok(Family::UnitwiseCorrelated),
            "lcvi" | "layerwise_correlated" => Ok(Family::LayerwiseCorrelated),
            "fcvi" | "fully_correlated" => Ok(Family::FullyCorrelated),
            other => Err(BnnpError::InvalidInput(format!("unknown variational family '{other}'"))),
        }
    }
}

/// Gaussian `q(W)` as a list of contiguous blocks of the weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    pub family: Family,
    pub shapes: Vec<(usize, usize)>,
    /// Block means, `n_b x 1`.
    pub means: Vec<Param>,
    /// Log standard deviations (`n_b x 1`, mean field) or raw Cholesky
    /// factors (`n_b x n_b`).
    pub scales: Vec<Param>,
}

impl VariationalPosterior {
    /// Copy of `prior` in the given family. Prior correlations that the
    /// family cannot express are dropped.
    pub fn at_prior(family: Family, prior: &PriorSet) -> Result<Self> {
        Self::from_factor(family, &prior.shapes, &prior.global_factor())
    }

    /// The same distribution in `family`, dropping correlations that the
    /// target family cannot express. Exact when `family` is at least as rich.
    pub fn convert(&self, family: Family) -> Result<Self> {
        Self::from_factor(family, &self.shapes, &self.factor())
    }

    fn from_factor(family: Family, shapes: &[(usize, usize)], factor: &GaussianFactor) -> Result<Self> {
        let cov = factor.dense_covariance();
        let sizes = block_sizes(family, shapes);
        let mut means = Vec::with_capacity(sizes.len());
        let mut scales = Vec::with_capacity(sizes.len());
        let mut o = 0;
        for (b, &n) in sizes.iter().enumerate() {
            means.push(Param::new(format!("q.mean.{b}"), Mat::from_column_slice(n, 1, &factor.mean.as_slice()[o..o + n])));
            let scale = if family == Family::MeanField {
                Mat::from_fn(n, 1, |i, _| 0.5 * cov[(o + i, o + i)].ln())
            } else {
                encode_covariance(&cov.view((o, o), (n, n)).into_owned())?
            };
            scales.push(Param::new(format!("q.scale.{b}"), scale));
            o += n;
        }
        Ok(Self { family, shapes: shapes.to_vec(), means, scales })
    }

    pub fn num_weights(&self) -> usize {
        self.shapes.iter().map(|(d, u)| d * u).sum()
    }

    /// Restricts training of correlated families to the Cholesky diagonal.
    pub fn freeze_off_diagonal(&mut self) {
        if self.family == Family::MeanField {
            return;
        }
        for s in &mut self.scales {
            let n = s.value.nrows();
            s.mask = Some((0..n * n).map(|idx| idx % n == idx / n).collect());
        }
    }

    /// Block Cholesky factors in `f64`.
    fn roots(&self) -> Vec<Mat> {
        self.scales
            .iter()
            .map(|s| {
                if self.family == Family::MeanField {
                    Mat::from_diagonal(&Vector::from_iterator(s.value.nrows(), s.value.iter().map(|&v| v.max(log_chol_floor()).exp())))
                } else {
                    decode_cholesky(&s.value, log_chol_floor())
                }
            })
            .collect()
    }

    /// Joint factor over all weights.
    pub fn factor(&self) -> GaussianFactor {
        let mean = Vector::from_iterator(self.num_weights(), self.means.iter().flat_map(|m| m.value.iter().copied()));
        let sizes = self.shapes.iter().map(|(d, u)| d * u).collect();
        if self.family == Family::MeanField {
            let var = self.roots().iter().flat_map(|r| r.diagonal().iter().map(|v| v * v).collect::<Vec<_>>()).collect::<Vec<_>>();
            return GaussianFactor::diagonal(mean, Vector::from_vec(var));
        }
        let covs: Vec<Mat> = self.roots().iter().map(|l| l * l.transpose()).collect();
        GaussianFactor::global(mean, block_diag(&covs), sizes)
    }

    /// `KL[q ‖ prior]`.
    pub fn kl_to(&self, prior: &PriorSet) -> Result<f64> {
        kl_divergence(&self.factor(), &prior.global_factor())
    }

    /// `num_samples` weight draws; draw `k` uses noise key `offset + k`.
    pub fn sample_weights(&self, num_samples: usize, noise: NoiseSource, offset: usize) -> WeightSample {
        let roots = self.roots();
        let n = self.num_weights();
        let weights = (0..num_samples)
            .map(|k| {
                let eps = noise.normal(&[(offset + k) as u64, u64::MAX], n, 1);
                let mut w = Vec::with_capacity(n);
                let mut o = 0;
                for (m, l) in self.means.iter().zip(&roots) {
                    let nb = l.nrows();
                    let z = l * eps.rows(o, nb) + &m.value;
                    w.extend(z.iter().copied());
                    o += nb;
                }
                split_layers(&self.shapes, &w)
            })
            .collect();
        WeightSample { weights }
    }
}

impl Parameterised for VariationalPosterior {
    fn params(&self) -> Vec<&Param> {
        self.means.iter().chain(&self.scales).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.means.iter_mut().chain(self.scales.iter_mut()).collect()
    }
}

fn block_sizes(family: Family, shapes: &[(usize, usize)]) -> Vec<usize> {
    match family {
        Family::MeanField | Family::LayerwiseCorrelated => shapes.iter().map(|(d, u)| d * u).collect(),
        Family::UnitwiseCorrelated => shapes.iter().flat_map(|&(d, u)| std::iter::repeat_n(d, u)).collect(),
        Family::FullyCorrelated => vec![shapes.iter().map(|(d, u)| d * u).sum()],
    }
}

fn split_layers(shapes: &[(usize, usize)], w: &[f64]) -> Vec<Mat> {
    let mut o = 0;
    shapes
        .iter()
        .map(|&(d, u)| {
            let m = Mat::from_column_slice(d, u, &w[o..o + d * u]);
            o += d * u;
            m
        })
        .collect()
}

/// Prior in the form used by the analytic KL.
enum PriorForKl {
    Diagonal { mean: Vector, std: Vector },
    Dense { mean: Vector, chol: Mat },
}

impl PriorForKl {
    fn new(prior: &PriorSet) -> Result<Self> {
        let g = prior.global_factor();
        if prior.structure == Structure::Diagonal {
            let std = g.dense_covariance().diagonal().map(f64::sqrt);
            Ok(PriorForKl::Diagonal { mean: g.mean, std })
        } else {
            let (chol, _) = cholesky_jittered(&g.dense_covariance(), "prior covariance")?;
            Ok(PriorForKl::Dense { mean: g.mean, chol })
        }
    }
}

struct BoundQ<'t> {
    blocks: Vec<(Var<'t>, PriorRoot<'t>)>,
}

impl VariationalPosterior {
    fn bind<'t>(&self, binder: &mut Binder<'t>) -> BoundQ<'t> {
        let means: Vec<Var<'t>> = self.means.iter().map(|p| binder.bind(p)).collect();
        let scales: Vec<Var<'t>> = self.scales.iter().map(|p| binder.bind(p)).collect();
        let blocks = means
            .into_iter()
            .zip(scales)
            .map(|(m, s)| {
                let root = if self.family == Family::MeanField {
                    PriorRoot::Diagonal(s.clamp(log_chol_floor(), f64::INFINITY).exp())
                } else {
                    PriorRoot::Dense(s.chol_decode(log_chol_floor()))
                };
                (m, root)
            })
            .collect();
        BoundQ { blocks }
    }
}

impl<'t> BoundQ<'t> {
    fn kl(&self, prior: &PriorForKl) -> Var<'t> {
        let tape = self.blocks[0].0.tape();
        match prior {
            PriorForKl::Diagonal { mean, std } => {
                let mut o = 0;
                let mut parts = Vec::with_capacity(self.blocks.len());
                for (m, root) in &self.blocks {
                    let n = m.rows();
                    let mp = tape.constant(Mat::from_column_slice(n, 1, &mean.as_slice()[o..o + n]));
                    let inv = tape.constant(Mat::from_fn(n, 1, |i, _| 1.0 / std[o + i]));
                    let log_sp: f64 = std.as_slice()[o..o + n].iter().map(|s| s.ln()).sum();
                    let quad = (*m - mp).hadamard(inv).sum_squares();
                    let part = match *root {
                        PriorRoot::Diagonal(s) => {
                            let ratio = s.hadamard(inv);
                            (ratio.sum_squares() + quad).offset(-(n as f64)).scale(0.5) - ratio.ln().sum()
                        }
                        PriorRoot::Dense(l) => (l.scale_rows(inv).sum_squares() + quad).offset(-(n as f64)).scale(0.5) - l.log_diag_sum().offset(-log_sp),
                    };
                    parts.push(part);
                    o += n;
                }
                tape.sum_all(&parts)
            }
            PriorForKl::Dense { mean, chol } => {
                let roots: Vec<Var<'t>> = self
                    .blocks
                    .iter()
                    .map(|(_, r)| match *r {
                        PriorRoot::Diagonal(s) => s.diag_embed(),
                        PriorRoot::Dense(l) => l,
                    })
                    .collect();
                let lq = tape.block_diag(&roots);
                let mq = tape.vcat(&self.blocks.iter().map(|(m, _)| *m).collect::<Vec<_>>());
                let lp = tape.constant(chol.clone());
                let n = mean.len() as f64;
                let delta = mq - tape.constant(Mat::from_column_slice(mean.len(), 1, mean.as_slice()));
                let log_det_p: f64 = chol.diagonal().iter().map(|v| v.ln()).sum();
                (lp.solve_lower(lq).sum_squares() + lp.solve_lower(delta).sum_squares()).offset(-n).scale(0.5) - lq.log_diag_sum().offset(-log_det_p)
            }
        }
    }

    /// `n x K` weight draws.
    fn samples(&self, eps: &Mat) -> Var<'t> {
        let tape = self.blocks[0].0.tape();
        let mut o = 0;
        let parts: Vec<Var<'t>> = self
            .blocks
            .iter()
            .map(|(m, root)| {
                let n = m.rows();
                let e = tape.constant(eps.rows(o, n).into_owned());
                o += n;
                root.apply(e).add_col(*m)
            })
            .collect();
        tape.vcat(&parts)
    }
}

/// Optimisation settings for [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub steps: usize,
    pub num_samples: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl FitConfig {
    /// 20000 steps with 8 samples and the family's default schedule.
    pub fn for_family(family: Family) -> Self {
        Self { steps: 20_000, num_samples: 8, lr: family.default_lr(), seed: 0, adam: AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub posterior: VariationalPosterior,
    /// Single-step ELBO estimates, NaN where a step was skipped.
    pub trace: Vec<f64>,
    pub skipped_steps: usize,
}

fn elbo_and_gradients(q: &VariationalPosterior, x: &Mat, y: &Mat, prior: &PriorForKl, net: &NetworkConfig, log_sigma: f64, eps: &Mat) -> (f64, Vec<Mat>) {
    let tape = Tape::new();
    let mut binder = Binder::tracking(&tape);
    let bound = q.bind(&mut binder);
    let kl = bound.kl(prior);
    let k = eps.ncols();
    let elbo = if x.nrows() == 0 {
        -kl
    } else {
        let w = bound.samples(eps);
        let ls = tape.scalar(log_sigma);
        let lls: Vec<Var> = (0..k)
            .map(|j| {
                let col = w.column(j);
                let mut o = 0;
                let layers: Vec<Var> = q
                    .shapes
                    .iter()
                    .map(|&(d, u)| {
                        let v = col.rows_range(o, d * u).reshape(d, u);
                        o += d * u;
                        v
                    })
                    .collect();
                gaussian_log_likelihood(forward_weights(net, &layers, x), y, ls)
            })
            .collect();
        tape.sum_all(&lls).scale(1.0 / k as f64) - kl
    };
    let grads = binder.gradients(elbo, &q.params());
    (elbo.scalar(), grads)
}

/// Fits `posterior` to `(x, y)` in place of a fresh prior copy.
pub fn fit_from(mut posterior: VariationalPosterior, x: &Mat, y: &Mat, prior: &PriorSet, net: &NetworkConfig, sigma_y: f64, cfg: &FitConfig) -> Result<FitResult> {
    if !(sigma_y > 0.0) {
        return Err(BnnpError::InvalidInput("sigma_y must be positive".into()));
    }
    if cfg.num_samples == 0 {
        return Err(BnnpError::InvalidInput("need at least one sample".into()));
    }
    let kl_prior = PriorForKl::new(prior)?;
    let noise = NoiseSource::new(cfg.seed);
    let n = posterior.num_weights();
    let mut adam = AdamState::new(&posterior.params());
    let mut trace = Vec::with_capacity(cfg.steps);
    let (mut streak, mut skipped) = (0, 0);
    for step in 0..cfg.steps {
        let eps = noise.normal(&[step as u64], n, cfg.num_samples);
        let (value, grads) = elbo_and_gradients(&posterior, x, y, &kl_prior, net, sigma_y.ln(), &eps);
        if value.is_finite() && grads.iter().all(|g| g.iter().all(|v| v.is_finite())) {
            adam.step(posterior.params_mut(), &grads, lr_at(step, &cfg.lr, cfg.steps), &cfg.adam);
            streak = 0;
            trace.push(value);
        } else {
            streak += 1;
            skipped += 1;
            log::warn!("{} step {step}: non-finite ELBO or gradient, update skipped", posterior.family.short_name());
            if streak >= MAX_NONFINITE_STREAK {
                return Err(BnnpError::NonFiniteGradient { consecutive: streak });
            }
            trace.push(f64::NAN);
        }
    }
    Ok(FitResult { posterior, trace, skipped_steps: skipped })
}

/// Fits a family initialised at the prior.
pub fn fit(family: Family, x: &Mat, y: &Mat, prior: &PriorSet, net: &NetworkConfig, sigma_y: f64, cfg: &FitConfig) -> Result<FitResult> {
    fit_from(VariationalPosterior::at_prior(family, prior)?, x, y, prior, net, sigma_y, cfg)
}

/// Monte Carlo ELBO with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub stderr: f64,
    pub kl: f64,
}

/// Expected log-likelihood over `num_samples` draws minus the exact KL.
pub fn elbo_of(posterior: &VariationalPosterior, x: &Mat, y: &Mat, prior: &PriorSet, net: &NetworkConfig, sigma_y: f64, num_samples: usize, seed: u64) -> Result<ElboEstimate> {
    if num_samples == 0 {
        return Err(BnnpError::InvalidInput("need at least one sample".into()));
    }
    let kl = posterior.kl_to(prior)?;
    let noise = NoiseSource::new(seed);
    let chunk = 1024;
    let mut lls = Vec::with_capacity(num_samples);
    let mut offset = 0;
    while offset < num_samples {
        let k = chunk.min(num_samples - offset);
        let samples = posterior.sample_weights(k, noise, offset);
        lls.extend(predict(net, &samples, x).iter().map(|p| log_likelihood(y, p, &[sigma_y])));
        offset += k;
    }
    let (mean, stderr) = mean_and_stderr(&lls);
    Ok(ElboEstimate { value: mean - kl, stderr, kl })
}

pub(crate) fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn net(widths: Vec<usize>) -> NetworkConfig {
        NetworkConfig { activation: Activation::Tanh, ..NetworkConfig::new(widths) }
    }

    fn blr_log_evidence(prior: &PriorSet, cfg: &NetworkConfig, x: &Mat, y: &Mat, sigma: f64) -> f64 {
        let g = prior.global_factor();
        let phi = crate::model::hidden_features(cfg, &[], x);
        let cov = &phi * g.dense_covariance() * phi.transpose() + Mat::identity(x.nrows(), x.nrows()) * sigma * sigma;
        let r = y - &phi * &g.mean;
        let chol = cov.cholesky().unwrap();
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (r.dot(&chol.solve(&r)) + logdet + x.nrows() as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    #[test]
    fn initialised_at_prior() {
        let prior = PriorSet::standard_init(&[1, 3, 1], true, Structure::Diagonal).unwrap();
        for f in Family::ALL {
            let q = VariationalPosterior::at_prior(f, &prior).unwrap();
            assert!(q.kl_to(&prior).unwrap().abs() < 1e-12, "{f:?}");
            assert!((q.factor().dense_covariance() - prior.global_factor().dense_covariance()).amax() < 1e-14);
        }
    }

    #[test]
    fn tape_kl_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let diag = PriorSet::standard_init(&[1, 2, 1], true, Structure::Diagonal).unwrap();
        let mut dense = PriorSet::standard_init(&[1, 2, 1], true, Structure::GlobalFull).unwrap();
        let n = dense.num_weights();
        for j in 0..n {
            for i in j + 1..n {
                dense.scales[0].value[(i, j)] = 0.2 * randn(&mut rng, 1, 1)[(0, 0)];
            }
        }
        for f in Family::ALL {
            let mut q = VariationalPosterior::at_prior(f, &diag).unwrap();
            for p in q.params_mut() {
                for v in p.value.iter_mut() {
                    *v += 0.3 * randn(&mut rng, 1, 1)[(0, 0)];
                }
            }
            for prior in [&diag, &dense] {
                let tape = Tape::new();
                let mut b = Binder::constant(&tape);
                let kl = q.bind(&mut b).kl(&PriorForKl::new(prior).unwrap()).scalar();
                let exact = q.kl_to(prior).unwrap();
                assert!((kl - exact).abs() < 1e-10 * exact.abs().max(1.0), "{f:?}: {kl} vs {exact}");
            }
        }
    }

    #[test]
    fn zero_context_stays_at_prior() {
        let prior = PriorSet::standard_init(&[1, 3, 1], true, Structure::Diagonal).unwrap();
        let cfg = net(vec![1, 3, 1]);
        for f in Family::ALL {
            let fit_cfg = FitConfig { steps: 200, ..FitConfig::for_family(f) };
            let r = fit(f, &Mat::zeros(0, 1), &Mat::zeros(0, 1), &prior, &cfg, 0.1, &fit_cfg).unwrap();
            assert!(r.posterior.kl_to(&prior).unwrap() < 0.01, "{f:?}");
        }
    }

    #[test]
    fn single_layer_fcvi_reaches_evidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prior = PriorSet::standard_init(&[1, 1], true, Structure::Diagonal).unwrap();
        let cfg = net(vec![1, 1]);
        let x = randn(&mut rng, 15, 1);
        let y = x.map(|v| 0.8 * v + 0.1) + randn(&mut rng, 15, 1) * 0.3;
        let fit_cfg = FitConfig { steps: 4000, lr: LrSchedule { start: 1e-2, end: 1e-4 }, ..FitConfig::for_family(Family::FullyCorrelated) };
        let r = fit(Family::FullyCorrelated, &x, &y, &prior, &cfg, 0.3, &fit_cfg).unwrap();
        let est = elbo_of(&r.posterior, &x, &y, &prior, &cfg, 0.3, 100_000, 9).unwrap();
        let lml = blr_log_evidence(&prior, &cfg, &x, &y, 0.3);
        assert!((lml - est.value).abs() < 0.05, "elbo {} lml {lml}", est.value);
    }

    #[test]
    fn frozen_unitwise_reproduces_mean_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prior = PriorSet::standard_init(&[1, 3, 1], true, Structure::Diagonal).unwrap();
        let cfg = net(vec![1, 3, 1]);
        let x = randn(&mut rng, 10, 1);
        let y = x.map(f64::sin);
        let fit_cfg = FitConfig { steps: 300, seed: 4, ..FitConfig::for_family(Family::MeanField) };
        let mf = fit(Family::MeanField, &x, &y, &prior, &cfg, 0.1, &fit_cfg).unwrap();
        let mut uc = VariationalPosterior::at_prior(Family::UnitwiseCorrelated, &prior).unwrap();
        uc.freeze_off_diagonal();
        let uc = fit_from(uc, &x, &y, &prior, &cfg, 0.1, &fit_cfg).unwrap();
        for (a, b) in mf.trace.iter().zip(&uc.trace) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn elbo_of_reductions() {
        let prior = PriorSet::standard_init(&[1, 1], true, Structure::Diagonal).unwrap();
        let cfg = net(vec![1, 1]);
        let q = VariationalPosterior::at_prior(Family::MeanField, &prior).unwrap();
        let x = Mat::from_column_slice(2, 1, &[0.5, -1.0]);
        let y = Mat::from_column_slice(2, 1, &[0.1, 0.2]);
        let one = elbo_of(&q, &x, &y, &prior, &cfg, 1.0, 1, 3).unwrap();
        let w = q.sample_weights(1, NoiseSource::new(3), 0);
        let ll = log_likelihood(&y, &predict(&cfg, &w, &x)[0], &[1.0]);
        assert!((one.value - ll).abs() < 1e-12);
        assert_eq!(one.kl, 0.0);
    }

    #[test]
    fn conversion_to_richer_family_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prior = PriorSet::standard_init(&[1, 2, 1], true, Structure::Diagonal).unwrap();
        let mut q = VariationalPosterior::at_prior(Family::UnitwiseCorrelated, &prior).unwrap();
        for p in q.params_mut() {
            for v in p.value.iter_mut() {
                *v += 0.2 * randn(&mut rng, 1, 1)[(0, 0)];
            }
        }
        let cov = q.factor().dense_covariance();
        for f in [Family::UnitwiseCorrelated, Family::LayerwiseCorrelated, Family::FullyCorrelated] {
            let c = q.convert(f).unwrap();
            assert!((c.factor().dense_covariance() - &cov).amax() < 1e-12, "{f:?}");
            assert!((c.kl_to(&prior).unwrap() - q.kl_to(&prior).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn family_names_parse() {
        for f in Family::ALL {
            assert_eq!(f.short_name().parse::<Family>().unwrap(), f);
        }
        assert!("givi".parse::<Family>().is_err());
    }
}
