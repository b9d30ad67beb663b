//! The stacked model: layerwise conditional posteriors over all weights,
//! sample paths, predictions, minibatched and online inference.
//!
//! Layer 0 sees the raw inputs, so its posterior is shared by every sample
//! path. Each later layer's posterior depends on the weights sampled for
//! the layers below it, so it is built once per path.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{BnnpError, Result};
use crate::gaussian::{Evidence, Structure};
use crate::layer::{concat_columns, layer_evidence, sequential_posterior, Activation, BoundNet, InferenceNet, LayerPosterior, LayerPosteriorVar, PseudoLikelihoodBatch};
use crate::linalg::{Mat, Vector};
use crate::params::{Binder, Param, Parameterised};
use crate::priors::{BoundPrior, PriorSet};
use crate::rng::{derive_seed, NoiseSource};

fn default_activation() -> Activation {
    Activation::Relu
}
fn default_true() -> bool {
    true
}
fn default_structure() -> Structure {
    Structure::UnitwiseFull
}
fn default_log_sigma_y() -> Vec<f64> {
    vec![0.1f64.ln()]
}
fn default_inference_hidden() -> Vec<usize> {
    vec![50, 50]
}
fn default_learnability() -> f64 {
    1.0
}

/// Architecture and likelihood of a BNNP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// `[d_0, ..., d_L]`.
    pub widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Append a constant-1 input to every layer.
    #[serde(default = "default_true")]
    pub bias: bool,
    #[serde(default = "default_structure")]
    pub structure: Structure,
    /// Observation noise, one shared value or one per output.
    #[serde(default = "default_log_sigma_y")]
    pub log_sigma_y: Vec<f64>,
    #[serde(default = "default_true")]
    pub learn_sigma_y: bool,
    /// Whether prior parameters are meta-learned.
    #[serde(default = "default_true")]
    pub learn_prior: bool,
    /// Proportion of weights whose prior parameters are learnable.
    #[serde(default = "default_learnability")]
    pub prior_learnability: f64,
    #[serde(default = "default_inference_hidden")]
    pub inference_hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub inference_activation: Activation,
}

impl NetworkConfig {
    pub fn new(widths: Vec<usize>) -> Self {
        Self {
            widths,
            activation: default_activation(),
            bias: true,
            structure: default_structure(),
            log_sigma_y: default_log_sigma_y(),
            learn_sigma_y: true,
            learn_prior: true,
            prior_learnability: 1.0,
            inference_hidden: default_inference_hidden(),
            inference_activation: default_activation(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(BnnpError::InvalidInput(format!("widths must have at least two positive entries, got {:?}", self.widths)));
        }
        let out = *self.widths.last().expect("non-empty");
        if self.log_sigma_y.len() != 1 && self.log_sigma_y.len() != out {
            return Err(BnnpError::InvalidInput(format!(
                "log_sigma_y needs 1 or {out} entries, got {}",
                self.log_sigma_y.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.prior_learnability) {
            return Err(BnnpError::InvalidInput("prior_learnability must lie in [0, 1]".into()));
        }
        if self.inference_hidden.contains(&0) {
            return Err(BnnpError::InvalidInput("inference_hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// `(D, U)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.widths[l] + usize::from(self.bias), self.widths[l + 1])
    }
}

/// Weight matrices per sample path: `weights[path][layer]` is `D x U`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSample {
    pub weights: Vec<Vec<Mat>>,
}

impl WeightSample {
    pub fn num_samples(&self) -> usize {
        self.weights.len()
    }
}

/// Per-path layer posteriors and the weights they produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    /// `layers[l][path]`; layer 0 is the same for every path.
    pub layers: Vec<Vec<LayerPosterior>>,
    pub samples: WeightSample,
    pub noise: NoiseSource,
}

/// Bayesian neural network process: inference nets `Θ`, prior `Ψ` and the
/// observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Bnnp {
    pub config: NetworkConfig,
    pub prior: PriorSet,
    pub nets: Vec<InferenceNet>,
    /// `1 x m` log observation noise.
    pub log_sigma_y: Param,
}

impl Bnnp {
    /// Standard prior and freshly initialised inference networks.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut prior = PriorSet::standard_init(&config.widths, config.bias, config.structure)?;
        if config.prior_learnability < 1.0 {
            prior = prior.apply_learnability(config.prior_learnability)?;
        }
        prior.set_learnable(config.learn_prior);
        let input = config.input_dim() + config.output_dim();
        let nets = (0..config.num_layers())
            .map(|l| {
                InferenceNet::new(
                    &format!("net.{l}"),
                    input,
                    &config.inference_hidden,
                    config.widths[l + 1],
                    config.inference_activation,
                    derive_seed(seed, &[l as u64]),
                )
            })
            .collect();
        let mut log_sigma_y = Param::new(
            "likelihood.log_sigma_y",
            Mat::from_row_slice(1, config.log_sigma_y.len(), &config.log_sigma_y),
        );
        log_sigma_y.learnable = config.learn_sigma_y;
        Ok(Self { config, prior, nets, log_sigma_y })
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers()
    }

    /// Observation noise standard deviations per output.
    pub fn sigma_y(&self) -> Vec<f64> {
        let m = self.config.output_dim();
        (0..m)
            .map(|d| self.log_sigma_y.value[(0, if self.log_sigma_y.value.ncols() == 1 { 0 } else { d })].exp())
            .collect()
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t>) -> BoundBnnp<'t> {
        let nets = self.nets.iter().map(|n| n.bind(binder)).collect();
        let prior = self.prior.bind(binder);
        let log_sigma_y = binder.bind(&self.log_sigma_y);
        BoundBnnp { config: self.config.clone(), prior, nets, log_sigma_y }
    }

    fn check_data(&self, x: &Mat, y: &Mat) -> Result<()> {
        if x.nrows() != y.nrows() || x.ncols() != self.config.input_dim() || y.ncols() != self.config.output_dim() {
            return Err(BnnpError::DimensionMismatch(format!(
                "data {}x{} / {}x{} for a {:?} network",
                x.nrows(),
                x.ncols(),
                y.nrows(),
                y.ncols(),
                self.config.widths
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(BnnpError::InvalidInput("non-finite data value".into()));
        }
        Ok(())
    }

    /// Pseudo-likelihoods per layer; the last layer's targets are the
    /// observations themselves.
    pub fn encode_all(&self, x: &Mat, y: &Mat) -> Result<Vec<PseudoLikelihoodBatch>> {
        self.check_data(x, y)?;
        let last = self.num_layers() - 1;
        self.nets
            .iter()
            .enumerate()
            .map(|(l, net)| {
                let mut p = net.encode(x, y)?;
                if l == last {
                    p.targets = y.clone();
                }
                Ok(p)
            })
            .collect()
    }

    fn run(&self, x: &Mat, y: &Mat, opts: &InferOptions, noise: NoiseSource) -> Result<(PosteriorState, WeightSample)> {
        self.check_data(x, y)?;
        let tape = Tape::new();
        let mut binder = Binder::constant(&tape);
        let bound = self.bind(&mut binder);
        let trace = bound.infer(x, y, opts, noise)?;
        let k = opts.num_samples;
        let layers = trace
            .posteriors
            .iter()
            .enumerate()
            .map(|(l, per_path)| {
                if per_path.len() == 1 {
                    vec![per_path[0].to_posterior(l); k]
                } else {
                    per_path.iter().map(|p| p.to_posterior(l)).collect()
                }
            })
            .collect();
        let samples = WeightSample {
            weights: trace.weights.iter().map(|path| path.iter().map(|w| w.value()).collect()).collect(),
        };
        Ok((PosteriorState { layers, samples: samples.clone(), noise }, samples))
    }

    /// Posterior given a context set, with `num_samples` weight paths.
    pub fn infer(&self, x: &Mat, y: &Mat, num_samples: usize, noise: NoiseSource) -> Result<(PosteriorState, WeightSample)> {
        self.run(x, y, &InferOptions::new(num_samples), noise)
    }

    /// As [`Bnnp::infer`], but accumulating evidence batch by batch.
    /// The batches must partition the context rows.
    pub fn infer_minibatched(&self, x: &Mat, y: &Mat, batches: &[Vec<usize>], num_samples: usize, noise: NoiseSource) -> Result<(PosteriorState, WeightSample)> {
        check_partition(batches, x.nrows())?;
        let opts = InferOptions { batches: Some(batches.to_vec()), ..InferOptions::new(num_samples) };
        self.run(x, y, &opts, noise)
    }

    /// Updates only the last layer's posterior with new context points,
    /// keeping earlier layers' sampled weights. The last layer's weights are
    /// redrawn from the updated posterior using the state's noise.
    pub fn online_update(&self, state: &PosteriorState, x: &Mat, y: &Mat) -> Result<PosteriorState> {
        self.check_data(x, y)?;
        if x.nrows() == 0 {
            return Ok(state.clone());
        }
        let last = self.num_layers() - 1;
        let mut pseudo = self.nets[last].encode(x, y)?;
        pseudo.targets = y.clone();
        let mut out = state.clone();
        for (k, path) in state.samples.weights.iter().enumerate() {
            let phi = hidden_features(&self.config, &path[..last], x);
            let post = sequential_posterior(&state.layers[last][k], &phi, &pseudo)?;
            let eps = Vector::from_column_slice(state.noise.layer_noise(k, last, post.factor.dim()).as_slice());
            let w = post.factor.sample(&eps)?;
            let (d, u) = self.config.layer_shape(last);
            out.samples.weights[k][last] = Mat::from_column_slice(d, u, w.as_slice());
            out.layers[last][k] = post;
        }
        Ok(out)
    }

    /// Function draws from the prior: `num_samples` matrices of shape
    /// `n_t x d_L`.
    pub fn prior_predictive_sample(&self, target_x: &Mat, num_samples: usize, noise: NoiseSource) -> Result<Vec<Mat>> {
        let samples = self.prior_weight_samples(num_samples, noise)?;
        Ok(predict(&self.config, &samples, target_x))
    }

    /// Weight draws from the prior.
    pub fn prior_weight_samples(&self, num_samples: usize, noise: NoiseSource) -> Result<WeightSample> {
        sample_prior_weights(&self.prior, &self.config, num_samples, noise, 0)
    }
}

/// Prior weight draws `offset..offset + num_samples`; draw `k` depends only
/// on `k` and `noise`.
pub fn sample_prior_weights(prior: &PriorSet, cfg: &NetworkConfig, num_samples: usize, noise: NoiseSource, offset: usize) -> Result<WeightSample> {
    let mut weights = Vec::with_capacity(num_samples);
    if prior.structure == Structure::GlobalFull {
        let g = prior.global_factor();
        let chol = g.cholesky()?;
        for k in offset..offset + num_samples {
            let eps = Vector::from_column_slice(noise.normal(&[k as u64, u64::MAX], g.dim(), 1).as_slice());
            let w = &g.mean + chol.factor.apply(&eps);
            let mut o = 0;
            let mut path = Vec::new();
            for l in 0..cfg.num_layers() {
                let (d, u) = cfg.layer_shape(l);
                path.push(Mat::from_column_slice(d, u, &w.as_slice()[o..o + d * u]));
                o += d * u;
            }
            weights.push(path);
        }
    } else {
        let factors: Vec<_> = (0..cfg.num_layers()).map(|l| prior.layer_factor(l)).collect();
        let roots = factors.iter().map(|f| f.cholesky()).collect::<Result<Vec<_>>>()?;
        for k in offset..offset + num_samples {
            let path = (0..cfg.num_layers())
                .map(|l| {
                    let (d, u) = cfg.layer_shape(l);
                    let eps = Vector::from_column_slice(noise.layer_noise(k, l, d * u).as_slice());
                    let w = &factors[l].mean + roots[l].factor.apply(&eps);
                    Mat::from_column_slice(d, u, w.as_slice())
                })
                .collect();
            weights.push(path);
        }
    }
    Ok(WeightSample { weights })
}

impl Parameterised for Bnnp {
    fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.nets.iter().flat_map(|n| n.params()).collect();
        out.extend(self.prior.params());
        out.push(&self.log_sigma_y);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.nets.iter_mut().flat_map(|n| n.params_mut()).collect();
        out.extend(self.prior.params_mut());
        out.push(&mut self.log_sigma_y);
        out
    }
}

fn check_partition(batches: &[Vec<usize>], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for b in batches {
        for &i in b {
            if i >= n || seen[i] {
                return Err(BnnpError::InvalidInput(format!("batches do not partition {n} context rows")));
            }
            seen[i] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(BnnpError::InvalidInput(format!("batches do not cover all {n} context rows")));
    }
    Ok(())
}

/// Consecutive batches of at most `size` rows.
pub fn contiguous_batches(n: usize, size: usize) -> Vec<Vec<usize>> {
    let size = size.max(1);
    (0..n).collect::<Vec<_>>().chunks(size).map(|c| c.to_vec()).collect()
}

fn with_bias(x: &Mat, bias: bool) -> Mat {
    if bias {
        concat_columns(x, &Mat::from_element(x.nrows(), 1, 1.0))
    } else {
        x.clone()
    }
}

/// Input features of layer `weights.len()` (bias column included).
pub fn hidden_features(config: &NetworkConfig, weights: &[Mat], x: &Mat) -> Mat {
    let mut phi = with_bias(x, config.bias);
    for w in weights {
        let h = (&phi * w).map(|v| config.activation.eval(v));
        phi = with_bias(&h, config.bias);
    }
    phi
}

/// Network outputs `n_t x d_L` for every weight sample.
pub fn predict(config: &NetworkConfig, samples: &WeightSample, target_x: &Mat) -> Vec<Mat> {
    let last = config.num_layers() - 1;
    samples
        .weights
        .iter()
        .map(|path| hidden_features(config, &path[..last], target_x) * &path[last])
        .collect()
}

/// Network output on the tape for weight matrices `D x U` per layer.
pub fn forward_weights<'t>(config: &NetworkConfig, weights: &[Var<'t>], x: &Mat) -> Var<'t> {
    let tape = weights[0].tape();
    let last = weights.len() - 1;
    let mut phi = tape.constant(with_bias(x, config.bias));
    for (l, w) in weights.iter().enumerate() {
        let z = phi.matmul(*w);
        if l == last {
            return z;
        }
        let h = config.activation.apply(z);
        phi = if config.bias { tape.hcat(&[h, tape.constant(Mat::from_element(h.rows(), 1, 1.0))]) } else { h };
    }
    unreachable!("at least one layer")
}

/// Options for tape-level inference.
#[derive(Debug, Clone)]
pub struct InferOptions {
    pub num_samples: usize,
    /// Partition of the context rows; `None` processes all rows at once.
    pub batches: Option<Vec<Vec<usize>>>,
    /// Index of the only batch that keeps gradients through its data path.
    pub grad_batch: Option<usize>,
    /// Path `k` draws noise under key `sample_offset + k`.
    pub sample_offset: usize,
}

impl InferOptions {
    pub fn new(num_samples: usize) -> Self {
        Self { num_samples, batches: None, grad_batch: None, sample_offset: 0 }
    }
}

/// Tape-level result of inference.
pub struct InferenceTrace<'t> {
    /// `weights[path][layer]`, each `D x U`.
    pub weights: Vec<Vec<Var<'t>>>,
    /// `posteriors[layer][path]`; a single entry when shared by all paths.
    pub posteriors: Vec<Vec<LayerPosteriorVar<'t>>>,
    /// Total KL over layers, per path.
    pub kl: Vec<Var<'t>>,
}

/// A [`Bnnp`] placed on a tape.
pub struct BoundBnnp<'t> {
    pub config: NetworkConfig,
    pub prior: BoundPrior<'t>,
    pub nets: Vec<BoundNet<'t>>,
    pub log_sigma_y: Var<'t>,
}

impl<'t> BoundBnnp<'t> {
    fn tape(&self) -> &'t Tape {
        self.log_sigma_y.tape()
    }

    fn add_bias(&self, h: Var<'t>) -> Var<'t> {
        if self.config.bias {
            let ones = self.tape().constant(Mat::from_element(h.rows(), 1, 1.0));
            self.tape().hcat(&[h, ones])
        } else {
            h
        }
    }

    /// Network output for one weight path.
    pub fn forward(&self, weights: &[Var<'t>], x: &Mat) -> Var<'t> {
        forward_weights(&self.config, weights, x)
    }

    /// Layerwise amortised inference from a context set.
    pub fn infer(&self, x: &Mat, y: &Mat, opts: &InferOptions, noise: NoiseSource) -> Result<InferenceTrace<'t>> {
        let tape = self.tape();
        let cfg = &self.config;
        let n_layers = cfg.num_layers();
        let k_paths = opts.num_samples;
        if k_paths == 0 {
            return Err(BnnpError::InvalidInput("need at least one sample path".into()));
        }
        let n = x.nrows();
        let batches: Vec<Vec<usize>> = match &opts.batches {
            Some(b) => b.iter().filter(|b| !b.is_empty()).cloned().collect(),
            None if n > 0 => vec![(0..n).collect()],
            None => Vec::new(),
        };
        let live = |b: usize| opts.grad_batch.is_none_or(|g| g == b);

        // Pseudo-likelihoods per batch and layer; detached outside the gradient batch.
        let mut pseudo: Vec<Vec<(Var<'t>, Var<'t>)>> = Vec::with_capacity(batches.len());
        for (bi, rows) in batches.iter().enumerate() {
            let xb = x.select_rows(rows);
            let yb = y.select_rows(rows);
            let xy = tape.constant(concat_columns(&xb, &yb));
            let per_layer = self
                .nets
                .iter()
                .enumerate()
                .map(|(l, net)| {
                    let (mut t, mut p) = net.forward(xy);
                    if l == n_layers - 1 {
                        t = tape.constant(yb.clone());
                    }
                    if !live(bi) {
                        t = t.detach();
                        p = p.detach();
                    }
                    (t, p)
                })
                .collect();
            pseudo.push(per_layer);
        }
        let phi0: Vec<Var<'t>> = batches.iter().map(|rows| tape.constant(with_bias(&x.select_rows(rows), cfg.bias))).collect();

        let accumulate = |prior: &crate::priors::LayerPrior<'t>, l: usize, phis: &[Var<'t>]| -> Option<Vec<Evidence<'t>>> {
            let mut total: Option<Vec<Evidence<'t>>> = None;
            for (bi, phi) in phis.iter().enumerate() {
                let (t, p) = pseudo[bi][l];
                let ev = layer_evidence(prior, *phi, t, p);
                total = Some(match total {
                    None => ev,
                    Some(acc) => acc.into_iter().zip(ev).map(|(a, b)| a.combine(b)).collect(),
                });
            }
            total
        };

        let noise_for = |l: usize, k: usize| -> Mat {
            let (d, u) = cfg.layer_shape(l);
            noise.layer_noise(opts.sample_offset + k, l, d * u)
        };

        // Layer 0 is shared by all paths.
        let (d0, u0) = cfg.layer_shape(0);
        let prior0 = self.prior.layer_prior(0, &[]);
        let ev0 = accumulate(&prior0, 0, &phi0);
        let post0 = LayerPosteriorVar::new(&prior0, ev0.as_deref(), 0)?;
        let mut eps0 = Mat::zeros(d0 * u0, k_paths);
        for k in 0..k_paths {
            eps0.set_column(k, &noise_for(0, k).column(0));
        }
        let draws0 = post0.sample(tape.constant(eps0));
        let kl0 = post0.kl();

        let mut weights: Vec<Vec<Var<'t>>> = Vec::with_capacity(k_paths);
        let mut vec_weights: Vec<Vec<Var<'t>>> = Vec::with_capacity(k_paths);
        for k in 0..k_paths {
            let v = draws0.column(k);
            vec_weights.push(vec![v]);
            weights.push(vec![v.reshape(d0, u0)]);
        }
        let mut posteriors = vec![vec![post0]];
        let mut kl = vec![kl0; k_paths];

        // Per-path features of every batch for the current layer.
        let mut feats: Vec<Vec<Var<'t>>> = vec![phi0.clone(); k_paths];
        let shared_priors: Vec<Option<crate::priors::LayerPrior<'t>>> = (0..n_layers)
            .map(|l| (!self.prior.is_conditional()).then(|| self.prior.layer_prior(l, &[])))
            .collect();

        for l in 1..n_layers {
            let (d, u) = cfg.layer_shape(l);
            let mut layer_posts = Vec::with_capacity(k_paths);
            for k in 0..k_paths {
                let w_prev = weights[k][l - 1];
                let next: Vec<Var<'t>> = feats[k]
                    .iter()
                    .enumerate()
                    .map(|(bi, phi)| {
                        let f = self.add_bias(cfg.activation.apply(phi.matmul(w_prev)));
                        if live(bi) {
                            f
                        } else {
                            f.detach()
                        }
                    })
                    .collect();
                feats[k] = next;
                let prior = match &shared_priors[l] {
                    Some(p) => p.clone(),
                    None => self.prior.layer_prior(l, &vec_weights[k]),
                };
                let ev = accumulate(&prior, l, &feats[k]);
                let post = LayerPosteriorVar::new(&prior, ev.as_deref(), l)?;
                let v = post.sample(tape.constant(noise_for(l, k))).column(0);
                vec_weights[k].push(v);
                weights[k].push(v.reshape(d, u));
                kl[k] = kl[k] + post.kl();
                layer_posts.push(post);
            }
            posteriors.push(layer_posts);
        }
        Ok(InferenceTrace { weights, posteriors, kl })
    }

    /// Joint Gaussian log-likelihood of `y` under predictions `pred`.
    pub fn log_likelihood(&self, pred: Var<'t>, y: &Mat) -> Var<'t> {
        gaussian_log_likelihood(pred, y, self.log_sigma_y)
    }
}

/// `Σ_n Σ_d log N(y_nd; pred_nd, σ_d²)` with `log_sigma` of shape `1 x 1`
/// (shared) or `1 x d`.
pub fn gaussian_log_likelihood<'t>(pred: Var<'t>, y: &Mat, log_sigma: Var<'t>) -> Var<'t> {
    let tape = pred.tape();
    let (n, d) = y.shape();
    if n == 0 {
        return tape.scalar(0.0);
    }
    let ls = if log_sigma.cols() == d {
        log_sigma
    } else {
        log_sigma.matmul(tape.constant(Mat::from_element(1, d, 1.0)))
    };
    let resid = tape.constant(y.clone()) - pred;
    let sq = tape.constant(Mat::from_element(1, n, 1.0)).matmul(resid.square());
    let quad = sq.hadamard(ls.scale(-2.0).exp()).sum().scale(-0.5);
    quad - ls.sum().scale(n as f64) + tape.scalar(-0.5 * (n * d) as f64 * (2.0 * std::f64::consts::PI).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{conjugate_update, GaussianFactor};
    use crate::layer::posterior;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn small_model(widths: Vec<usize>, structure: Structure, seed: u64) -> Bnnp {
        let mut cfg = NetworkConfig::new(widths);
        cfg.structure = structure;
        cfg.activation = Activation::Tanh;
        cfg.inference_hidden = vec![8];
        Bnnp::new(cfg, seed).unwrap()
    }

    fn assert_states_close(a: &PosteriorState, b: &PosteriorState, tol: f64) {
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (pa, pb) in la.iter().zip(lb) {
                let dm = (&pa.factor.mean - &pb.factor.mean).amax() / pb.factor.mean.amax().max(1e-300);
                let dc = crate::linalg::max_relative_diff(&pa.factor.dense_covariance(), &pb.factor.dense_covariance());
                assert!(dm < tol && dc < tol, "layer {}: mean {dm:e} cov {dc:e}", pa.layer);
            }
        }
    }

    #[test]
    fn single_layer_is_bayesian_linear_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = small_model(vec![1, 1], Structure::UnitwiseFull, 3);
        let x = randn(&mut rng, 7, 1);
        let y = randn(&mut rng, 7, 1);
        let (state, samples) = model.infer(&x, &y, 5, NoiseSource::new(9)).unwrap();
        let pseudo = &model.encode_all(&x, &y).unwrap()[0];
        let phi = with_bias(&x, true);
        let reference = conjugate_update(
            &model.prior.layer_factor(0),
            &phi,
            &Vector::from_column_slice(y.as_slice()),
            &Vector::from_column_slice(pseudo.precisions.as_slice()),
        )
        .unwrap();
        for p in &state.layers[0] {
            assert!((&p.factor.mean - &reference.mean).amax() < 1e-10);
            assert!((p.factor.dense_covariance() - reference.dense_covariance()).amax() < 1e-10);
        }
        assert_eq!(samples.num_samples(), 5);
    }

    #[test]
    fn empty_context_gives_prior() {
        for s in [Structure::Diagonal, Structure::UnitwiseFull, Structure::LayerwiseFull, Structure::GlobalFull] {
            let model = small_model(vec![1, 3, 1], s, 2);
            let (state, _) = model.infer(&Mat::zeros(0, 1), &Mat::zeros(0, 1), 2, NoiseSource::new(1)).unwrap();
            for l in [0, 1] {
                let prior = model.prior.layer_factor(l);
                if s == Structure::GlobalFull && l > 0 {
                    continue;
                }
                for p in &state.layers[l] {
                    assert!((&p.factor.mean - &prior.mean).amax() < 1e-12, "{s:?}");
                    assert!((p.factor.dense_covariance() - prior.dense_covariance()).amax() < 1e-12, "{s:?}");
                }
            }
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = small_model(vec![1, 4, 1], Structure::UnitwiseFull, 5);
        let x = randn(&mut rng, 6, 1);
        let y = randn(&mut rng, 6, 1);
        let a = model.infer(&x, &y, 3, NoiseSource::new(4)).unwrap();
        let b = model.infer(&x, &y, 3, NoiseSource::new(4)).unwrap();
        assert_eq!(a.1, b.1);
        let c = model.infer(&x, &y, 3, NoiseSource::new(5)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn minibatched_matches_full_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in [Structure::Diagonal, Structure::UnitwiseFull, Structure::LayerwiseFull, Structure::GlobalFull] {
            let model = small_model(vec![1, 3, 3, 1], s, 7);
            let x = randn(&mut rng, 20, 1);
            let y = randn(&mut rng, 20, 1);
            let noise = NoiseSource::new(11);
            let (full, fs) = model.infer(&x, &y, 3, noise).unwrap();
            for b in [1, 4] {
                let (mb, ms) = model.infer_minibatched(&x, &y, &contiguous_batches(20, b), 3, noise).unwrap();
                assert_states_close(&mb, &full, 1e-8);
                for (pa, pb) in ms.weights.iter().zip(&fs.weights) {
                    for (wa, wb) in pa.iter().zip(pb) {
                        assert!(crate::linalg::max_relative_diff(wa, wb) < 1e-8);
                    }
                }
            }
            let mut batches = contiguous_batches(20, 4);
            batches.reverse();
            let (perm, _) = model.infer_minibatched(&x, &y, &batches, 3, noise).unwrap();
            assert_states_close(&perm, &full, 1e-8);
        }
    }

    #[test]
    fn batches_must_partition() {
        let model = small_model(vec![1, 1], Structure::Diagonal, 1);
        let x = Mat::zeros(3, 1);
        assert!(model.infer_minibatched(&x, &x, &[vec![0, 1]], 1, NoiseSource::new(0)).is_err());
        assert!(model.infer_minibatched(&x, &x, &[vec![0, 1], vec![1, 2]], 1, NoiseSource::new(0)).is_err());
    }

    /// Straightforward per-layer loop used as a reference forward pass.
    fn naive_forward(cfg: &NetworkConfig, ws: &[Mat], x: &Mat) -> Mat {
        let mut out = Mat::zeros(x.nrows(), cfg.output_dim());
        for n in 0..x.nrows() {
            let mut h: Vec<f64> = x.row(n).iter().copied().collect();
            for (l, w) in ws.iter().enumerate() {
                let mut z = vec![0.0; w.ncols()];
                for (j, zj) in z.iter_mut().enumerate() {
                    for (i, hi) in h.iter().enumerate() {
                        *zj += hi * w[(i, j)];
                    }
                    if cfg.bias {
                        *zj += w[(h.len(), j)];
                    }
                }
                h = if l + 1 < ws.len() { z.iter().map(|&v| cfg.activation.eval(v)).collect() } else { z };
            }
            for (j, v) in h.iter().enumerate() {
                out[(n, j)] = *v;
            }
        }
        out
    }

    #[test]
    fn predict_matches_reference_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = small_model(vec![2, 5, 4, 3], Structure::Diagonal, 1);
        let cfg = &model.config;
        let ws: Vec<Mat> = (0..3).map(|l| { let (d, u) = cfg.layer_shape(l); randn(&mut rng, d, u) }).collect();
        let x = randn(&mut rng, 9, 2);
        let pred = predict(cfg, &WeightSample { weights: vec![ws.clone()] }, &x);
        let reference = naive_forward(cfg, &ws, &x);
        assert!((&pred[0] - &reference).amax() <= 1e-12 * reference.amax().max(1.0));
        let zeros: Vec<Mat> = ws.iter().map(|w| Mat::zeros(w.nrows(), w.ncols())).collect();
        assert!(predict(cfg, &WeightSample { weights: vec![zeros] }, &x)[0].iter().all(|&v| v == 0.0));
        let one = NetworkConfig::new(vec![1, 1]);
        let w = Mat::from_column_slice(2, 1, &[1.0, 0.0]);
        let p = predict(&one, &WeightSample { weights: vec![vec![w]] }, &Mat::from_element(1, 1, 2.0));
        assert_eq!(p[0][(0, 0)], 2.0);
    }

    #[test]
    fn target_predictions_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = small_model(vec![1, 4, 1], Structure::UnitwiseFull, 2);
        let (_, samples) = model.infer(&randn(&mut rng, 5, 1), &randn(&mut rng, 5, 1), 3, NoiseSource::new(1)).unwrap();
        let xt = randn(&mut rng, 6, 1);
        let all = predict(&model.config, &samples, &xt);
        let some = predict(&model.config, &samples, &xt.select_rows(&[4, 1]));
        for (a, s) in all.iter().zip(&some) {
            assert_eq!(a.select_rows(&[4, 1]), *s);
        }
    }

    #[test]
    fn context_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = small_model(vec![1, 4, 1], Structure::UnitwiseFull, 2);
        let x = randn(&mut rng, 8, 1);
        let y = randn(&mut rng, 8, 1);
        let perm = [7, 2, 5, 0, 1, 6, 3, 4];
        let noise = NoiseSource::new(3);
        let (a, sa) = model.infer(&x, &y, 2, noise).unwrap();
        let (b, sb) = model.infer(&x.select_rows(&perm), &y.select_rows(&perm), 2, noise).unwrap();
        assert_states_close(&a, &b, 1e-10);
        let xt = randn(&mut rng, 4, 1);
        for (pa, pb) in predict(&model.config, &sa, &xt).iter().zip(predict(&model.config, &sb, &xt).iter()) {
            assert!((pa - pb).amax() < 1e-10);
        }
    }

    #[test]
    fn online_update_single_layer_equals_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = small_model(vec![1, 1], Structure::UnitwiseFull, 4);
        let x = randn(&mut rng, 9, 1);
        let y = randn(&mut rng, 9, 1);
        let noise = NoiseSource::new(5);
        let (first, _) = model.infer(&x.rows(0, 4).into_owned(), &y.rows(0, 4).into_owned(), 2, noise).unwrap();
        let updated = model.online_update(&first, &x.rows(4, 5).into_owned(), &y.rows(4, 5).into_owned()).unwrap();
        let (full, _) = model.infer(&x, &y, 2, noise).unwrap();
        assert_states_close(&updated, &full, 1e-10);
        let same = model.online_update(&first, &Mat::zeros(0, 1), &Mat::zeros(0, 1)).unwrap();
        assert_eq!(same, first);
    }

    #[test]
    fn online_update_two_layers_matches_constrained_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = small_model(vec![1, 3, 1], Structure::UnitwiseFull, 6);
        let x = randn(&mut rng, 10, 1);
        let y = randn(&mut rng, 10, 1);
        let (first, _) = model.infer(&x.rows(0, 6).into_owned(), &y.rows(0, 6).into_owned(), 3, NoiseSource::new(2)).unwrap();
        let updated = model.online_update(&first, &x.rows(6, 4).into_owned(), &y.rows(6, 4).into_owned()).unwrap();
        let pseudo = &model.encode_all(&x, &y).unwrap()[1];
        for k in 0..3 {
            assert_eq!(updated.samples.weights[k][0], first.samples.weights[k][0]);
            assert_eq!(updated.layers[0][k], first.layers[0][k]);
            let phi = hidden_features(&model.config, &first.samples.weights[k][..1], &x);
            let oracle = posterior(&model.prior.layer_factor(1), &phi, pseudo, 1).unwrap();
            let got = &updated.layers[1][k].factor;
            assert!((&got.mean - &oracle.factor.mean).amax() / oracle.factor.mean.amax() < 1e-8);
            assert!(crate::linalg::max_relative_diff(&got.dense_covariance(), &oracle.factor.dense_covariance()) < 1e-8);
        }
    }

    #[test]
    fn prior_predictive_is_centred() {
        let model = small_model(vec![1, 8, 1], Structure::Diagonal, 0);
        let xt = Mat::from_column_slice(3, 1, &[-1.0, 0.3, 2.0]);
        let draws = model.prior_predictive_sample(&xt, 50_000, NoiseSource::new(17)).unwrap();
        assert_eq!(draws[0].shape(), (3, 1));
        for i in 0..3 {
            let vals: Vec<f64> = draws.iter().map(|d| d[(i, 0)]).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!(mean.abs() < 3.0 * sd / n.sqrt(), "x[{i}]: mean {mean}");
        }
        let again = model.prior_predictive_sample(&xt, 4, NoiseSource::new(17)).unwrap();
        assert_eq!(again[..], draws[..4]);
    }

    #[test]
    fn global_prior_paths_use_conditionals() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = small_model(vec![1, 2, 1], Structure::GlobalFull, 3);
        let n = model.prior.num_weights();
        for j in 0..n {
            for i in j + 1..n {
                model.prior.scales[0].value[(i, j)] = 0.1 * randn(&mut rng, 1, 1)[(0, 0)];
            }
        }
        let x = randn(&mut rng, 5, 1);
        let y = randn(&mut rng, 5, 1);
        let (state, samples) = model.infer(&x, &y, 2, NoiseSource::new(1)).unwrap();
        let pseudo = model.encode_all(&x, &y).unwrap();
        for k in 0..2 {
            let w0 = Vector::from_column_slice(samples.weights[k][0].as_slice());
            let cond = crate::gaussian::condition_on_previous(&model.prior.global_factor(), &w0, 1).unwrap();
            let phi = hidden_features(&model.config, &samples.weights[k][..1], &x);
            let oracle = posterior(&{ let c = cond.dense_covariance(); GaussianFactor::layerwise(cond.mean, c) }, &phi, &pseudo[1], 1).unwrap();
            let got = &state.layers[1][k].factor;
            assert!((&got.mean - &oracle.factor.mean).amax() < 1e-10);
            assert!((got.dense_covariance() - oracle.factor.dense_covariance()).amax() < 1e-10);
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = NetworkConfig::new(vec![1]);
        assert!(cfg.validate().is_err());
        cfg.widths = vec![1, 2];
        cfg.log_sigma_y = vec![0.0, 0.0, 0.0];
        assert!(cfg.validate().is_err());
        let parsed: std::result::Result<NetworkConfig, _> = serde_json::from_str(r#"{"widths":[1,2],"typo":1}"#);
        assert!(parsed.is_err());
    }
}
