//! Amortised linear layer: an inference network turns each context pair
//! `(x_n, y_n)` into a Gaussian pseudo-observation per unit, and the
//! layer's weight posterior follows in closed form.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{BnnpError, Result};
use crate::gaussian::{conjugate_update, conjugate_update_vec, Covariance, Evidence, GaussianFactor, PriorRoot, WhitenedPosterior};
use crate::linalg::{Mat, Vector};
use crate::params::{Binder, Param, Parameterised};
use crate::priors::LayerPrior;

/// Range of the log pseudo-noise emitted by inference networks.
pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 5.0;

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Silu,
}

impl Activation {
    pub fn apply<'t>(self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => v.relu(),
            Activation::Tanh => v.tanh(),
            Activation::Silu => v.silu(),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = BnnpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            other => Err(BnnpError::InvalidInput(format!("unknown activation '{other}'"))),
        }
    }
}

/// MLP mapping `(x, y)` to per-unit pseudo-targets and log pseudo-noise.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceNet {
    pub weights: Vec<Param>,
    pub biases: Vec<Param>,
    pub activation: Activation,
    pub out_units: usize,
}

/// Pseudo-observations for one layer: `N x U` targets and precisions.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLikelihoodBatch {
    pub targets: Mat,
    pub precisions: Mat,
}

impl PseudoLikelihoodBatch {
    pub fn rows(&self, idx: &[usize]) -> Self {
        Self {
            targets: self.targets.select_rows(idx),
            precisions: self.precisions.select_rows(idx),
        }
    }
}

impl InferenceNet {
    /// Fan-in scaled Gaussian weights, zero biases.
    pub fn new(prefix: &str, input_dim: usize, hidden: &[usize], out_units: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(2 * out_units);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (j, w) in dims.windows(2).enumerate() {
            let normal = Normal::new(0.0, 1.0 / (w[0] as f64).sqrt()).expect("valid scale");
            weights.push(Param::new(
                format!("{prefix}.w.{j}"),
                Mat::from_fn(w[0], w[1], |_, _| normal.sample(&mut rng)),
            ));
            biases.push(Param::new(format!("{prefix}.b.{j}"), Mat::zeros(1, w[1])));
        }
        Self { weights, biases, activation, out_units }
    }

    /// Same architecture with every parameter zero.
    pub fn zeroed(mut self) -> Self {
        for p in self.params_mut() {
            p.value.fill(0.0);
        }
        self
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].value.nrows()
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t>) -> BoundNet<'t> {
        let weights = self.weights.iter().map(|p| binder.bind(p)).collect();
        let biases = self.biases.iter().map(|p| binder.bind(p)).collect();
        BoundNet { weights, biases, activation: self.activation, out_units: self.out_units }
    }

    /// Pseudo-likelihoods for context pairs (row `n` depends on row `n` only).
    pub fn encode(&self, x: &Mat, y: &Mat) -> Result<PseudoLikelihoodBatch> {
        if x.nrows() != y.nrows() {
            return Err(BnnpError::DimensionMismatch(format!("{} inputs but {} outputs", x.nrows(), y.nrows())));
        }
        if x.ncols() + y.ncols() != self.input_dim() {
            return Err(BnnpError::DimensionMismatch(format!(
                "inference net expects {} input columns, got {}",
                self.input_dim(),
                x.ncols() + y.ncols()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(BnnpError::InvalidInput("non-finite context value".into()));
        }
        let tape = Tape::new();
        let mut binder = Binder::constant(&tape);
        let net = self.bind(&mut binder);
        let xy = tape.constant(concat_columns(x, y));
        let (t, p) = net.forward(xy);
        Ok(PseudoLikelihoodBatch { targets: t.value(), precisions: p.value() })
    }
}

impl Parameterised for InferenceNet {
    fn params(&self) -> Vec<&Param> {
        self.weights.iter().chain(&self.biases).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }
}

pub(crate) fn concat_columns(x: &Mat, y: &Mat) -> Mat {
    let mut out = Mat::zeros(x.nrows(), x.ncols() + y.ncols());
    out.columns_mut(0, x.ncols()).copy_from(x);
    out.columns_mut(x.ncols(), y.ncols()).copy_from(y);
    out
}

/// An [`InferenceNet`] placed on a tape.
pub struct BoundNet<'t> {
    weights: Vec<Var<'t>>,
    biases: Vec<Var<'t>>,
    activation: Activation,
    out_units: usize,
}

impl<'t> BoundNet<'t> {
    /// `(targets, precisions)`, each `N x U`.
    pub fn forward(&self, xy: Var<'t>) -> (Var<'t>, Var<'t>) {
        let n = xy.rows();
        let mut h = xy;
        let last = self.weights.len() - 1;
        for (j, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.matmul(*w).add_row(*b);
            if j < last {
                h = self.activation.apply(h);
            }
        }
        let u = self.out_units;
        let targets = h.slice(0, 0, n, u);
        let log_sigma = h.slice(0, u, n, u).clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        (targets, log_sigma.scale(-2.0).exp())
    }
}

/// Closed-form posterior of one layer's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPosterior {
    /// Zero-based layer index.
    pub layer: usize,
    /// Unitwise blocks (independent units) or a dense factor over `vec(W)`.
    pub factor: GaussianFactor,
}

impl LayerPosterior {
    /// Mean weights as a `D x U` matrix.
    pub fn mean_matrix(&self, inputs: usize) -> Mat {
        Mat::from_column_slice(inputs, self.factor.dim() / inputs, self.factor.mean.as_slice())
    }
}

fn unit_factor(f: &GaussianFactor, k: usize, d: usize) -> GaussianFactor {
    let mean = f.mean.rows(k * d, d).into_owned();
    match &f.covariance {
        Covariance::Diagonal(v) => GaussianFactor::diagonal(mean, v.rows(k * d, d).into_owned()),
        Covariance::Unitwise(b) if b.len() * d == f.dim() => GaussianFactor::unitwise(mean, vec![b[k].clone()]),
        _ => {
            let c = f.dense_covariance();
            GaussianFactor::unitwise(mean, vec![c.view((k * d, k * d), (d, d)).into_owned()])
        }
    }
}

/// Posterior of layer `layer` given activations (`N x D`, bias column
/// included) and pseudo-observations. Diagonal and unitwise priors are
/// updated unit by unit; dense priors through the layer-level update.
pub fn posterior(prior: &GaussianFactor, activations: &Mat, pseudo: &PseudoLikelihoodBatch, layer: usize) -> Result<LayerPosterior> {
    let d = activations.ncols();
    let u = pseudo.targets.ncols();
    if prior.dim() != d * u {
        return Err(BnnpError::DimensionMismatch(format!(
            "layer {layer}: prior over {} weights for {d} inputs and {u} units",
            prior.dim()
        )));
    }
    let factor = match &prior.covariance {
        Covariance::Diagonal(_) | Covariance::Unitwise(_) => {
            let mut mean = Vector::zeros(d * u);
            let mut blocks = Vec::with_capacity(u);
            for k in 0..u {
                let unit = unit_factor(prior, k, d);
                let post = conjugate_update(
                    &unit,
                    activations,
                    &Vector::from_column_slice(pseudo.targets.column(k).as_slice()),
                    &Vector::from_column_slice(pseudo.precisions.column(k).as_slice()),
                )
                .map_err(|e| annotate(e, layer, Some(k)))?;
                mean.rows_mut(k * d, d).copy_from(&post.mean);
                blocks.push(post.dense_covariance());
            }
            GaussianFactor::unitwise(mean, blocks)
        }
        _ => {
            let post = conjugate_update_vec(prior, activations, &pseudo.targets, &pseudo.precisions)
                .map_err(|e| annotate(e, layer, None))?;
            { let cov = post.dense_covariance(); GaussianFactor::layerwise(post.mean, cov) }
        }
    };
    Ok(LayerPosterior { layer, factor })
}

/// Further conjugate update treating `current` as the prior.
pub fn sequential_posterior(current: &LayerPosterior, activations: &Mat, pseudo: &PseudoLikelihoodBatch) -> Result<LayerPosterior> {
    posterior(&current.factor, activations, pseudo, current.layer)
}

fn annotate(e: BnnpError, layer: usize, unit: Option<usize>) -> BnnpError {
    let place = match unit {
        Some(k) => format!("layer {layer} unit {k}"),
        None => format!("layer {layer}"),
    };
    match e {
        BnnpError::NotPositiveDefinite { context, jitter } => BnnpError::NotPositiveDefinite {
            context: format!("{place}: {context}"),
            jitter,
        },
        other => other,
    }
}

/// Whitened evidence for a layer: one entry per unit, or one in total for
/// a dense prior. `phi` is `N x D`; `targets` and `precisions` are `N x U`.
pub fn layer_evidence<'t>(prior: &LayerPrior<'t>, phi: Var<'t>, targets: Var<'t>, precisions: Var<'t>) -> Vec<Evidence<'t>> {
    let u = targets.cols();
    match prior {
        LayerPrior::Units(units) => units
            .iter()
            .enumerate()
            .map(|(k, (mean, root))| {
                let resid = targets.column(k) - phi.matmul(*mean);
                Evidence::from_design(root.design(phi), precisions.column(k), resid)
            })
            .collect(),
        LayerPrior::Dense(mean, root) => {
            let tape = phi.tape();
            let d = phi.cols();
            let PriorRoot::Dense(l) = root else {
                unreachable!("dense layer priors carry a dense root")
            };
            let mut designs = Vec::with_capacity(u);
            let mut resids = Vec::with_capacity(u);
            let mut lams = Vec::with_capacity(u);
            for k in 0..u {
                designs.push(phi.matmul(l.rows_range(k * d, d)));
                resids.push(targets.column(k) - phi.matmul(mean.rows_range(k * d, d)));
                lams.push(precisions.column(k));
            }
            vec![Evidence::from_design(tape.vcat(&designs), tape.vcat(&lams), tape.vcat(&resids))]
        }
    }
}

/// Differentiable posterior of one layer.
#[derive(Clone, Debug)]
pub enum LayerPosteriorVar<'t> {
    Units(Vec<WhitenedPosterior<'t>>),
    Dense(WhitenedPosterior<'t>),
}

impl<'t> LayerPosteriorVar<'t> {
    /// Posterior from a prior and the per-unit evidence (summed over any
    /// number of batches beforehand); `None` gives the prior.
    pub fn new(prior: &LayerPrior<'t>, evidence: Option<&[Evidence<'t>]>, layer: usize) -> Result<Self> {
        match prior {
            LayerPrior::Units(units) => units
                .iter()
                .enumerate()
                .map(|(k, (mean, root))| {
                    WhitenedPosterior::new(*mean, *root, evidence.map(|e| e[k]), &format!("layer {layer} unit {k} posterior"))
                })
                .collect::<Result<Vec<_>>>()
                .map(LayerPosteriorVar::Units),
            LayerPrior::Dense(mean, root) => {
                WhitenedPosterior::new(*mean, *root, evidence.map(|e| e[0]), &format!("layer {layer} posterior"))
                    .map(LayerPosteriorVar::Dense)
            }
        }
    }

    /// Draws, one `vec(W)` per column of `eps` (`DU x K`).
    pub fn sample(&self, eps: Var<'t>) -> Var<'t> {
        match self {
            LayerPosteriorVar::Units(units) => {
                let d = units[0].dim();
                let parts: Vec<Var<'t>> = units
                    .iter()
                    .enumerate()
                    .map(|(k, p)| p.samples(eps.rows_range(k * d, d)))
                    .collect();
                eps.tape().vcat(&parts)
            }
            LayerPosteriorVar::Dense(p) => p.samples(eps),
        }
    }

    pub fn kl(&self) -> Var<'t> {
        match self {
            LayerPosteriorVar::Units(units) => {
                let parts: Vec<Var<'t>> = units.iter().map(|p| p.kl()).collect();
                parts[0].tape().sum_all(&parts)
            }
            LayerPosteriorVar::Dense(p) => p.kl(),
        }
    }

    /// Posterior mean of `vec(W)`.
    pub fn mean_vec(&self) -> Var<'t> {
        match self {
            LayerPosteriorVar::Units(units) => {
                let parts: Vec<Var<'t>> = units.iter().map(|p| p.mean()).collect();
                parts[0].tape().vcat(&parts)
            }
            LayerPosteriorVar::Dense(p) => p.mean(),
        }
    }

    /// Plain-`f64` copy.
    pub fn to_posterior(&self, layer: usize) -> LayerPosterior {
        let mean = Vector::from_column_slice(self.mean_vec().value().as_slice());
        let factor = match self {
            LayerPosteriorVar::Units(units) => {
                GaussianFactor::unitwise(mean, units.iter().map(|p| p.covariance()).collect())
            }
            LayerPosteriorVar::Dense(p) => GaussianFactor::layerwise(mean, p.covariance()),
        };
        LayerPosterior { layer, factor }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Structure;
    use crate::priors::PriorSet;
    use approx::assert_relative_eq;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn zero_net_gives_unit_precision() {
        let net = InferenceNet::new("n", 2, &[5], 3, Activation::Relu, 0).zeroed();
        let out = net.encode(&Mat::from_element(4, 1, 0.7), &Mat::from_element(4, 1, -1.0)).unwrap();
        assert!(out.targets.iter().all(|&v| v == 0.0));
        assert!(out.precisions.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn encode_is_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = InferenceNet::new("n", 2, &[6, 6], 2, Activation::Tanh, 3);
        let x = randn(&mut rng, 5, 1);
        let y = randn(&mut rng, 5, 1);
        let out = net.encode(&x, &y).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let permuted = net.encode(&x.select_rows(&perm), &y.select_rows(&perm)).unwrap();
        assert_eq!(permuted, out.rows(&perm));
        let dup = net.encode(&x.select_rows(&[2, 2, 2]), &y.select_rows(&[2, 2, 2])).unwrap();
        assert_eq!(dup, out.rows(&[2, 2, 2]));
        assert!(net.encode(&Mat::from_element(1, 1, f64::NAN), &Mat::zeros(1, 1)).is_err());
    }

    #[test]
    fn log_sigma_is_clamped() {
        let mut net = InferenceNet::new("n", 2, &[], 1, Activation::Relu, 0).zeroed();
        net.biases[0].value[(0, 1)] = 100.0;
        let out = net.encode(&Mat::zeros(1, 1), &Mat::zeros(1, 1)).unwrap();
        assert_relative_eq!(out.precisions[(0, 0)], (-2.0 * LOG_SIGMA_MAX).exp());
    }

    #[test]
    fn toy_layer_posterior() {
        let prior = GaussianFactor::standard(1);
        let pseudo = PseudoLikelihoodBatch { targets: Mat::from_element(1, 1, 1.0), precisions: Mat::from_element(1, 1, 1.0) };
        let post = posterior(&prior, &Mat::from_element(1, 1, 1.0), &pseudo, 0).unwrap();
        assert_relative_eq!(post.factor.mean[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(post.factor.dense_covariance()[(0, 0)], 0.5, epsilon = 1e-14);
        let empty = PseudoLikelihoodBatch { targets: Mat::zeros(0, 1), precisions: Mat::zeros(0, 1) };
        let same = posterior(&prior, &Mat::zeros(0, 1), &empty, 0).unwrap();
        assert_eq!(same.factor.mean, prior.mean);
        assert_eq!(same.factor.dense_covariance(), prior.dense_covariance());
    }

    #[test]
    fn large_precision_recovers_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, 4, 2);
        let y = randn(&mut rng, 4, 1);
        let ls = (a.transpose() * &a).try_inverse().unwrap() * a.transpose() * &y;
        let prior = GaussianFactor::standard(2);
        let pseudo = PseudoLikelihoodBatch { targets: y.clone(), precisions: Mat::from_element(4, 1, 1e10) };
        let post = posterior(&prior, &a, &pseudo, 0).unwrap();
        assert!((Mat::from_column_slice(2, 1, post.factor.mean.as_slice()) - ls).amax() < 1e-8);
    }

    #[test]
    fn sequential_batches_in_any_order_match_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d, u) = (3, 2, 2);
        let prior = PriorSet::standard_init(&[1, 2], true, Structure::UnitwiseFull).unwrap().layer_factor(0);
        let a = randn(&mut rng, n, d);
        let pseudo = PseudoLikelihoodBatch { targets: randn(&mut rng, n, u), precisions: randn(&mut rng, n, u).map(f64::exp) };
        let full = posterior(&prior, &a, &pseudo, 0).unwrap();
        for order in [[0, 1, 2], [2, 0, 1], [1, 2, 0]] {
            let mut cur = posterior(&prior, &a.select_rows(&[order[0]]), &pseudo.rows(&[order[0]]), 0).unwrap();
            for &i in &order[1..] {
                cur = sequential_posterior(&cur, &a.select_rows(&[i]), &pseudo.rows(&[i])).unwrap();
            }
            assert!((&cur.factor.mean - &full.factor.mean).amax() / full.factor.mean.amax() < 1e-8);
            assert!(crate::linalg::max_relative_diff(&cur.factor.dense_covariance(), &full.factor.dense_covariance()) < 1e-8);
        }
        let split = sequential_posterior(
            &posterior(&prior, &a.select_rows(&[0]), &pseudo.rows(&[0]), 0).unwrap(),
            &a.select_rows(&[1, 2]),
            &pseudo.rows(&[1, 2]),
        )
        .unwrap();
        assert!((&split.factor.mean - &full.factor.mean).amax() / full.factor.mean.amax() < 1e-8);
        let none = sequential_posterior(&full, &Mat::zeros(0, d), &pseudo.rows(&[])).unwrap();
        assert_eq!(none, full);
    }

    #[test]
    fn tape_posterior_matches_f64_for_every_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in [Structure::Diagonal, Structure::UnitwiseFull, Structure::LayerwiseFull] {
            let mut prior = PriorSet::standard_init(&[2, 3], true, s).unwrap();
            for p in prior.params_mut() {
                let noise = randn(&mut rng, p.value.nrows(), p.value.ncols()) * 0.2;
                p.value += noise;
            }
            let phi = randn(&mut rng, 5, 3);
            let pseudo = PseudoLikelihoodBatch { targets: randn(&mut rng, 5, 3), precisions: randn(&mut rng, 5, 3).map(f64::exp) };
            let reference = posterior(&prior.layer_factor(0), &phi, &pseudo, 0).unwrap();
            let tape = Tape::new();
            let mut binder = Binder::constant(&tape);
            let bound = prior.bind(&mut binder);
            let lp = bound.layer_prior(0, &[]);
            let ev = layer_evidence(&lp, tape.constant(phi.clone()), tape.constant(pseudo.targets.clone()), tape.constant(pseudo.precisions.clone()));
            let post = LayerPosteriorVar::new(&lp, Some(&ev), 0).unwrap().to_posterior(0);
            assert!((&post.factor.mean - &reference.factor.mean).amax() < 1e-10, "{s:?}");
            assert!((post.factor.dense_covariance() - reference.factor.dense_covariance()).amax() < 1e-10, "{s:?}");
        }
    }

    #[test]
    fn posterior_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prior = GaussianFactor::unitwise(Vector::zeros(3), vec![Mat::identity(3, 3)]);
        let a = randn(&mut rng, 6, 3);
        let pseudo = PseudoLikelihoodBatch { targets: randn(&mut rng, 6, 1), precisions: randn(&mut rng, 6, 1).map(f64::exp) };
        let perm = [5, 3, 1, 0, 2, 4];
        let p1 = posterior(&prior, &a, &pseudo, 0).unwrap();
        let p2 = posterior(&prior, &a.select_rows(&perm), &pseudo.rows(&perm), 0).unwrap();
        assert!((&p1.factor.mean - &p2.factor.mean).amax() < 1e-10);
        assert!((p1.factor.dense_covariance() - p2.factor.dense_covariance()).amax() < 1e-10);
    }

    #[test]
    fn posterior_mean_gradient_wrt_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = InferenceNet::new("n", 2, &[4], 2, Activation::Tanh, 11);
        let prior = PriorSet::standard_init(&[1, 2], true, Structure::UnitwiseFull).unwrap();
        let x = randn(&mut rng, 5, 1);
        let y = randn(&mut rng, 5, 1);
        let phi = concat_columns(&x, &Mat::from_element(5, 1, 1.0));
        let probe = randn(&mut rng, 4, 1);
        let objective = |net: &InferenceNet, track: bool| -> (f64, Vec<Mat>) {
            let tape = Tape::new();
            let mut binder = if track { Binder::tracking(&tape) } else { Binder::constant(&tape) };
            let bn = net.bind(&mut binder);
            let mut pb = Binder::constant(&tape);
            let lp = prior.bind(&mut pb).layer_prior(0, &[]);
            let (t, p) = bn.forward(tape.constant(concat_columns(&x, &y)));
            let ev = layer_evidence(&lp, tape.constant(phi.clone()), t, p);
            let mean = LayerPosteriorVar::new(&lp, Some(&ev), 0).unwrap().mean_vec();
            let out = mean.hadamard(tape.constant(probe.clone())).sum();
            let grads = if track { binder.gradients(out, &net.params()) } else { Vec::new() };
            (out.scalar(), grads)
        };
        let (_, grads) = objective(&net, true);
        let h = 1e-5;
        let n_params = net.params().len();
        for pi in 0..n_params {
            for idx in 0..net.params()[pi].value.len() {
                let mut plus = net.clone();
                plus.params_mut()[pi].value[idx] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi].value[idx] -= h;
                let fd = (objective(&plus, false).0 - objective(&minus, false).0) / (2.0 * h);
                let ad = grads[pi][idx];
                assert!((fd - ad).abs() <= 1e-4 * fd.abs().max(ad.abs()).max(1e-6), "param {pi}[{idx}]: {ad} vs {fd}");
            }
        }
    }
}
