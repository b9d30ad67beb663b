//! Weight priors `Ψ`: parameterisation, standard initialisation and the
//! learnability mask.
//!
//! Means are stored raw. Diagonal variances are stored as log-variances;
//! dense covariances as a lower Cholesky factor whose diagonal is stored in
//! log space. Decoding floors every variance at [`VARIANCE_FLOOR`].
//!
//! Weights of a layer are enumerated unit-major: the `D = d_{l-1} (+1)`
//! incoming weights of unit 0 (bias last), then unit 1, and so on. Layers
//! follow one another, first layer first.

use serde::{Deserialize, Serialize};

use crate::autodiff::{decode_cholesky, encode_cholesky, Var};
use crate::error::{BnnpError, Result};
use crate::gaussian::{GaussianFactor, PriorRoot, Structure};
use crate::linalg::{cholesky_jittered, Mat, Vector};
use crate::params::{Binder, Param, ParamRecord, Parameterised};

/// Smallest decoded prior variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Lower bound on stored log-variances.
pub fn log_variance_floor() -> f64 {
    VARIANCE_FLOOR.ln()
}

/// Lower bound on stored log Cholesky diagonals (so that `L_ii² ≥ floor`).
pub fn log_chol_floor() -> f64 {
    0.5 * VARIANCE_FLOOR.ln()
}

pub fn decode_variance(log_var: f64) -> f64 {
    log_var.max(log_variance_floor()).exp()
}

/// Unconstrained Cholesky encoding of a covariance matrix.
pub fn encode_covariance(cov: &Mat) -> Result<Mat> {
    let (l, _) = cholesky_jittered(cov, "covariance to encode")?;
    Ok(encode_cholesky(&l))
}

/// Covariance from its unconstrained Cholesky encoding.
pub fn decode_covariance(raw: &Mat) -> Mat {
    let l = decode_cholesky(raw, log_chol_floor());
    &l * l.transpose()
}

/// Prior parameters for every layer of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PriorRecord", try_from = "PriorRecord")]
pub struct PriorSet {
    pub structure: Structure,
    /// `(D, U)` per layer: inputs per unit (bias included) and units.
    pub shapes: Vec<(usize, usize)>,
    /// One per layer, or a single entry for [`Structure::GlobalFull`].
    pub means: Vec<Param>,
    /// Log-variances (diagonal) or raw Cholesky entries (dense).
    pub scales: Vec<Param>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorRecord {
    structure: Structure,
    shapes: Vec<(usize, usize)>,
    means: Vec<ParamRecord>,
    scales: Vec<ParamRecord>,
}

impl From<PriorSet> for PriorRecord {
    fn from(p: PriorSet) -> Self {
        Self {
            structure: p.structure,
            shapes: p.shapes,
            means: p.means.iter().map(ParamRecord::from).collect(),
            scales: p.scales.iter().map(ParamRecord::from).collect(),
        }
    }
}

impl TryFrom<PriorRecord> for PriorSet {
    type Error = BnnpError;
    fn try_from(r: PriorRecord) -> Result<Self> {
        let means = r.means.iter().map(Param::try_from).collect::<Result<Vec<_>>>()?;
        let scales = r.scales.iter().map(Param::try_from).collect::<Result<Vec<_>>>()?;
        let expected = if r.structure == Structure::GlobalFull { 1 } else { r.shapes.len() };
        if means.len() != expected || scales.len() != expected {
            return Err(BnnpError::InvalidInput("prior record has wrong number of arrays".into()));
        }
        Ok(PriorSet { structure: r.structure, shapes: r.shapes, means, scales })
    }
}

/// Per-layer `(D, U)` from widths `[d_0, ..., d_L]`.
pub fn layer_shapes(widths: &[usize], bias: bool) -> Vec<(usize, usize)> {
    widths
        .windows(2)
        .map(|w| (w[0] + usize::from(bias), w[1]))
        .collect()
}

impl PriorSet {
    /// Zero means and variance `1 / D` per weight (fan-in including the
    /// bias input); dense structures start diagonal.
    pub fn standard_init(widths: &[usize], bias: bool, structure: Structure) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(BnnpError::InvalidInput(format!("invalid layer widths {widths:?}")));
        }
        let shapes = layer_shapes(widths, bias);
        let mut means = Vec::new();
        let mut scales = Vec::new();
        match structure {
            Structure::Diagonal | Structure::UnitwiseFull => {
                for (l, &(d, u)) in shapes.iter().enumerate() {
                    let lv = -(d as f64).ln();
                    means.push(Param::new(format!("prior.mean.{l}"), Mat::zeros(d, u)));
                    let scale = if structure == Structure::Diagonal {
                        Mat::from_element(d, u, lv)
                    } else {
                        let mut s = Mat::zeros(d, d * u);
                        for k in 0..u {
                            for i in 0..d {
                                s[(i, k * d + i)] = 0.5 * lv;
                            }
                        }
                        s
                    };
                    scales.push(Param::new(format!("prior.scale.{l}"), scale));
                }
            }
            Structure::LayerwiseFull => {
                for (l, &(d, u)) in shapes.iter().enumerate() {
                    let n = d * u;
                    means.push(Param::new(format!("prior.mean.{l}"), Mat::zeros(n, 1)));
                    let s = Mat::from_diagonal_element(n, n, -0.5 * (d as f64).ln());
                    scales.push(Param::new(format!("prior.scale.{l}"), s));
                }
            }
            Structure::GlobalFull => {
                let n: usize = shapes.iter().map(|(d, u)| d * u).sum();
                let mut s = Mat::zeros(n, n);
                let mut o = 0;
                for &(d, u) in &shapes {
                    for i in 0..d * u {
                        s[(o + i, o + i)] = -0.5 * (d as f64).ln();
                    }
                    o += d * u;
                }
                means.push(Param::new("prior.mean.0", Mat::zeros(n, 1)));
                scales.push(Param::new("prior.scale.0", s));
            }
        }
        Ok(Self { structure, shapes, means, scales })
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    /// Number of weights in layer `l`.
    pub fn layer_size(&self, l: usize) -> usize {
        self.shapes[l].0 * self.shapes[l].1
    }

    /// Total number of weights `|W|`.
    pub fn num_weights(&self) -> usize {
        (0..self.num_layers()).map(|l| self.layer_size(l)).sum()
    }

    fn layer_offset(&self, l: usize) -> usize {
        (0..l).map(|k| self.layer_size(k)).sum()
    }

    /// Enables or disables learning of every prior parameter.
    pub fn set_learnable(&mut self, learnable: bool) {
        for p in self.params_mut() {
            p.learnable = learnable;
        }
    }

    /// Marks the prior parameters of the first `round(p·|W|)` weights
    /// (ties to even) as trainable and everything else as frozen.
    ///
    /// For dense structures the trainable part of the Cholesky factor is
    /// the rows belonging to trainable weights.
    pub fn apply_learnability(&self, proportion: f64) -> Result<PriorSet> {
        if !(0.0..=1.0).contains(&proportion) {
            return Err(BnnpError::InvalidInput(format!("learnability proportion {proportion} outside [0, 1]")));
        }
        let cutoff = (proportion * self.num_weights() as f64).round_ties_even() as usize;
        let mut out = self.clone();
        match self.structure {
            Structure::GlobalFull => {
                let n = self.num_weights();
                out.means[0].mask = Some((0..n).map(|g| g < cutoff).collect());
                out.scales[0].mask = Some(dense_row_mask(n, |k| k < cutoff));
            }
            _ => {
                for l in 0..self.num_layers() {
                    let (d, u) = self.shapes[l];
                    let off = self.layer_offset(l);
                    let live = |k: usize| off + k < cutoff;
                    out.means[l].mask = Some((0..d * u).map(live).collect());
                    out.scales[l].mask = Some(match self.structure {
                        Structure::Diagonal => (0..d * u).map(live).collect(),
                        Structure::UnitwiseFull => {
                            let rows = d;
                            let mut m = vec![false; d * d * u];
                            for k in 0..u {
                                for j in 0..d {
                                    for i in j..d {
                                        m[(k * d + j) * rows + i] = live(k * d + i);
                                    }
                                }
                            }
                            m
                        }
                        Structure::LayerwiseFull => dense_row_mask(d * u, live),
                        Structure::GlobalFull => unreachable!(),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Number of weights whose prior parameters are trainable.
    pub fn trainable_weight_count(&self) -> usize {
        let means: usize = self.means.iter().map(|p| p.trainable_count()).sum();
        means
    }

    /// Decoded prior over layer `l` (for a global prior: its marginal).
    pub fn layer_factor(&self, l: usize) -> GaussianFactor {
        let (d, u) = self.shapes[l];
        match self.structure {
            Structure::Diagonal => GaussianFactor::diagonal(
                Vector::from_column_slice(self.means[l].value.as_slice()),
                Vector::from_iterator(d * u, self.scales[l].value.iter().map(|&v| decode_variance(v))),
            ),
            Structure::UnitwiseFull => {
                let raw = &self.scales[l].value;
                let blocks = (0..u)
                    .map(|k| decode_covariance(&raw.columns(k * d, d).into_owned()))
                    .collect();
                GaussianFactor::unitwise(Vector::from_column_slice(self.means[l].value.as_slice()), blocks)
            }
            Structure::LayerwiseFull => GaussianFactor::layerwise(
                Vector::from_column_slice(self.means[l].value.as_slice()),
                decode_covariance(&self.scales[l].value),
            ),
            Structure::GlobalFull => {
                let g = self.global_factor();
                let o = self.layer_offset(l);
                let n = d * u;
                GaussianFactor::layerwise(g.mean.rows(o, n).into_owned(), g.dense_covariance().view((o, o), (n, n)).into_owned())
            }
        }
    }

    /// Joint prior over all weights as a global factor.
    pub fn global_factor(&self) -> GaussianFactor {
        let sizes: Vec<usize> = (0..self.num_layers()).map(|l| self.layer_size(l)).collect();
        if self.structure == Structure::GlobalFull {
            return GaussianFactor::global(
                Vector::from_column_slice(self.means[0].value.as_slice()),
                decode_covariance(&self.scales[0].value),
                sizes,
            );
        }
        let factors: Vec<GaussianFactor> = (0..self.num_layers()).map(|l| self.layer_factor(l)).collect();
        let mean = Vector::from_iterator(self.num_weights(), factors.iter().flat_map(|f| f.mean.iter().copied()));
        let blocks: Vec<Mat> = factors.iter().map(|f| f.dense_covariance()).collect();
        GaussianFactor::global(mean, crate::linalg::block_diag(&blocks), sizes)
    }

    /// Replaces layer `l`'s prior with `factor` (must fit the structure).
    pub fn set_layer(&mut self, l: usize, factor: &GaussianFactor) -> Result<()> {
        let (d, u) = self.shapes[l];
        if factor.dim() != d * u {
            return Err(BnnpError::DimensionMismatch(format!("layer {l} prior needs {} weights", d * u)));
        }
        if self.structure == Structure::GlobalFull {
            return Err(BnnpError::InvalidInput("set_layer is not defined for a global prior".into()));
        }
        self.means[l].value = Mat::from_column_slice(self.means[l].value.nrows(), self.means[l].value.ncols(), factor.mean.as_slice());
        let cov = factor.dense_covariance();
        match self.structure {
            Structure::Diagonal => {
                self.scales[l].value = Mat::from_fn(d, u, |i, k| cov[(k * d + i, k * d + i)].ln());
            }
            Structure::UnitwiseFull => {
                for k in 0..u {
                    let block = cov.view((k * d, k * d), (d, d)).into_owned();
                    let raw = encode_covariance(&block)?;
                    self.scales[l].value.columns_mut(k * d, d).copy_from(&raw);
                }
            }
            Structure::LayerwiseFull => self.scales[l].value = encode_covariance(&cov)?,
            Structure::GlobalFull => unreachable!(),
        }
        Ok(())
    }

    /// Places the prior on a tape.
    pub fn bind<'t>(&self, binder: &mut Binder<'t>) -> BoundPrior<'t> {
        let means: Vec<Var<'t>> = self.means.iter().map(|p| binder.bind(p)).collect();
        let scales: Vec<Var<'t>> = self.scales.iter().map(|p| binder.bind(p)).collect();
        let layers = match self.structure {
            Structure::Diagonal => means
                .iter()
                .zip(&scales)
                .zip(&self.shapes)
                .map(|((&m, &s), &(_, u))| {
                    let std = s.clamp(log_variance_floor(), f64::INFINITY).scale(0.5).exp();
                    LayerPrior::Units((0..u).map(|k| (m.column(k), PriorRoot::Diagonal(std.column(k)))).collect())
                })
                .collect(),
            Structure::UnitwiseFull => means
                .iter()
                .zip(&scales)
                .zip(&self.shapes)
                .map(|((&m, &s), &(d, u))| {
                    LayerPrior::Units(
                        (0..u)
                            .map(|k| {
                                let l = s.slice(0, k * d, d, d).chol_decode(log_chol_floor());
                                (m.column(k), PriorRoot::Dense(l))
                            })
                            .collect(),
                    )
                })
                .collect(),
            Structure::LayerwiseFull => means
                .iter()
                .zip(&scales)
                .map(|(&m, &s)| LayerPrior::Dense(m, PriorRoot::Dense(s.chol_decode(log_chol_floor()))))
                .collect(),
            Structure::GlobalFull => Vec::new(),
        };
        let global = (self.structure == Structure::GlobalFull)
            .then(|| (means[0], scales[0].chol_decode(log_chol_floor())));
        BoundPrior {
            shapes: self.shapes.clone(),
            layers,
            global,
        }
    }
}

/// Column-major mask of a lower-triangular `n x n` factor with live rows.
fn dense_row_mask(n: usize, live: impl Fn(usize) -> bool) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for j in 0..n {
        for i in j..n {
            m[j * n + i] = live(i);
        }
    }
    m
}

impl Parameterised for PriorSet {
    fn params(&self) -> Vec<&Param> {
        self.means.iter().chain(&self.scales).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.means.iter_mut().chain(self.scales.iter_mut()).collect()
    }
}

/// Prior over one layer's weights on the tape.
#[derive(Clone, Debug)]
pub enum LayerPrior<'t> {
    /// Independent units: `(mean D x 1, root)` per unit.
    Units(Vec<(Var<'t>, PriorRoot<'t>)>),
    /// Dense prior over `vec(W)` (`DU x 1` mean).
    Dense(Var<'t>, PriorRoot<'t>),
}

impl<'t> LayerPrior<'t> {
    pub fn mean_vec(&self) -> Var<'t> {
        match self {
            LayerPrior::Units(units) => {
                let parts: Vec<Var<'t>> = units.iter().map(|(m, _)| *m).collect();
                parts[0].tape().vcat(&parts)
            }
            LayerPrior::Dense(m, _) => *m,
        }
    }
}

/// A [`PriorSet`] placed on a tape.
pub struct BoundPrior<'t> {
    pub shapes: Vec<(usize, usize)>,
    layers: Vec<LayerPrior<'t>>,
    /// Mean and decoded Cholesky factor of a global prior.
    global: Option<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundPrior<'t> {
    /// Whether layer priors depend on earlier layers' sampled weights.
    pub fn is_conditional(&self) -> bool {
        self.global.is_some()
    }

    /// Mean and Cholesky factor of a global prior.
    pub fn global(&self) -> Option<(Var<'t>, Var<'t>)> {
        self.global
    }

    /// Prior of layer `l` given the realised weights of layers `0..l`
    /// (each `vec(W)`, ignored unless the prior is global).
    pub fn layer_prior(&self, l: usize, previous: &[Var<'t>]) -> LayerPrior<'t> {
        let Some((mean, chol)) = self.global else {
            return self.layers[l].clone();
        };
        let p: usize = self.shapes[..l].iter().map(|(d, u)| d * u).sum();
        let c = self.shapes[l].0 * self.shapes[l].1;
        let l_cc = chol.slice(p, p, c, c);
        let mut m = mean.rows_range(p, c);
        if p > 0 {
            let tape = mean.tape();
            let w = tape.vcat(previous);
            let delta = w - mean.rows_range(0, p);
            let z = chol.slice(0, 0, p, p).solve_lower(delta);
            m = m + chol.slice(p, 0, c, p).matmul(z);
        }
        LayerPrior::Dense(m, PriorRoot::Dense(l_cc))
    }
}
