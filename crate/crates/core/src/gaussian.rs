//! Structured Gaussians over weight blocks.
//!
//! Two layers live here:
//!
//! * [`GaussianFactor`], a plain-`f64` Gaussian in one of four covariance
//!   structures, with conjugate updates, conditioning, sampling and KL.
//! * [`WhitenedPosterior`], the differentiable form used by the model. It
//!   keeps the posterior in coordinates whitened by the prior's Cholesky
//!   factor `L`: with `B = Φ L`, the posterior over `z = L⁻¹(w − μ)` is
//!   `N(A⁻¹r, A⁻¹)` where `A = I + BᵀΛB` and `r = BᵀΛ(y − Φμ)`. Evidence
//!   from several batches simply adds up in `(A − I, r)`, which is what
//!   makes minibatched and online updates exact.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{BnnpError, Result};
use crate::linalg::{cholesky_jittered, log_det_from_factor, solve_lower, solve_lower_transpose, symmetrize, Mat, Vector};

/// Covariance structure class of a weight prior or posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Independent weights.
    Diagonal,
    /// Dense covariance within each output unit, independent across units.
    UnitwiseFull,
    /// Dense covariance over all weights of one layer.
    LayerwiseFull,
    /// Dense covariance over every weight of the network.
    GlobalFull,
}

impl std::str::FromStr for Structure {
    type Err = BnnpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(Structure::Diagonal),
            "unitwise_full" => Ok(Structure::UnitwiseFull),
            "layerwise_full" => Ok(Structure::LayerwiseFull),
            "global_full" => Ok(Structure::GlobalFull),
            other => Err(BnnpError::InvalidInput(format!("unknown structure '{other}'"))),
        }
    }
}

/// Covariance storage, one variant per structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Covariance {
    Diagonal(Vector),
    /// One dense block per unit; the mean is the concatenation of unit means.
    Unitwise(Vec<Mat>),
    Layerwise(Mat),
    /// Dense covariance plus the number of weights in each layer.
    Global { cov: Mat, layer_sizes: Vec<usize> },
}

/// Gaussian over a block of weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFactor {
    pub mean: Vector,
    pub covariance: Covariance,
}

/// Lower-triangular square root of a [`GaussianFactor`]'s covariance.
#[derive(Debug, Clone)]
pub struct CholeskyCache {
    pub factor: Root,
    pub log_det: f64,
}

/// Square-root storage matching the covariance structure.
#[derive(Debug, Clone)]
pub enum Root {
    Diagonal(Vector),
    Blocks(Vec<Mat>),
    Dense(Mat),
}

impl Root {
    /// `L ε`.
    pub fn apply(&self, eps: &Vector) -> Vector {
        match self {
            Root::Diagonal(s) => s.component_mul(eps),
            Root::Dense(l) => l * eps,
            Root::Blocks(blocks) => {
                let mut out = Vector::zeros(eps.len());
                let mut o = 0;
                for b in blocks {
                    let n = b.nrows();
                    out.rows_mut(o, n).copy_from(&(b * eps.rows(o, n)));
                    o += n;
                }
                out
            }
        }
    }

    pub fn to_dense(&self) -> Mat {
        match self {
            Root::Diagonal(s) => Mat::from_diagonal(s),
            Root::Dense(l) => l.clone(),
            Root::Blocks(blocks) => crate::linalg::block_diag(blocks),
        }
    }
}

enum Partition {
    Diagonal,
    Blocks(Vec<usize>),
    Dense,
}

impl GaussianFactor {
    pub fn diagonal(mean: Vector, variances: Vector) -> Self {
        assert_eq!(mean.len(), variances.len());
        Self { mean, covariance: Covariance::Diagonal(variances) }
    }

    pub fn unitwise(mean: Vector, blocks: Vec<Mat>) -> Self {
        assert_eq!(mean.len(), blocks.iter().map(|b| b.nrows()).sum::<usize>());
        Self { mean, covariance: Covariance::Unitwise(blocks) }
    }

    pub fn layerwise(mean: Vector, cov: Mat) -> Self {
        assert_eq!(mean.len(), cov.nrows());
        Self { mean, covariance: Covariance::Layerwise(cov) }
    }

    pub fn global(mean: Vector, cov: Mat, layer_sizes: Vec<usize>) -> Self {
        assert_eq!(mean.len(), cov.nrows());
        assert_eq!(mean.len(), layer_sizes.iter().sum::<usize>());
        Self { mean, covariance: Covariance::Global { cov, layer_sizes } }
    }

    /// `N(0, I_n)` with diagonal structure.
    pub fn standard(n: usize) -> Self {
        Self::diagonal(Vector::zeros(n), Vector::from_element(n, 1.0))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn structure(&self) -> Structure {
        match self.covariance {
            Covariance::Diagonal(_) => Structure::Diagonal,
            Covariance::Unitwise(_) => Structure::UnitwiseFull,
            Covariance::Layerwise(_) => Structure::LayerwiseFull,
            Covariance::Global { .. } => Structure::GlobalFull,
        }
    }

    pub fn dense_covariance(&self) -> Mat {
        match &self.covariance {
            Covariance::Diagonal(v) => Mat::from_diagonal(v),
            Covariance::Unitwise(blocks) => crate::linalg::block_diag(blocks),
            Covariance::Layerwise(c) => c.clone(),
            Covariance::Global { cov, .. } => cov.clone(),
        }
    }

    fn partition(&self) -> Partition {
        match &self.covariance {
            Covariance::Diagonal(_) => Partition::Diagonal,
            Covariance::Unitwise(b) => Partition::Blocks(b.iter().map(|m| m.nrows()).collect()),
            _ => Partition::Dense,
        }
    }

    /// Covariance restricted to the given consecutive block sizes.
    fn covariance_blocks(&self, sizes: &[usize]) -> Vec<Mat> {
        let dense;
        let full: &Mat = match &self.covariance {
            Covariance::Unitwise(b) if b.iter().map(|m| m.nrows()).eq(sizes.iter().copied()) => {
                return b.clone();
            }
            Covariance::Diagonal(v) => {
                let mut o = 0;
                return sizes
                    .iter()
                    .map(|&n| {
                        let m = Mat::from_diagonal(&v.rows(o, n).into_owned());
                        o += n;
                        m
                    })
                    .collect();
            }
            Covariance::Layerwise(c) | Covariance::Global { cov: c, .. } => c,
            Covariance::Unitwise(_) => {
                dense = self.dense_covariance();
                &dense
            }
        };
        let mut o = 0;
        sizes
            .iter()
            .map(|&n| {
                let m = full.view((o, o), (n, n)).into_owned();
                o += n;
                m
            })
            .collect()
    }

    /// Cholesky factorisation of the covariance (structure preserving).
    pub fn cholesky(&self) -> Result<CholeskyCache> {
        match &self.covariance {
            Covariance::Diagonal(v) => {
                if v.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                    return Err(BnnpError::NotPositiveDefinite {
                        context: "diagonal covariance".into(),
                        jitter: 0.0,
                    });
                }
                Ok(CholeskyCache {
                    factor: Root::Diagonal(v.map(f64::sqrt)),
                    log_det: v.iter().map(|x| x.ln()).sum(),
                })
            }
            Covariance::Unitwise(blocks) => {
                let mut log_det = 0.0;
                let mut factors = Vec::with_capacity(blocks.len());
                for (u, b) in blocks.iter().enumerate() {
                    let (l, _) = cholesky_jittered(b, &format!("unit {u} covariance"))?;
                    log_det += log_det_from_factor(&l);
                    factors.push(l);
                }
                Ok(CholeskyCache { factor: Root::Blocks(factors), log_det })
            }
            Covariance::Layerwise(c) | Covariance::Global { cov: c, .. } => {
                let (l, _) = cholesky_jittered(c, "dense covariance")?;
                let log_det = log_det_from_factor(&l);
                Ok(CholeskyCache { factor: Root::Dense(l), log_det })
            }
        }
    }

    /// Reparameterised draw `m + L ε`.
    pub fn sample(&self, noise: &Vector) -> Result<Vector> {
        if noise.len() != self.dim() {
            return Err(BnnpError::DimensionMismatch(format!(
                "noise of length {} for a {}-dimensional Gaussian",
                noise.len(),
                self.dim()
            )));
        }
        Ok(&self.mean + self.cholesky()?.factor.apply(noise))
    }
}

fn check_finite_vec(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(BnnpError::InvalidInput(format!("non-finite value in {what}")));
    }
    Ok(())
}

/// Dense Gaussian posterior for prior `N(μ, LLᵀ)` and linear-Gaussian
/// evidence with precision term `H` and information vector `h`, i.e.
/// `S⁻¹ = Σ⁻¹ + H`, `m = S(Σ⁻¹μ + h)`.
fn dense_posterior(mean: &Vector, l: &Mat, h_mat: &Mat, h_vec: &Vector, context: &str) -> Result<(Vector, Mat)> {
    let n = mean.len();
    let mut a = l.transpose() * h_mat * l;
    for i in 0..n {
        a[(i, i)] += 1.0;
    }
    symmetrize(&mut a);
    let (m, _) = cholesky_jittered(&a, context)?;
    let resid = h_vec - h_mat * mean;
    let r = l.tr_mul(&resid);
    let r = Mat::from_column_slice(n, 1, r.as_slice());
    let mv = solve_lower_transpose(&m, &solve_lower(&m, &r));
    let post_mean = mean + l * Vector::from_column_slice(mv.as_slice());
    let root = l * solve_lower_transpose(&m, &Mat::identity(n, n));
    let mut cov = &root * root.transpose();
    symmetrize(&mut cov);
    Ok((post_mean, cov))
}

/// Bayesian linear-regression update of a single unit's weights.
///
/// `design` is `N x D`; the prior must be over `D` weights with diagonal or
/// single-block unitwise covariance (a dense layerwise factor is accepted
/// too). The result has unitwise structure with one block.
pub fn conjugate_update(prior: &GaussianFactor, design: &Mat, targets: &Vector, precisions: &Vector) -> Result<GaussianFactor> {
    let d = prior.dim();
    if design.ncols() != d || design.nrows() != targets.len() || targets.len() != precisions.len() {
        return Err(BnnpError::DimensionMismatch(format!(
            "design {}x{}, {} targets, {} precisions for {d} weights",
            design.nrows(),
            design.ncols(),
            targets.len(),
            precisions.len()
        )));
    }
    if let Covariance::Unitwise(b) = &prior.covariance {
        if b.len() != 1 {
            return Err(BnnpError::InvalidInput(
                "conjugate_update takes a single-unit prior; use conjugate_update_vec for layers".into(),
            ));
        }
    }
    check_finite_vec(design.as_slice(), "design")?;
    check_finite_vec(targets.as_slice(), "targets")?;
    check_finite_vec(precisions.as_slice(), "precisions")?;
    if precisions.iter().any(|p| !(*p > 0.0)) {
        return Err(BnnpError::InvalidInput("precisions must be strictly positive".into()));
    }
    if design.nrows() == 0 {
        return Ok(prior.clone());
    }
    let l = prior.cholesky()?.factor.to_dense();
    let weighted = Mat::from_fn(design.nrows(), d, |i, j| design[(i, j)] * precisions[i]);
    let h_mat = design.tr_mul(&weighted);
    let h_vec = design.tr_mul(&targets.component_mul(precisions));
    let (m, s) = dense_posterior(&prior.mean, &l, &h_mat, &h_vec, "unit posterior")?;
    Ok(GaussianFactor::unitwise(m, vec![s]))
}

/// Conjugate update of a whole layer's weights `vec(W)` (unit-major, each
/// unit's `D` input weights contiguous) under a dense prior.
///
/// The evidence precision is block diagonal with blocks `φᵀ diag(λ_u) φ`
/// and the information vector is `vec(φᵀ (Λ ∘ Y))`.
pub fn conjugate_update_vec(prior: &GaussianFactor, activations: &Mat, targets: &Mat, precisions: &Mat) -> Result<GaussianFactor> {
    let (n, d) = activations.shape();
    let u = targets.ncols();
    if prior.dim() != d * u || targets.nrows() != n || precisions.shape() != targets.shape() {
        return Err(BnnpError::DimensionMismatch(format!(
            "activations {n}x{d}, targets {}x{u}, precisions {}x{} for {} weights",
            targets.nrows(),
            precisions.nrows(),
            precisions.ncols(),
            prior.dim()
        )));
    }
    check_finite_vec(activations.as_slice(), "activations")?;
    check_finite_vec(targets.as_slice(), "targets")?;
    check_finite_vec(precisions.as_slice(), "precisions")?;
    if precisions.iter().any(|p| !(*p > 0.0)) {
        return Err(BnnpError::InvalidInput("precisions must be strictly positive".into()));
    }
    if n == 0 {
        return Ok(prior.clone());
    }
    let mut blocks = Vec::with_capacity(u);
    for k in 0..u {
        let weighted = Mat::from_fn(n, d, |i, j| activations[(i, j)] * precisions[(i, k)]);
        blocks.push(activations.tr_mul(&weighted));
    }
    let h_mat = crate::linalg::block_diag(&blocks);
    let info = activations.tr_mul(&targets.component_mul(precisions));
    let h_vec = Vector::from_column_slice(info.as_slice());
    let l = prior.cholesky()?.factor.to_dense();
    let (m, s) = dense_posterior(&prior.mean, &l, &h_mat, &h_vec, "layer posterior")?;
    Ok(GaussianFactor::layerwise(m, s))
}

/// Conditional of layer `layer` (zero-based) of a global Gaussian given the
/// realised weights of all earlier layers.
pub fn condition_on_previous(global: &GaussianFactor, realized_weights: &Vector, layer: usize) -> Result<GaussianFactor> {
    let Covariance::Global { cov, layer_sizes } = &global.covariance else {
        return Err(BnnpError::InvalidInput("condition_on_previous needs a global factor".into()));
    };
    if layer >= layer_sizes.len() {
        return Err(BnnpError::InvalidInput(format!(
            "layer {layer} out of range for {} layers",
            layer_sizes.len()
        )));
    }
    let p: usize = layer_sizes[..layer].iter().sum();
    let c = layer_sizes[layer];
    if realized_weights.len() != p {
        return Err(BnnpError::DimensionMismatch(format!(
            "{} realised weights, expected {p}",
            realized_weights.len()
        )));
    }
    let mu_c = global.mean.rows(p, c).into_owned();
    let s_cc = cov.view((p, p), (c, c)).into_owned();
    if p == 0 {
        return Ok(GaussianFactor::layerwise(mu_c, s_cc));
    }
    let s_pp = cov.view((0, 0), (p, p)).into_owned();
    let s_pc = cov.view((0, p), (p, c)).into_owned();
    let (lp, _) = cholesky_jittered(&s_pp, &format!("covariance of layers before {layer}"))?;
    let w = solve_lower(&lp, &s_pc);
    let delta = realized_weights - global.mean.rows(0, p);
    let z = solve_lower(&lp, &Mat::from_column_slice(p, 1, delta.as_slice()));
    let mean = mu_c + Vector::from_column_slice((w.tr_mul(&z)).as_slice());
    let mut s = s_cc - w.tr_mul(&w);
    symmetrize(&mut s);
    Ok(GaussianFactor::layerwise(mean, s))
}

fn kl_dense(mq: &Vector, sq: &Mat, mp: &Vector, sp: &Mat) -> Result<f64> {
    let n = mq.len() as f64;
    let (lq, _) = cholesky_jittered(sq, "KL first argument")?;
    let (lp, _) = cholesky_jittered(sp, "KL second argument")?;
    let trace = solve_lower(&lp, &lq).norm_squared();
    let delta = mp - mq;
    let quad = solve_lower(&lp, &Mat::from_column_slice(delta.len(), 1, delta.as_slice())).norm_squared();
    Ok(0.5 * (trace + quad - n + log_det_from_factor(&lp) - log_det_from_factor(&lq)))
}

/// `KL[q ‖ p]`, promoting to the coarsest structure both share.
pub fn kl_divergence(q: &GaussianFactor, p: &GaussianFactor) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(BnnpError::DimensionMismatch(format!("KL between dims {} and {}", q.dim(), p.dim())));
    }
    match (q.partition(), p.partition()) {
        (Partition::Diagonal, Partition::Diagonal) => {
            let (Covariance::Diagonal(vq), Covariance::Diagonal(vp)) = (&q.covariance, &p.covariance) else {
                unreachable!()
            };
            Ok(0.5
                * (0..q.dim())
                    .map(|i| {
                        let d = q.mean[i] - p.mean[i];
                        vq[i] / vp[i] + d * d / vp[i] - 1.0 + (vp[i] / vq[i]).ln()
                    })
                    .sum::<f64>())
        }
        (Partition::Dense, _) | (_, Partition::Dense) => {
            kl_dense(&q.mean, &q.dense_covariance(), &p.mean, &p.dense_covariance())
        }
        (Partition::Blocks(a), Partition::Blocks(b)) if a != b => {
            kl_dense(&q.mean, &q.dense_covariance(), &p.mean, &p.dense_covariance())
        }
        (Partition::Blocks(sizes), _) | (_, Partition::Blocks(sizes)) => {
            let bq = q.covariance_blocks(&sizes);
            let bp = p.covariance_blocks(&sizes);
            let mut total = 0.0;
            let mut o = 0;
            for ((cq, cp), &n) in bq.iter().zip(&bp).zip(&sizes) {
                total += kl_dense(
                    &q.mean.rows(o, n).into_owned(),
                    cq,
                    &p.mean.rows(o, n).into_owned(),
                    cp,
                )?;
                o += n;
            }
            Ok(total)
        }
    }
}

/// Differentiable `mean + factor · eps` (column-wise for several draws).
pub fn reparameterise<'t>(mean: Var<'t>, factor: Var<'t>, eps: Var<'t>) -> Var<'t> {
    factor.matmul(eps).add_col(mean)
}

/// Square root of a prior covariance on the tape.
#[derive(Clone, Copy, Debug)]
pub enum PriorRoot<'t> {
    /// Standard deviations as an `n x 1` column.
    Diagonal(Var<'t>),
    /// Lower-triangular `n x n` factor.
    Dense(Var<'t>),
}

impl<'t> PriorRoot<'t> {
    pub fn dim(&self) -> usize {
        match self {
            PriorRoot::Diagonal(s) => s.rows(),
            PriorRoot::Dense(l) => l.rows(),
        }
    }

    /// `Φ L`.
    pub fn design(&self, phi: Var<'t>) -> Var<'t> {
        match *self {
            PriorRoot::Diagonal(s) => phi.scale_cols(s.t()),
            PriorRoot::Dense(l) => phi.matmul(l),
        }
    }

    /// `L z`.
    pub fn apply(&self, z: Var<'t>) -> Var<'t> {
        match *self {
            PriorRoot::Diagonal(s) => z.scale_rows(s),
            PriorRoot::Dense(l) => l.matmul(z),
        }
    }

    pub fn detach(self) -> Self {
        match self {
            PriorRoot::Diagonal(s) => PriorRoot::Diagonal(s.detach()),
            PriorRoot::Dense(l) => PriorRoot::Dense(l.detach()),
        }
    }
}

/// Accumulated whitened evidence `(A − I, r)`.
#[derive(Clone, Copy, Debug)]
pub struct Evidence<'t> {
    pub gram: Var<'t>,
    pub info: Var<'t>,
}

impl<'t> Evidence<'t> {
    /// Evidence from whitened design `B = Φ L` (`m x n`), precisions and
    /// residuals `y − Φμ` (both `m x 1`).
    pub fn from_design(b: Var<'t>, precisions: Var<'t>, residuals: Var<'t>) -> Self {
        let gram = b.tr_matmul(b.scale_rows(precisions));
        let info = b.tr_matmul(residuals.hadamard(precisions));
        Self { gram, info }
    }

    pub fn combine(self, other: Evidence<'t>) -> Self {
        Self {
            gram: self.gram + other.gram,
            info: self.info + other.info,
        }
    }

    pub fn sum(parts: &[Evidence<'t>]) -> Option<Self> {
        parts.iter().copied().reduce(Evidence::combine)
    }
}

/// Differentiable closed-form posterior in prior-whitened coordinates.
#[derive(Clone, Copy, Debug)]
pub struct WhitenedPosterior<'t> {
    pub prior_mean: Var<'t>,
    pub root: PriorRoot<'t>,
    /// Cholesky factor `M` of `A = I + BᵀΛB`.
    pub chol: Var<'t>,
    /// `M⁻¹ r`.
    pub half: Var<'t>,
    /// Whitened posterior mean `A⁻¹ r`.
    pub whitened_mean: Var<'t>,
}

impl<'t> WhitenedPosterior<'t> {
    /// Posterior for prior `N(prior_mean, LLᵀ)`; `None` evidence gives the prior.
    pub fn new(prior_mean: Var<'t>, root: PriorRoot<'t>, evidence: Option<Evidence<'t>>, context: &str) -> Result<Self> {
        let tape = prior_mean.tape();
        let n = root.dim();
        let (chol, half) = match evidence {
            None => (tape.identity(n), tape.constant(Mat::zeros(n, 1))),
            Some(ev) => {
                let a = ev.gram.offset_diag(tape, 1.0);
                let chol = a.cholesky(context)?;
                (chol, chol.solve_lower(ev.info))
            }
        };
        let whitened_mean = chol.solve_lower_t(half);
        Ok(Self { prior_mean, root, chol, half, whitened_mean })
    }

    pub fn tape(&self) -> &'t Tape {
        self.prior_mean.tape()
    }

    pub fn dim(&self) -> usize {
        self.root.dim()
    }

    pub fn mean(&self) -> Var<'t> {
        self.root.apply(self.whitened_mean) + self.prior_mean
    }

    /// One draw per column of `eps` (`n x K`).
    pub fn samples(&self, eps: Var<'t>) -> Var<'t> {
        let z = self.chol.solve_lower_t(eps.add_col(self.half));
        self.root.apply(z).add_col(self.prior_mean)
    }

    /// `KL[posterior ‖ prior]`.
    pub fn kl(&self) -> Var<'t> {
        let tape = self.tape();
        let n = self.dim();
        let inv = self.chol.solve_lower(tape.identity(n));
        (inv.sum_squares() + self.whitened_mean.sum_squares()).offset(-(n as f64)).scale(0.5)
            + self.chol.log_diag_sum()
    }

    /// Posterior covariance `L A⁻¹ Lᵀ` (for inspection, not for training).
    pub fn covariance(&self) -> Mat {
        let tape = self.tape();
        let n = self.dim();
        let root = self.root.apply(self.chol.solve_lower_t(tape.identity(n)).detach());
        let r = root.value();
        let mut c = &r * r.transpose();
        symmetrize(&mut c);
        c
    }
}

impl<'t> Var<'t> {
    /// `self + c I` for a square matrix.
    pub fn offset_diag(self, tape: &'t Tape, c: f64) -> Var<'t> {
        self + tape.constant(Mat::identity(self.rows(), self.cols()) * c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn spd(rng: &mut ChaCha8Rng, n: usize) -> Mat {
        let a = randn(rng, n, n);
        &a * a.transpose() / n as f64 + Mat::identity(n, n) * 0.5
    }

    fn vecn(rng: &mut ChaCha8Rng, n: usize) -> Vector {
        Vector::from_column_slice(randn(rng, n, 1).as_slice())
    }

    /// Textbook precision-form posterior with explicit inverses.
    fn inverse_oracle(mean: &Vector, cov: &Mat, design: &Mat, y: &Vector, lam: &Vector) -> (Vector, Mat) {
        let prec = cov.clone().try_inverse().unwrap() + design.transpose() * Mat::from_diagonal(lam) * design;
        let s = prec.try_inverse().unwrap();
        let m = &s * (cov.clone().try_inverse().unwrap() * mean + design.transpose() * lam.component_mul(y));
        (m, s)
    }

    #[test]
    fn empty_evidence_returns_prior() {
        let prior = GaussianFactor::diagonal(Vector::from_vec(vec![0.3, -1.0]), Vector::from_vec(vec![2.0, 0.5]));
        let post = conjugate_update(&prior, &Mat::zeros(0, 2), &Vector::zeros(0), &Vector::zeros(0)).unwrap();
        assert_eq!(post, prior);
    }

    #[test]
    fn scalar_update_matches_quadrature() {
        let prior = GaussianFactor::standard(1);
        let post = conjugate_update(&prior, &Mat::from_element(1, 1, 1.0), &Vector::from_element(1, 1.0), &Vector::from_element(1, 1.0)).unwrap();
        // trapezoidal moments of N(w;0,1) N(1;w,1)
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        let h = 1e-3;
        let mut w: f64 = -12.0;
        while w <= 12.0 {
            let dens = (-0.5 * w * w - 0.5 * (1.0 - w) * (1.0 - w)).exp();
            z += dens;
            m1 += w * dens;
            m2 += w * w * dens;
            w += h;
        }
        let mean = m1 / z;
        let var = m2 / z - mean * mean;
        assert_relative_eq!(post.mean[0], mean, epsilon = 1e-8);
        assert_relative_eq!(post.dense_covariance()[(0, 0)], var, epsilon = 1e-8);
        assert_relative_eq!(post.mean[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(post.dense_covariance()[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn vanishing_precision_keeps_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = spd(&mut rng, 3);
        let prior = GaussianFactor::unitwise(vecn(&mut rng, 3), vec![cov.clone()]);
        let design = randn(&mut rng, 5, 3);
        let post = conjugate_update(&prior, &design, &vecn(&mut rng, 5), &Vector::from_element(5, 1e-30)).unwrap();
        assert!(crate::linalg::max_relative_diff(&post.dense_covariance(), &cov) < 1e-6);
        let dm = (&post.mean - &prior.mean).amax() / prior.mean.amax();
        assert!(dm < 1e-6);
    }

    #[test]
    fn update_matches_inverse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for d in 1..=8 {
            let cov = spd(&mut rng, d);
            let mean = vecn(&mut rng, d);
            let design = randn(&mut rng, 6, d);
            let y = vecn(&mut rng, 6);
            let lam = vecn(&mut rng, 6).map(|x| x.exp());
            let post = conjugate_update(&GaussianFactor::unitwise(mean.clone(), vec![cov.clone()]), &design, &y, &lam).unwrap();
            let (m, s) = inverse_oracle(&mean, &cov, &design, &y, &lam);
            assert!((&post.mean - &m).amax() / m.amax() < 1e-9);
            assert!(crate::linalg::max_relative_diff(&post.dense_covariance(), &s) < 1e-9);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let prior = GaussianFactor::standard(1);
        let err = conjugate_update(&prior, &Mat::from_element(1, 1, f64::NAN), &Vector::from_element(1, 1.0), &Vector::from_element(1, 1.0)).unwrap_err();
        assert!(matches!(err, BnnpError::InvalidInput(_)));
    }

    #[test]
    fn vec_update_matches_kronecker_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d, u) = (4, 3, 2);
        let cov = spd(&mut rng, d * u);
        let mean = vecn(&mut rng, d * u);
        let x = randn(&mut rng, n, d);
        let y = randn(&mut rng, n, u);
        let lam = randn(&mut rng, n, u).map(|v| v.exp());
        let post = conjugate_update_vec(&GaussianFactor::layerwise(mean.clone(), cov.clone()), &x, &y, &lam).unwrap();
        // row (n, k) of the big design is e_kᵀ ⊗ xₙᵀ
        let big = Mat::from_fn(n * u, d * u, |row, col| {
            let (k, i) = (row / n, row % n);
            if col / d == k { x[(i, col % d)] } else { 0.0 }
        });
        let yv = Vector::from_column_slice(y.as_slice());
        let lv = Vector::from_column_slice(lam.as_slice());
        let (m, s) = inverse_oracle(&mean, &cov, &big, &yv, &lv);
        assert!((&post.mean - &m).amax() / m.amax() < 1e-8);
        assert!(crate::linalg::max_relative_diff(&post.dense_covariance(), &s) < 1e-8);
    }

    #[test]
    fn block_diagonal_layer_prior_matches_unitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, d, u) = (5, 3, 2);
        let blocks = vec![spd(&mut rng, d), spd(&mut rng, d)];
        let mean = vecn(&mut rng, d * u);
        let x = randn(&mut rng, n, d);
        let y = randn(&mut rng, n, u);
        let lam = randn(&mut rng, n, u).map(|v| v.exp());
        let layer = GaussianFactor::layerwise(mean.clone(), crate::linalg::block_diag(&blocks));
        let post = conjugate_update_vec(&layer, &x, &y, &lam).unwrap();
        for k in 0..u {
            let unit = GaussianFactor::unitwise(mean.rows(k * d, d).into_owned(), vec![blocks[k].clone()]);
            let pu = conjugate_update(&unit, &x, &Vector::from_column_slice(y.column(k).as_slice()), &Vector::from_column_slice(lam.column(k).as_slice())).unwrap();
            assert!((post.mean.rows(k * d, d) - &pu.mean).amax() < 1e-10);
            let block = post.dense_covariance().view((k * d, k * d), (d, d)).into_owned();
            assert!(crate::linalg::max_relative_diff(&block, &pu.dense_covariance()) < 1e-10);
        }
        let empty = conjugate_update_vec(&layer, &Mat::zeros(0, d), &Mat::zeros(0, u), &Mat::zeros(0, u)).unwrap();
        assert_eq!(empty, layer);
    }

    #[test]
    fn sequential_updates_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 3;
        let x = randn(&mut rng, 7, d);
        let y = vecn(&mut rng, 7);
        let lam = vecn(&mut rng, 7).map(|v| v.exp());
        let priors = [
            GaussianFactor::diagonal(vecn(&mut rng, d), vecn(&mut rng, d).map(|v| v.exp())),
            GaussianFactor::unitwise(vecn(&mut rng, d), vec![spd(&mut rng, d)]),
            GaussianFactor::layerwise(vecn(&mut rng, d), spd(&mut rng, d)),
        ];
        for prior in &priors {
            let full = conjugate_update(prior, &x, &y, &lam).unwrap();
            let first = conjugate_update(prior, &x.rows(0, 3).into_owned(), &y.rows(0, 3).into_owned(), &lam.rows(0, 3).into_owned()).unwrap();
            let second = conjugate_update(&first, &x.rows(3, 4).into_owned(), &y.rows(3, 4).into_owned(), &lam.rows(3, 4).into_owned()).unwrap();
            assert!((&second.mean - &full.mean).amax() / full.mean.amax() < 1e-8);
            assert!(crate::linalg::max_relative_diff(&second.dense_covariance(), &full.dense_covariance()) < 1e-8);
        }
        // layer-level sequential consistency
        let (u, n) = (2, 6);
        let layer = GaussianFactor::layerwise(vecn(&mut rng, d * u), spd(&mut rng, d * u));
        let x = randn(&mut rng, n, d);
        let y = randn(&mut rng, n, u);
        let lam = randn(&mut rng, n, u).map(|v| v.exp());
        let full = conjugate_update_vec(&layer, &x, &y, &lam).unwrap();
        let a = conjugate_update_vec(&layer, &x.rows(0, 2).into_owned(), &y.rows(0, 2).into_owned(), &lam.rows(0, 2).into_owned()).unwrap();
        let b = conjugate_update_vec(&a, &x.rows(2, 4).into_owned(), &y.rows(2, 4).into_owned(), &lam.rows(2, 4).into_owned()).unwrap();
        assert!((&b.mean - &full.mean).amax() / full.mean.amax() < 1e-8);
        assert!(crate::linalg::max_relative_diff(&b.dense_covariance(), &full.dense_covariance()) < 1e-8);
    }

    #[test]
    fn bivariate_conditioning() {
        let cov = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let g = GaussianFactor::global(Vector::zeros(2), cov, vec![1, 1]);
        let c = condition_on_previous(&g, &Vector::from_element(1, 1.0), 1).unwrap();
        assert_relative_eq!(c.mean[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(c.dense_covariance()[(0, 0)], 0.75, epsilon = 1e-14);
        let first = condition_on_previous(&g, &Vector::zeros(0), 0).unwrap();
        assert_relative_eq!(first.dense_covariance()[(0, 0)], 1.0);
    }

    #[test]
    fn independent_layers_condition_to_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let blocks = vec![spd(&mut rng, 2), spd(&mut rng, 3)];
        let mean = vecn(&mut rng, 5);
        let g = GaussianFactor::global(mean.clone(), crate::linalg::block_diag(&blocks), vec![2, 3]);
        let c = condition_on_previous(&g, &vecn(&mut rng, 2), 1).unwrap();
        assert!((&c.mean - mean.rows(2, 3)).amax() < 1e-14);
        assert!((c.dense_covariance() - &blocks[1]).amax() < 1e-14);
    }

    #[test]
    fn conditional_equals_lower_block_of_global_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cov = spd(&mut rng, 5);
        let mean = vecn(&mut rng, 5);
        let g = GaussianFactor::global(mean.clone(), cov.clone(), vec![2, 3]);
        let w = vecn(&mut rng, 2);
        let c = condition_on_previous(&g, &w, 1).unwrap();
        let l = cov.cholesky().unwrap().unpack();
        let lcc = l.view((2, 2), (3, 3)).into_owned();
        assert!((c.dense_covariance() - &lcc * lcc.transpose()).amax() < 1e-12);
        let lpp = l.view((0, 0), (2, 2)).into_owned();
        let z = solve_lower(&lpp, &Mat::from_column_slice(2, 1, (&w - mean.rows(0, 2)).as_slice()));
        let m = mean.rows(2, 3) + l.view((2, 0), (3, 2)) * z;
        assert!((c.mean - Vector::from_column_slice(m.as_slice())).amax() < 1e-12);
    }

    #[test]
    fn kl_reference_values() {
        let p = GaussianFactor::standard(1);
        let q = GaussianFactor::diagonal(Vector::from_element(1, 1.0), Vector::from_element(1, 1.0));
        assert_relative_eq!(kl_divergence(&q, &p).unwrap(), 0.5, epsilon = 1e-14);
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dense = GaussianFactor::layerwise(vecn(&mut rng, 4), spd(&mut rng, 4));
        assert!(kl_divergence(&dense, &dense).unwrap().abs() < 1e-10);
        assert!(matches!(kl_divergence(&dense, &p), Err(BnnpError::DimensionMismatch(_))));
    }

    #[test]
    fn kl_is_additive_over_blocks_and_structures_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let qb = vec![spd(&mut rng, 2), spd(&mut rng, 3)];
        let pb = vec![spd(&mut rng, 2), spd(&mut rng, 3)];
        let qm = vecn(&mut rng, 5);
        let pm = vecn(&mut rng, 5);
        let q = GaussianFactor::unitwise(qm.clone(), qb.clone());
        let p = GaussianFactor::unitwise(pm.clone(), pb.clone());
        let parts: f64 = (0..2)
            .map(|k| {
                let (o, n) = if k == 0 { (0, 2) } else { (2, 3) };
                kl_divergence(
                    &GaussianFactor::layerwise(qm.rows(o, n).into_owned(), qb[k].clone()),
                    &GaussianFactor::layerwise(pm.rows(o, n).into_owned(), pb[k].clone()),
                )
                .unwrap()
            })
            .sum();
        let whole = kl_divergence(&q, &p).unwrap();
        assert_relative_eq!(whole, parts, max_relative = 1e-10);
        let dense = kl_divergence(
            &GaussianFactor::layerwise(qm.clone(), q.dense_covariance()),
            &GaussianFactor::layerwise(pm.clone(), p.dense_covariance()),
        )
        .unwrap();
        assert_relative_eq!(whole, dense, max_relative = 1e-10);
        // mixed diagonal/unitwise promotion
        let pd = GaussianFactor::diagonal(pm.clone(), vecn(&mut rng, 5).map(|v| v.exp()));
        let mixed = kl_divergence(&q, &pd).unwrap();
        let reference = kl_divergence(
            &GaussianFactor::layerwise(qm, q.dense_covariance()),
            &GaussianFactor::layerwise(pm, pd.dense_covariance()),
        )
        .unwrap();
        assert_relative_eq!(mixed, reference, max_relative = 1e-10);
    }

    #[test]
    fn sample_moments_converge() {
        let cov = Mat::from_row_slice(3, 3, &[2.0, 0.8, 0.6, 0.8, 1.5, 0.5, 0.6, 0.5, 1.0]);
        let mean = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let g = GaussianFactor::layerwise(mean.clone(), cov.clone());
        assert_eq!(g.sample(&Vector::zeros(3)).unwrap(), mean);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 100_000;
        let mut acc = Mat::zeros(3, 3);
        let mut mu = Vector::zeros(3);
        let draws: Vec<Vector> = (0..n).map(|_| g.sample(&vecn(&mut rng, 3)).unwrap()).collect();
        for d in &draws {
            mu += d;
        }
        mu /= n as f64;
        for d in &draws {
            let c = d - &mu;
            acc += &c * c.transpose();
        }
        acc /= (n - 1) as f64;
        for i in 0..3 {
            for j in 0..3 {
                assert!((acc[(i, j)] - cov[(i, j)]).abs() <= 0.05 * cov[(i, j)].abs());
            }
        }
        let eye = GaussianFactor::standard(3);
        let eps = Vector::from_vec(vec![0.1, -0.4, 2.0]);
        assert_eq!(eye.sample(&eps).unwrap(), eps);
    }

    #[test]
    fn reparameterised_sample_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mean = randn(&mut rng, 3, 1);
        let raw = randn(&mut rng, 3, 3);
        let eps = randn(&mut rng, 3, 1);
        let weights = randn(&mut rng, 3, 1);
        let f = |m: &Mat, r: &Mat, t: &Tape| -> (f64, Vec<Mat>) {
            let mv = t.leaf(m.clone());
            let rv = t.leaf(r.clone());
            let l = rv.chol_decode(-30.0);
            let s = reparameterise(mv, l, t.constant(eps.clone()));
            let out = s.hadamard(t.constant(weights.clone())).tanh().sum();
            (out.scalar(), t.gradients(out, &[mv, rv]))
        };
        let t = Tape::new();
        let (_, grads) = f(&mean, &raw, &t);
        let h = 1e-5;
        for (k, base) in [&mean, &raw].into_iter().enumerate() {
            for idx in 0..base.len() {
                let mut p = [mean.clone(), raw.clone()];
                let mut m = [mean.clone(), raw.clone()];
                p[k][idx] += h;
                m[k][idx] -= h;
                let fd = (f(&p[0], &p[1], &Tape::new()).0 - f(&m[0], &m[1], &Tape::new()).0) / (2.0 * h);
                let ad = grads[k][idx];
                assert!((fd - ad).abs() <= 1e-4 * fd.abs().max(ad.abs()).max(1e-8) + 1e-10, "{k}/{idx}: {ad} vs {fd}");
            }
        }
    }

    #[test]
    fn whitened_posterior_matches_f64_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let d = 4;
        let cov = spd(&mut rng, d);
        let mean = vecn(&mut rng, d);
        let x = randn(&mut rng, 9, d);
        let y = vecn(&mut rng, 9);
        let lam = vecn(&mut rng, 9).map(|v| v.exp());
        let reference = conjugate_update(&GaussianFactor::unitwise(mean.clone(), vec![cov.clone()]), &x, &y, &lam).unwrap();
        let t = Tape::new();
        let mu = t.constant(Mat::from_column_slice(d, 1, mean.as_slice()));
        let root = PriorRoot::Dense(t.constant(cov.clone().cholesky().unwrap().unpack()));
        let phi = t.constant(x.clone());
        let resid = t.constant(Mat::from_column_slice(9, 1, y.as_slice())) - phi.matmul(mu);
        let ev = Evidence::from_design(root.design(phi), t.constant(Mat::from_column_slice(9, 1, lam.as_slice())), resid);
        let post = WhitenedPosterior::new(mu, root, Some(ev), "test").unwrap();
        let m = post.mean().value();
        assert!((Vector::from_column_slice(m.as_slice()) - &reference.mean).amax() < 1e-10);
        assert!(crate::linalg::max_relative_diff(&post.covariance(), &reference.dense_covariance()) < 1e-10);
        let prior = GaussianFactor::layerwise(mean, cov);
        let kl = kl_divergence(&reference, &prior).unwrap();
        assert_relative_eq!(post.kl().scalar(), kl, max_relative = 1e-9);
    }

    #[test]
    fn posterior_covariance_never_exceeds_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let d = 3;
        let cov = spd(&mut rng, d);
        let post = conjugate_update(&GaussianFactor::unitwise(Vector::zeros(d), vec![cov.clone()]), &randn(&mut rng, 4, d), &vecn(&mut rng, 4), &Vector::from_element(4, 2.0)).unwrap();
        let diff = &cov - post.dense_covariance();
        let eig = diff.symmetric_eigenvalues();
        assert!(eig.min() > -1e-10);
    }

    fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Mat {
        randn(rng, n, n).qr().q()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kl_is_nonnegative_and_rotation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let (cq, cp) = (spd(&mut rng, n), spd(&mut rng, n));
            let (mq, mp) = (vecn(&mut rng, n), vecn(&mut rng, n));
            let kl = kl_divergence(&GaussianFactor::layerwise(mq.clone(), cq.clone()), &GaussianFactor::layerwise(mp.clone(), cp.clone())).unwrap();
            prop_assert!(kl >= -1e-12);
            let r = orthogonal(&mut rng, n);
            let rot = kl_divergence(
                &GaussianFactor::layerwise(&r * mq, &r * cq * r.transpose()),
                &GaussianFactor::layerwise(&r * mp, &r * cp * r.transpose()),
            ).unwrap();
            prop_assert!((kl - rot).abs() <= 1e-8 * kl.abs().max(1.0));
        }

        #[test]
        fn cholesky_solves_match_explicit_inverse(seed in 0u64..10_000, n in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = spd(&mut rng, n);
            let b = randn(&mut rng, n, 2);
            let (l, _) = cholesky_jittered(&a, "prop").unwrap();
            let x = solve_lower_transpose(&l, &solve_lower(&l, &b));
            let reference = a.try_inverse().unwrap() * &b;
            prop_assert!(crate::linalg::max_relative_diff(&x, &reference) < 1e-9);
        }
    }
}
