//! Synthetic meta-datasets, context/target splits and the task file format.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_f64, encode_f64};
use crate::error::{BnnpError, Result};
use crate::gaussian::Structure;
use crate::layer::Activation;
use crate::linalg::{cholesky_jittered, Mat};
use crate::model::{predict, WeightSample};
use crate::priors::PriorSet;
use crate::rng::substream;

/// A dataset with a context/target partition of its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub x: Mat,
    pub y: Mat,
    pub context: Vec<usize>,
    pub target: Vec<usize>,
    /// Generator and seed that produced the task.
    pub provenance: String,
}

impl Task {
    /// Task whose rows all belong to the context set.
    pub fn new(x: Mat, y: Mat, provenance: impl Into<String>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(BnnpError::DimensionMismatch(format!("x has {} rows, y has {}", x.nrows(), y.nrows())));
        }
        let context = (0..x.nrows()).collect();
        Ok(Self { x, y, context, target: Vec::new(), provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn context_x(&self) -> Mat {
        self.x.select_rows(&self.context)
    }

    pub fn context_y(&self) -> Mat {
        self.y.select_rows(&self.context)
    }

    pub fn target_x(&self) -> Mat {
        self.x.select_rows(&self.target)
    }

    pub fn target_y(&self) -> Mat {
        self.y.select_rows(&self.target)
    }

    /// Checks that context and target partition the rows.
    pub fn validate(&self) -> Result<()> {
        if self.x.nrows() != self.y.nrows() {
            return Err(BnnpError::DimensionMismatch("x and y row counts differ".into()));
        }
        let mut seen = vec![false; self.len()];
        for &i in self.context.iter().chain(&self.target) {
            if i >= self.len() || seen[i] {
                return Err(BnnpError::InvalidInput(format!("task '{}': context and target overlap or exceed {} rows", self.provenance, self.len())));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(BnnpError::InvalidInput(format!("task '{}': context and target do not cover all rows", self.provenance)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Sawtooth,
    Heaviside,
    BnnPrior,
    GpSe,
}

impl std::str::FromStr for GeneratorKind {
    type Err = BnnpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sawtooth" => Ok(Self::Sawtooth),
            "heaviside" => Ok(Self::Heaviside),
            "bnn_prior" => Ok(Self::BnnPrior),
            "gp_se" => Ok(Self::GpSe),
            other => Err(BnnpError::InvalidInput(format!("unknown generator '{other}'"))),
        }
    }
}

/// Parameters of a synthetic data generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    /// Inclusive range of the number of points per task.
    pub n_range: (usize, usize),
    /// Inputs are uniform on this interval in every dimension.
    pub input_range: (f64, f64),
    pub noise_std: f64,
    #[serde(default = "one")]
    pub lengthscale: f64,
    #[serde(default = "one")]
    pub outputscale: f64,
    /// Architecture of the prior network (`BnnPrior` only).
    #[serde(default)]
    pub widths: Vec<usize>,
    #[serde(default = "relu")]
    pub activation: Activation,
    #[serde(default = "yes")]
    pub bias: bool,
    /// Multiplies prior weight draws (`BnnPrior` only).
    #[serde(default = "one")]
    pub weight_scale: f64,
}

fn one() -> f64 {
    1.0
}
fn relu() -> Activation {
    Activation::Relu
}
fn yes() -> bool {
    true
}

impl GeneratorSpec {
    pub fn sawtooth() -> Self {
        Self::base(GeneratorKind::Sawtooth, (-2.0, 2.0), 0.05)
    }

    pub fn heaviside() -> Self {
        Self::base(GeneratorKind::Heaviside, (-5.0, 5.0), 0.01)
    }

    pub fn gp_se() -> Self {
        Self { lengthscale: 0.5, ..Self::base(GeneratorKind::GpSe, (-5.0, 5.0), 0.05) }
    }

    /// Functions drawn from a standard-initialised `[1, 20, 20, 1]` ReLU network.
    pub fn bnn_prior() -> Self {
        Self {
            n_range: (21, 42),
            widths: vec![1, 20, 20, 1],
            ..Self::base(GeneratorKind::BnnPrior, (-4.0, 4.0), 0.1)
        }
    }

    pub fn for_kind(kind: GeneratorKind) -> Self {
        match kind {
            GeneratorKind::Sawtooth => Self::sawtooth(),
            GeneratorKind::Heaviside => Self::heaviside(),
            GeneratorKind::GpSe => Self::gp_se(),
            GeneratorKind::BnnPrior => Self::bnn_prior(),
        }
    }

    fn base(kind: GeneratorKind, input_range: (f64, f64), noise_std: f64) -> Self {
        Self {
            kind,
            n_range: (40, 100),
            input_range,
            noise_std,
            lengthscale: 1.0,
            outputscale: 1.0,
            widths: Vec::new(),
            activation: Activation::Relu,
            bias: true,
            weight_scale: 1.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            GeneratorKind::BnnPrior => self.widths.first().copied().unwrap_or(1),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BnnpError::InvalidInput(format!("generator spec: {m}")));
        if self.n_range.0 > self.n_range.1 {
            return bad("n_range must be ordered");
        }
        if !(self.input_range.0 < self.input_range.1) {
            return bad("input_range must be ordered");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative");
        }
        if !(self.lengthscale > 0.0 && self.outputscale > 0.0) {
            return bad("lengthscale and outputscale must be positive");
        }
        if self.kind == GeneratorKind::BnnPrior && (self.widths.len() < 2 || self.widths.contains(&0)) {
            return bad("bnn_prior needs at least two positive widths");
        }
        Ok(())
    }
}

/// Noiseless sawtooth with floored modulo.
pub fn sawtooth_fn(x: f64, eps1: f64, eps2: f64) -> f64 {
    eps1 * x / 3.0 + 0.25 * eps2 + 1.33 * (x.rem_euclid(0.75) - 0.375)
}

/// Squared-exponential kernel matrix between the rows of `a` and `b`.
pub fn se_kernel(a: &Mat, b: &Mat, lengthscale: f64, outputscale: f64) -> Mat {
    Mat::from_fn(a.nrows(), b.nrows(), |i, j| {
        let d2: f64 = (0..a.ncols()).map(|c| (a[(i, c)] - b[(j, c)]).powi(2)).sum();
        outputscale * (-0.5 * d2 / (lengthscale * lengthscale)).exp()
    })
}

/// Draws a zero-mean GP function at the rows of `x`.
pub fn gp_sample<R: Rng>(x: &Mat, lengthscale: f64, outputscale: f64, rng: &mut R) -> Result<Mat> {
    let k = se_kernel(x, x, lengthscale, outputscale);
    let (l, _) = cholesky_jittered(&k, "GP kernel")?;
    let z = Mat::from_fn(x.nrows(), 1, |_, _| StandardNormal.sample(&mut *rng));
    Ok(l * z)
}

fn inputs<R: Rng>(spec: &GeneratorSpec, rng: &mut R) -> Mat {
    let (lo, hi) = spec.input_range;
    let n = rng.random_range(spec.n_range.0..=spec.n_range.1);
    Mat::from_fn(n, spec.input_dim(), |_, _| rng.random_range(lo..hi))
}

fn add_noise<R: Rng>(y: &mut Mat, std: f64, rng: &mut R) {
    if std > 0.0 {
        for v in y.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut *rng);
            *v += std * e;
        }
    }
}

fn provenance(kind: &str, seed: u64) -> String {
    format!("{kind}:seed={seed}")
}

pub fn gen_sawtooth(spec: &GeneratorSpec, seed: u64) -> Result<Task> {
    spec.validate()?;
    let mut rng = substream(seed, &[0]);
    let x = inputs(spec, &mut rng);
    let e1: f64 = StandardNormal.sample(&mut rng);
    let e2: f64 = StandardNormal.sample(&mut rng);
    let mut y = x.map(|v| sawtooth_fn(v, e1, e2));
    add_noise(&mut y, spec.noise_std, &mut rng);
    Task::new(x, y, provenance("sawtooth", seed))
}

pub fn gen_heaviside(spec: &GeneratorSpec, seed: u64) -> Result<Task> {
    spec.validate()?;
    let mut rng = substream(seed, &[1]);
    let x = inputs(spec, &mut rng);
    let f = gp_sample(&x, spec.lengthscale, spec.outputscale, &mut rng)?;
    let mean = if f.is_empty() { 0.0 } else { f.mean() };
    let mut y = f.map(|v| if v - mean >= 0.0 { 1.0 } else { -1.0 });
    add_noise(&mut y, spec.noise_std, &mut rng);
    Task::new(x, y, provenance("heaviside", seed))
}

pub fn gen_gp_se(spec: &GeneratorSpec, seed: u64) -> Result<Task> {
    spec.validate()?;
    let mut rng = substream(seed, &[2]);
    let x = inputs(spec, &mut rng);
    let mut y = gp_sample(&x, spec.lengthscale, spec.outputscale, &mut rng)?;
    add_noise(&mut y, spec.noise_std, &mut rng);
    Task::new(x, y, provenance("gp_se", seed))
}

pub fn gen_bnn_prior(spec: &GeneratorSpec, seed: u64) -> Result<Task> {
    spec.validate()?;
    let mut rng = substream(seed, &[3]);
    let x = inputs(spec, &mut rng);
    let prior = PriorSet::standard_init(&spec.widths, spec.bias, Structure::Diagonal)?;
    let path = (0..prior.num_layers())
        .map(|l| {
            let f = prior.layer_factor(l);
            let cov = f.dense_covariance();
            let (d, u) = prior.shapes[l];
            Mat::from_fn(d, u, |i, j| {
                let idx = j * d + i;
                let z: f64 = StandardNormal.sample(&mut rng);
                spec.weight_scale * (f.mean[idx] + cov[(idx, idx)].sqrt() * z)
            })
        })
        .collect();
    let mut cfg = crate::model::NetworkConfig::new(spec.widths.clone());
    cfg.activation = spec.activation;
    cfg.bias = spec.bias;
    let mut y = predict(&cfg, &WeightSample { weights: vec![path] }, &x).remove(0);
    add_noise(&mut y, spec.noise_std, &mut rng);
    Task::new(x, y, provenance("bnn_prior", seed))
}

pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<Task> {
    match spec.kind {
        GeneratorKind::Sawtooth => gen_sawtooth(spec, seed),
        GeneratorKind::Heaviside => gen_heaviside(spec, seed),
        GeneratorKind::BnnPrior => gen_bnn_prior(spec, seed),
        GeneratorKind::GpSe => gen_gp_se(spec, seed),
    }
}

/// `count` tasks with seeds derived from `seed`, generated in parallel.
pub fn generate_many(spec: &GeneratorSpec, count: usize, seed: u64) -> Result<Vec<Task>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate(spec, crate::rng::derive_seed(seed, &[i as u64])))
        .collect()
}

/// Uniformly random context/target split with `round(p * N)` context points.
pub fn split(task: &Task, context_proportion: f64, seed: u64) -> Result<Task> {
    if !(0.0..=1.0).contains(&context_proportion) {
        return Err(BnnpError::InvalidInput(format!("context proportion {context_proportion} outside [0, 1]")));
    }
    let n = task.len();
    let n_c = (context_proportion * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, &[]));
    let mut context = idx[..n_c].to_vec();
    let mut target = idx[n_c..].to_vec();
    context.sort_unstable();
    target.sort_unstable();
    Ok(Task { context, target, ..task.clone() })
}

const FORMAT_NAME: &str = "bnnp-tasks";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ArrayData {
    Encoded(String),
    Plain(Vec<f64>),
}

impl ArrayData {
    fn new(m: &Mat, plain: bool) -> Self {
        if plain {
            ArrayData::Plain(m.as_slice().to_vec())
        } else {
            ArrayData::Encoded(encode_f64(m.as_slice()))
        }
    }

    fn to_mat(&self, rows: usize, cols: usize) -> Result<Mat> {
        let data = match self {
            ArrayData::Encoded(s) => decode_f64(s)?,
            ArrayData::Plain(v) => v.clone(),
        };
        if data.len() != rows * cols {
            return Err(BnnpError::InvalidInput(format!("array holds {} values, expected {rows}x{cols}", data.len())));
        }
        Ok(Mat::from_column_slice(rows, cols, &data))
    }
}

/// One task per line; arrays are column-major.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskLine {
    n: usize,
    x_dim: usize,
    y_dim: usize,
    x: ArrayData,
    y: ArrayData,
    context: Vec<usize>,
    target: Vec<usize>,
    provenance: String,
}

/// Writes tasks as JSON lines behind a header line. `plain` stores numbers
/// as JSON arrays instead of base64.
pub fn save_tasks(path: &Path, tasks: &[Task], plain: bool) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = Header { format: FORMAT_NAME.into(), version: FORMAT_VERSION, count: tasks.len() };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for t in tasks {
        let line = TaskLine {
            n: t.len(),
            x_dim: t.x.ncols(),
            y_dim: t.y.ncols(),
            x: ArrayData::new(&t.x, plain),
            y: ArrayData::new(&t.y, plain),
            context: t.context.clone(),
            target: t.target.clone(),
            provenance: t.provenance.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tasks(path: &Path) -> Result<Vec<Task>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let err = |line: usize, message: String| BnnpError::Format { line: line + 1, message };
    let header: Header = match lines.next() {
        Some((i, l)) => serde_json::from_str(&l?).map_err(|e| err(i, format!("bad header: {e}")))?,
        None => return Err(err(0, "empty file, expected a header line".into())),
    };
    if header.format != FORMAT_NAME {
        return Err(err(0, format!("unknown format '{}'", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(BnnpError::Version { found: header.version, expected: FORMAT_VERSION });
    }
    let mut tasks = Vec::with_capacity(header.count);
    for (i, l) in lines {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        let line: TaskLine = serde_json::from_str(&l).map_err(|e| err(i, e.to_string()))?;
        let task = Task {
            x: line.x.to_mat(line.n, line.x_dim).map_err(|e| err(i, e.to_string()))?,
            y: line.y.to_mat(line.n, line.y_dim).map_err(|e| err(i, e.to_string()))?,
            context: line.context,
            target: line.target,
            provenance: line.provenance,
        };
        task.validate().map_err(|e| err(i, e.to_string()))?;
        tasks.push(task);
    }
    if tasks.len() != header.count {
        return Err(err(header.count.min(tasks.len()) + 1, format!("expected {} tasks, found {}", header.count, tasks.len())));
    }
    Ok(tasks)
}
