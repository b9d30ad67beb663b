//! Named trainable arrays and their binding onto a [`Tape`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::ArrayRecord;
use crate::error::{BnnpError, Result};
use crate::linalg::Mat;

/// A named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    /// Per-entry trainability in column-major order; `None` means all entries.
    pub mask: Option<Vec<bool>>,
    /// Whether the array takes part in optimisation at all.
    pub learnable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Mat) -> Self {
        Self {
            name: name.into(),
            value,
            mask: None,
            learnable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Mat) -> Self {
        Self {
            learnable: false,
            ..Self::new(name, value)
        }
    }

    pub fn is_trainable(&self, idx: usize) -> bool {
        self.learnable && self.mask.as_ref().is_none_or(|m| m[idx])
    }

    pub fn any_trainable(&self) -> bool {
        self.learnable && self.mask.as_ref().is_none_or(|m| m.iter().any(|&b| b))
    }

    pub fn trainable_count(&self) -> usize {
        (0..self.value.len()).filter(|&i| self.is_trainable(i)).count()
    }

    pub fn record(&self) -> ArrayRecord {
        ArrayRecord::new(self.name.clone(), &self.value)
    }
}

/// Components owning parameters list them in a fixed canonical order.
pub trait Parameterised {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_trainable(&self) -> usize {
        self.params().iter().map(|p| p.trainable_count()).sum()
    }

    /// Parameter values as named records.
    fn records(&self) -> Vec<ArrayRecord> {
        self.params().iter().map(|p| p.record()).collect()
    }

    /// Overwrites parameter values from records, matching by name and shape.
    fn load_records(&mut self, records: &[ArrayRecord]) -> Result<()> {
        for p in self.params_mut() {
            let rec = records
                .iter()
                .find(|r| r.name == p.name)
                .ok_or_else(|| BnnpError::InvalidInput(format!("missing array '{}'", p.name)))?;
            let m = rec.to_mat()?;
            if m.shape() != p.value.shape() {
                return Err(BnnpError::DimensionMismatch(format!(
                    "array '{}' has shape {:?}, expected {:?}",
                    p.name,
                    m.shape(),
                    p.value.shape()
                )));
            }
            p.value = m;
        }
        Ok(())
    }
}

/// Places parameters on a tape, as leaves when tracked or as constants.
pub struct Binder<'t> {
    tape: &'t Tape,
    track: bool,
    leaves: Vec<Option<Var<'t>>>,
}

impl<'t> Binder<'t> {
    /// Binder recording leaves for every trainable parameter.
    pub fn tracking(tape: &'t Tape) -> Self {
        Self { tape, track: true, leaves: Vec::new() }
    }

    /// Binder placing everything as constants (evaluation only).
    pub fn constant(tape: &'t Tape) -> Self {
        Self { tape, track: false, leaves: Vec::new() }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn bind(&mut self, p: &Param) -> Var<'t> {
        if self.track && p.any_trainable() {
            let v = self.tape.leaf(p.value.clone());
            self.leaves.push(Some(v));
            v
        } else {
            self.leaves.push(None);
            self.tape.constant(p.value.clone())
        }
    }

    pub fn bind_all(&mut self, params: &[&Param]) -> Vec<Var<'t>> {
        params.iter().map(|p| self.bind(p)).collect()
    }

    /// Gradients of `output` in bind order (zeros for untracked parameters).
    pub fn gradients(&self, output: Var<'t>, params: &[&Param]) -> Vec<Mat> {
        assert_eq!(params.len(), self.leaves.len(), "binder saw a different parameter list");
        let tracked: Vec<Var<'t>> = self.leaves.iter().flatten().copied().collect();
        let mut grads = self.tape.gradients(output, &tracked).into_iter();
        params
            .iter()
            .zip(&self.leaves)
            .map(|(p, leaf)| match leaf {
                Some(_) => grads.next().expect("gradient per leaf"),
                None => Mat::zeros(p.value.nrows(), p.value.ncols()),
            })
            .collect()
    }
}

/// Serializable parameter snapshot including masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub array: ArrayRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
    pub learnable: bool,
}

impl From<&Param> for ParamRecord {
    fn from(p: &Param) -> Self {
        Self {
            array: p.record(),
            mask: p.mask.clone(),
            learnable: p.learnable,
        }
    }
}

impl TryFrom<&ParamRecord> for Param {
    type Error = BnnpError;
    fn try_from(r: &ParamRecord) -> Result<Self> {
        Ok(Param {
            name: r.array.name.clone(),
            value: r.array.to_mat()?,
            mask: r.mask.clone(),
            learnable: r.learnable,
        })
    }
}
