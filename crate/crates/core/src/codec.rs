//! Compact text encoding of `f64` arrays (base64 of little-endian bytes).

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{BnnpError, Result};
use crate::linalg::Mat;

pub fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| BnnpError::InvalidInput(format!("bad base64 array: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(BnnpError::InvalidInput(format!(
            "array payload of {} bytes is not a whole number of f64 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Named matrix stored column-major as base64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: String,
}

impl ArrayRecord {
    pub fn new(name: impl Into<String>, m: &Mat) -> Self {
        Self {
            name: name.into(),
            rows: m.nrows(),
            cols: m.ncols(),
            data: encode_f64(m.as_slice()),
        }
    }

    pub fn to_mat(&self) -> Result<Mat> {
        let data = decode_f64(&self.data)?;
        if data.len() != self.rows * self.cols {
            return Err(BnnpError::InvalidInput(format!(
                "array '{}' holds {} values, expected {}x{}",
                self.name,
                data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(Mat::from_column_slice(self.rows, self.cols, &data))
    }
}
