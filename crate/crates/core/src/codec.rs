//! Base64-embedded little-endian binary64 blocks for model persistence.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{MolexError, Result};

pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| MolexError::Format(format!("bad base64 block: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(MolexError::Format(
            "binary64 block length not a multiple of 8".into(),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// A real vector persisted as one base64 block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Block(pub Vec<f64>);

impl Serialize for Block {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&encode_f64s(&self.0))
    }
}

impl<'de> Deserialize<'de> for Block {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        decode_f64s(&text)
            .map(Block)
            .map_err(serde::de::Error::custom)
    }
}

/// A dense matrix persisted as `{rows, cols, data}` with row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixBlock {
    pub rows: usize,
    pub cols: usize,
    pub data: Block,
}

impl MatrixBlock {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixBlock {
            rows: m.nrows(),
            cols: m.ncols(),
            data: Block(data),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.0.len() != self.rows * self.cols {
            return Err(MolexError::Format(format!(
                "matrix block declares {}x{} but holds {} values",
                self.rows,
                self.cols,
                self.data.0.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data.0))
    }
}
