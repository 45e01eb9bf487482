//! Bit-exact encoding of `f64` arrays as base64 of little-endian bytes.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::mlp::MlpModel;

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
        .map_err(|e| Error::Shape(format!("invalid base64 parameter block: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Shape(format!(
            "parameter block of {} bytes is not a whole number of f64 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Serialized MLP: one base64 block of row-major weights and one of biases
/// per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodedMlp {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<String>,
    pub biases: Vec<String>,
}

impl From<&MlpModel> for EncodedMlp {
    fn from(m: &MlpModel) -> Self {
        EncodedMlp {
            layer_sizes: m.layer_sizes().to_vec(),
            weights: (0..m.num_layers()).map(|l| encode_f64s(m.weights(l))).collect(),
            biases: (0..m.num_layers()).map(|l| encode_f64s(m.biases(l))).collect(),
        }
    }
}

impl TryFrom<&EncodedMlp> for MlpModel {
    type Error = Error;
    fn try_from(e: &EncodedMlp) -> Result<Self> {
        let layers = e.layer_sizes.len().saturating_sub(1);
        if e.weights.len() != layers || e.biases.len() != layers {
            return Err(Error::Shape(format!(
                "{} layers need {layers} weight and bias blocks",
                layers
            )));
        }
        let mut params = Vec::new();
        for l in 0..layers {
            let w = decode_f64s(&e.weights[l])?;
            let b = decode_f64s(&e.biases[l])?;
            let (n_in, n_out) = (e.layer_sizes[l], e.layer_sizes[l + 1]);
            if w.len() != n_in * n_out || b.len() != n_out {
                return Err(Error::Shape(format!("layer {l} block sizes do not match {n_in}x{n_out}")));
            }
            params.extend(w);
            params.extend(b);
        }
        MlpModel::from_params(&e.layer_sizes, params)
    }
}

impl From<MlpModel> for EncodedMlp {
    fn from(m: MlpModel) -> Self {
        EncodedMlp::from(&m)
    }
}

impl TryFrom<EncodedMlp> for MlpModel {
    type Error = Error;
    fn try_from(e: EncodedMlp) -> Result<Self> {
        MlpModel::try_from(&e)
    }
}
