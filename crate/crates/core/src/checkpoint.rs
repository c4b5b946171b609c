//! Model checkpoints as JSON.
//!
//! ```json
//! {
//!   "dims": {"in_dim": 16, "heads": 2, "layers": 2, "embed_dim": 16, "num_outputs": 3, "bias": true},
//!   "slope": 0.2,
//!   "epoch": 41,
//!   "val_loss": 0.13,
//!   "tensors": [{"name": "layer0.head0.weight", "shape": [16, 16], "data": [...]}, ...]
//! }
//! ```
//!
//! Tensor names follow [`ModelParams::named_tensors`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{ModelDims, ModelParams};
use crate::error::{invalid, Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::rng;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub dims: ModelDims,
    pub slope: f64,
    /// Epoch (0-based) whose pre-update parameters these are.
    pub epoch: usize,
    pub val_loss: f64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, epoch: usize, val_loss: f64) -> Self {
        let tensors = params
            .named_tensors()
            .into_iter()
            .map(|(name, m)| NamedTensor { name, shape: [m.rows(), m.cols()], data: m.as_slice().to_vec() })
            .collect();
        Self { dims: params.dims(), slope: params.encoder.slope, epoch, val_loss, tensors }
    }

    /// Rebuild the parameters, checking every name and shape.
    pub fn to_params(&self) -> Result<ModelParams> {
        // any seed: every tensor is overwritten below
        let mut params = ModelParams::init(self.dims, &mut rng::stream(0, "checkpoint"))?;
        params.encoder.slope = self.slope;
        let expected: Vec<(String, (usize, usize))> =
            params.named_tensors().into_iter().map(|(n, m)| (n, m.shape())).collect();
        if expected.len() != self.tensors.len() {
            return Err(invalid(format!(
                "checkpoint has {} tensors, dims imply {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((slot, (name, shape)), t) in params.tensors_mut().into_iter().zip(&expected).zip(&self.tensors) {
            if &t.name != name || (t.shape[0], t.shape[1]) != *shape {
                return Err(invalid(format!(
                    "checkpoint tensor {} {:?} does not match expected {name} {shape:?}",
                    t.name, t.shape
                )));
            }
            *slot = Matrix::from_vec(shape.0, shape.1, t.data.clone())?;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        serde_json::from_str(&text).map_err(Error::from)
    }
}
