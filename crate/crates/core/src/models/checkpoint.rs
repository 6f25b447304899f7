//! Model checkpoint file.
//!
//! ```text
//! magic "RLCK" | version u32 | header_len u32 | header (UTF-8 JSON) |
//! tensor_count u32 | tensors (tensor container format, in parameter order)
//! ```
//!
//! Parameters are stored bit-exactly; the header carries the method, feature
//! layout, hyperparameters, seed and fitted scalers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureSpec, Scalers};
use crate::nn::{Dense, LstmLayer, Parameters};
use crate::tensor::{read_u32, take, Tensor, TensorError};
use crate::tuning::HyperParams;

use super::{MethodId, MultiBranchLstm};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RLCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_HEADER: u32 = 1 << 20;
const MAX_WIDTH: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("header too large: {0} bytes")]
    HeaderTooLarge(u32),
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("tensor {index} has shape {got:?}, expected {expected:?}")]
    WrongShape {
        index: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected {expected} tensors, found {got}")]
    WrongTensorCount { expected: usize, got: usize },
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub method: MethodId,
    pub feature_spec: FeatureSpec,
    pub hyper_params: HyperParams,
    pub n_branches: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub outputs: usize,
    pub lookback: usize,
    pub seed: u64,
    /// Set for members of a per-stop ensemble.
    pub stop_index: Option<usize>,
    pub scalers: Scalers,
}

impl CheckpointHeader {
    fn expected_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for _ in 0..self.n_branches {
            for l in 0..self.layers {
                let d = if l == 0 { self.input_dim } else { self.hidden };
                shapes.push(vec![4 * self.hidden, d]);
                shapes.push(vec![4 * self.hidden, self.hidden]);
                shapes.push(vec![4 * self.hidden]);
            }
        }
        shapes.push(vec![self.outputs, self.n_branches * self.hidden]);
        shapes.push(vec![self.outputs]);
        shapes
    }

    fn sane(&self) -> Result<(), CheckpointError> {
        let dims = [self.n_branches, self.input_dim, self.hidden, self.layers, self.outputs];
        if dims.iter().any(|&v| v == 0 || v > MAX_WIDTH) {
            return Err(CheckpointError::BadHeader(format!("implausible architecture {dims:?}")));
        }
        if self.feature_spec.dim() != self.input_dim {
            return Err(CheckpointError::BadHeader(format!(
                "feature spec dim {} != input dim {}",
                self.feature_spec.dim(),
                self.input_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: MultiBranchLstm,
}

impl Checkpoint {
    pub fn new(
        method: MethodId,
        feature_spec: FeatureSpec,
        hyper_params: HyperParams,
        lookback: usize,
        seed: u64,
        stop_index: Option<usize>,
        scalers: Scalers,
        model: MultiBranchLstm,
    ) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                method,
                feature_spec,
                hyper_params,
                n_branches: model.n_branches(),
                input_dim: model.input_dim(),
                hidden: model.hidden(),
                layers: model.n_layers(),
                outputs: model.outputs(),
                lookback,
                seed,
                stop_index,
                scalers,
            },
            model,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header is plain data");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let shapes = self.header.expected_shapes();
        let slices = self.model.slices();
        out.extend_from_slice(&(slices.len() as u32).to_le_bytes());
        for (shape, data) in shapes.into_iter().zip(slices) {
            Tensor::new(shape, data.to_vec())
                .expect("model shapes match header")
                .write_to(&mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut input = bytes;
        if take(&mut input, 4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = read_u32(&mut input)?;
        if header_len > MAX_HEADER {
            return Err(CheckpointError::HeaderTooLarge(header_len));
        }
        let header: CheckpointHeader = serde_json::from_slice(take(&mut input, header_len as usize)?)
            .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(header.format_version));
        }
        header.sane()?;
        let expected = header.expected_shapes();
        let count = read_u32(&mut input)? as usize;
        if count != expected.len() {
            return Err(CheckpointError::WrongTensorCount {
                expected: expected.len(),
                got: count,
            });
        }
        let mut tensors = Vec::with_capacity(count);
        for (index, shape) in expected.iter().enumerate() {
            let t = Tensor::read_from(&mut input)?;
            if t.shape() != shape.as_slice() {
                return Err(CheckpointError::WrongShape {
                    index,
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
            tensors.push(t);
        }
        if !input.is_empty() {
            return Err(CheckpointError::TrailingBytes(input.len()));
        }

        let mut model = MultiBranchLstm {
            branches: (0..header.n_branches)
                .map(|_| {
                    (0..header.layers)
                        .map(|l| LstmLayer::zeros(if l == 0 { header.input_dim } else { header.hidden }, header.hidden))
                        .collect()
                })
                .collect(),
            head: Dense::zeros(header.n_branches * header.hidden, header.outputs),
        };
        for (dst, t) in model.slices_mut().into_iter().zip(&tensors) {
            dst.copy_from_slice(t.data());
        }
        Ok(Checkpoint { header, model })
    }
}
