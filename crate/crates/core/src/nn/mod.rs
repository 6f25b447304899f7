//! Small differentiable core: LSTM and dense layers, MSE loss, optimizers.
//!
//! Everything is f64 and single-threaded per model instance. Layers return
//! caches from `forward` that `backward` consumes for exact gradients.

mod dense;
mod init;
mod loss;
mod lstm;
mod optim;

pub use dense::{Dense, DenseCache};
pub use init::{glorot_bound, rng_from_seed};
pub use loss::mse_loss;
pub use lstm::{LstmCache, LstmLayer};
pub use optim::{clip_global_norm, global_norm, Optimizer, OptimizerKind};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("learning rate must be positive, got {0}")]
    NonPositiveLearningRate(f64),
    #[error("optimizer `{0}` is not implemented")]
    NotImplemented(String),
    #[error("unknown optimizer `{0}`")]
    UnknownOptimizer(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Flat views over a parameter (or gradient) container, in a fixed order.
pub trait Parameters {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }
}

pub(crate) fn check_finite<'a>(what: &str, mut values: impl Iterator<Item = &'a f64>) {
    debug_assert!(values.all(|v| v.is_finite()), "non-finite value in {what}");
    let _ = what;
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major copy when needed. `dot` may return column-major results, and
/// `Parameters::slices` and reshapes assume row-major storage.
pub(crate) fn c_order<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}
