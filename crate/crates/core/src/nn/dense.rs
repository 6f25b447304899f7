use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::init::glorot_uniform;
use super::{c_order, check_finite, NnError, Parameters, Result};

/// Affine map `y = x Wᵀ + b` over a batch of row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out x in
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    x: Array2<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            w: Array2::zeros((output, input)),
            b: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Dense {
            w: glorot_uniform(output, input, rng),
            b: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, DenseCache)> {
        if x.ncols() != self.input_dim() || self.b.len() != self.output_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "dense input {:?} against weights {:?}",
                x.dim(),
                self.w.dim()
            )));
        }
        let y = x.dot(&self.w.t()) + &self.b;
        check_finite("dense forward", y.iter());
        Ok((y, DenseCache { x: x.clone() }))
    }

    /// Returns parameter gradients and dLoss/dx.
    pub fn backward(&self, cache: &DenseCache, grad_y: &Array2<f64>) -> Result<(Dense, Array2<f64>)> {
        if grad_y.dim() != (cache.x.nrows(), self.output_dim()) {
            return Err(NnError::ShapeMismatch(format!(
                "dense upstream gradient {:?}",
                grad_y.dim()
            )));
        }
        let grads = Dense {
            w: c_order(grad_y.t().dot(&cache.x)),
            b: grad_y.sum_axis(Axis(0)),
        };
        let dx = grad_y.dot(&self.w);
        check_finite("dense backward", dx.iter());
        Ok((grads, dx))
    }
}

impl Parameters for Dense {
    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w.as_slice().expect("contiguous"),
            self.b.as_slice().expect("contiguous"),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_slice_mut().expect("contiguous"),
            self.b.as_slice_mut().expect("contiguous"),
        ]
    }
}
