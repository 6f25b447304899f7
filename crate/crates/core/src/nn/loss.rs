use ndarray::{Array, Dimension, Zip};

use super::{NnError, Result};

/// Mean squared error over all elements and its gradient `2 (pred - target) / count`.
pub fn mse_loss<D: Dimension>(
    pred: &Array<f64, D>,
    target: &Array<f64, D>,
) -> Result<(f64, Array<f64, D>)> {
    if pred.shape() != target.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len().max(1) as f64;
    let mut grad = pred - target;
    let loss = grad.iter().map(|d| d * d).sum::<f64>() / n;
    Zip::from(&mut grad).for_each(|g| *g *= 2.0 / n);
    Ok((loss, grad))
}
