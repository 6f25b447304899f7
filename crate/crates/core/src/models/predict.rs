use ndarray::{s, Array2, Array3, ArrayView2};

use crate::features::{Scalers, WindowedDataset};

use super::{check_aligned, ModelError, Result, TrainedModel};

const PREDICT_CHUNK: usize = 512;

/// Maps a scaled output back to persons, clamped at zero, not rounded.
pub fn inverse_scale_clamped(y: f64, p: &crate::features::ScalerParams) -> f64 {
    p.unscale(y).max(0.0)
}

/// Scaled predictions (N x n_stops) for aligned per-stop windows.
pub fn predict_windows(model: &TrainedModel, windows: &[WindowedDataset]) -> Result<Array2<f64>> {
    let n = check_aligned(windows)?;
    if windows.len() != model.n_stops() {
        return Err(ModelError::MisalignedBatches);
    }
    let mut out = Array2::zeros((n, windows.len()));
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(PREDICT_CHUNK) {
        let rows = s![chunk[0]..chunk[0] + chunk.len(), ..];
        match model {
            TrainedModel::Joint(m) => {
                let xs: Vec<Array3<f64>> = windows.iter().map(|w| w.gather(chunk)).collect();
                out.slice_mut(rows).assign(&m.forward(&xs)?);
            }
            TrainedModel::PerStop(ms) => {
                for (k, (m, w)) in ms.iter().zip(windows).enumerate() {
                    let y = m.forward(&[w.gather(chunk)])?;
                    out.slice_mut(s![chunk[0]..chunk[0] + chunk.len(), k]).assign(&y.column(0));
                }
            }
        }
    }
    Ok(out)
}

/// Predicts the next service at every stop from each stop's most recent
/// encoded history (at least `lookback` rows; only the last `lookback` are used).
pub fn predict_next_service(
    model: &TrainedModel,
    histories: &[ArrayView2<'_, f64>],
    lookback: usize,
    scalers: &Scalers,
) -> Result<Vec<f64>> {
    if histories.len() != model.n_stops() {
        return Err(ModelError::MisalignedBatches);
    }
    let got = histories.iter().map(|h| h.nrows()).min().unwrap_or(0);
    if got < lookback || lookback == 0 {
        return Err(ModelError::InsufficientHistory { needed: lookback, got });
    }
    let xs: Vec<Array3<f64>> = histories
        .iter()
        .map(|h| {
            let tail = h.slice(s![h.nrows() - lookback.., ..]);
            tail.to_owned().insert_axis(ndarray::Axis(0))
        })
        .collect();
    let scaled: Vec<f64> = match model {
        TrainedModel::Joint(m) => m.forward(&xs)?.row(0).to_vec(),
        TrainedModel::PerStop(ms) => ms
            .iter()
            .zip(&xs)
            .map(|(m, x)| Ok(m.forward(std::slice::from_ref(x))?[[0, 0]]))
            .collect::<Result<_>>()?,
    };
    scaled
        .iter()
        .enumerate()
        .map(|(k, &y)| Ok(inverse_scale_clamped(y, scalers.stop(k + 1)?)))
        .collect()
}
