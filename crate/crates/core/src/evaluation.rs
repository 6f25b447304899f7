//! RMSE comparison across methods, stop-to-stop correlation and improvement
//! percentages.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Scalers, WindowedDataset};
use crate::ingest::RouteDataset;
use crate::models::{
    inverse_scale_clamped, predict_windows, MethodId, ModelError, StatisticalBaseline, TrainedModel,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions, {1} targets")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("need at least 2 complete services, have {0}")]
    InsufficientData(usize),
    #[error("method {0} missing from report")]
    MissingMethod(MethodId),
    #[error("missing model for method {0}")]
    MissingModel(String),
    #[error("reference RMSE is zero at stop {stop}")]
    ZeroReferenceRmse { stop: usize },
    #[error("no target services shared by all methods")]
    NoCommonTargets,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), targets.len()));
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let sse: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / predictions.len() as f64).sqrt())
}

/// Pearson coefficient; `None` when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Symmetric stop-by-stop Pearson matrix. Undefined entries (zero variance)
/// are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub n: usize,
    pub entries: Vec<Option<f64>>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i * self.n + j]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "stop")?;
        for j in 1..=self.n {
            write!(w, ",stop_{j}")?;
        }
        writeln!(w)?;
        for i in 0..self.n {
            write!(w, "stop_{}", i + 1)?;
            for j in 0..self.n {
                match self.get(i, j) {
                    Some(v) => write!(w, ",{v}")?,
                    None => write!(w, ",")?,
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Pairs ridership by (date, service); services missing at either stop of a
/// pair are dropped for that pair only.
pub fn correlation_matrix(dataset: &RouteDataset) -> Result<CorrelationMatrix> {
    let complete = dataset.slots.iter().filter(|s| s.is_complete()).count();
    if complete < 2 {
        return Err(EvalError::InsufficientData(complete));
    }
    let n = dataset.n_stops;
    let mut entries = vec![None; n * n];
    for i in 0..n {
        for j in i..n {
            let (x, y): (Vec<f64>, Vec<f64>) = dataset
                .slots
                .iter()
                .filter_map(|s| match (s.ridership[i], s.ridership[j]) {
                    (Some(a), Some(b)) => Some((a as f64, b as f64)),
                    _ => None,
                })
                .unzip();
            let r = if i == j {
                pearson(&x, &x).map(|_| 1.0)
            } else {
                pearson(&x, &y)
            };
            entries[i * n + j] = r;
            entries[j * n + i] = r;
        }
    }
    Ok(CorrelationMatrix { n, entries })
}

/// De-scaled predictions and raw targets keyed by the predicted service.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub keys: Vec<(NaiveDate, u32)>,
    /// N x n_stops, persons.
    pub predicted: Array2<f64>,
    pub actual: Array2<f64>,
}

impl Predictions {
    fn restrict(&self, keep: &BTreeSet<(NaiveDate, u32)>) -> Predictions {
        let rows: Vec<usize> = (0..self.keys.len()).filter(|&i| keep.contains(&self.keys[i])).collect();
        Predictions {
            keys: rows.iter().map(|&i| self.keys[i]).collect(),
            predicted: self.predicted.select(ndarray::Axis(0), &rows),
            actual: self.actual.select(ndarray::Axis(0), &rows),
        }
    }

    pub fn rmse_per_stop(&self) -> Result<Vec<f64>> {
        (0..self.predicted.ncols())
            .map(|k| {
                rmse(
                    &self.predicted.column(k).to_vec(),
                    &self.actual.column(k).to_vec(),
                )
            })
            .collect()
    }
}

/// Runs a trained network over aligned per-stop test windows.
pub fn predict_model(model: &TrainedModel, windows: &[WindowedDataset], scalers: &Scalers) -> Result<Predictions> {
    let scaled = predict_windows(model, windows)?;
    let mut predicted = scaled;
    for (k, mut col) in predicted.columns_mut().into_iter().enumerate() {
        let p = scalers.stop(k + 1).map_err(ModelError::from)?;
        col.mapv_inplace(|y| inverse_scale_clamped(y, p));
    }
    let n = windows.first().map_or(0, |w| w.len());
    let actual = Array2::from_shape_fn((n, windows.len()), |(i, k)| windows[k].target(i));
    Ok(Predictions {
        keys: windows.first().map(|w| w.index_map()).unwrap_or_default(),
        predicted,
        actual,
    })
}

/// Statistical baseline over the given target services.
pub fn predict_baseline(
    baseline: &StatisticalBaseline,
    dataset: &RouteDataset,
    keys: &[(NaiveDate, u32)],
) -> Result<Predictions> {
    let lookup: BTreeMap<(NaiveDate, u32), &[Option<u32>]> = dataset
        .slots
        .iter()
        .filter(|s| s.is_complete())
        .map(|s| ((s.date, s.service_index), s.ridership.as_slice()))
        .collect();
    let n = dataset.n_stops;
    let mut predicted = Array2::zeros((keys.len(), n));
    let mut actual = Array2::zeros((keys.len(), n));
    for (i, key) in keys.iter().enumerate() {
        let row = lookup.get(key).ok_or(EvalError::NoCommonTargets)?;
        for k in 0..n {
            predicted[[i, k]] = baseline.predict(k as u32 + 1, key.1)?;
            actual[[i, k]] = row[k].expect("complete slot") as f64;
        }
    }
    Ok(Predictions {
        keys: keys.to_vec(),
        predicted,
        actual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: MethodId,
    pub seeds: Vec<u64>,
    /// RMSE per stop for each seed, in `seeds` order.
    pub per_seed: Vec<Vec<f64>>,
    /// Median over seeds, per stop.
    pub rmse: Vec<f64>,
    pub mean_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_stops: usize,
    pub n_targets: usize,
    pub methods: Vec<MethodResult>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Per-method, per-seed predictions. Every method is scored on the target
/// services present in all of them.
pub fn evaluate_methods(runs: &[(MethodId, Vec<(u64, Predictions)>)]) -> Result<EvalReport> {
    let mut common: Option<BTreeSet<(NaiveDate, u32)>> = None;
    let mut n_stops = 0;
    for (_, seeds) in runs {
        for (_, p) in seeds {
            n_stops = p.predicted.ncols();
            let keys: BTreeSet<_> = p.keys.iter().copied().collect();
            common = Some(match common {
                None => keys,
                Some(c) => c.intersection(&keys).copied().collect(),
            });
        }
    }
    let common = common.unwrap_or_default();
    if common.is_empty() {
        return Err(EvalError::NoCommonTargets);
    }
    let mut methods = Vec::new();
    for (method, seeds) in runs {
        if seeds.is_empty() {
            return Err(EvalError::MissingModel(method.to_string()));
        }
        let per_seed = seeds
            .iter()
            .map(|(_, p)| p.restrict(&common).rmse_per_stop())
            .collect::<Result<Vec<_>>>()?;
        let rmse: Vec<f64> = (0..n_stops)
            .map(|k| median(&per_seed.iter().map(|r| r[k]).collect::<Vec<_>>()))
            .collect();
        methods.push(MethodResult {
            method: *method,
            seeds: seeds.iter().map(|(s, _)| *s).collect(),
            per_seed,
            mean_rmse: rmse.iter().sum::<f64>() / n_stops as f64,
            rmse,
        });
    }
    Ok(EvalReport {
        n_stops,
        n_targets: common.len(),
        methods,
    })
}

impl EvalReport {
    pub fn method(&self, id: MethodId) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == id)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "method")?;
        for k in 1..=self.n_stops {
            write!(w, ",stop_{k}")?;
        }
        writeln!(w, ",mean")?;
        for m in &self.methods {
            write!(w, "{}", m.method)?;
            for v in &m.rmse {
                write!(w, ",{v:.3}")?;
            }
            writeln!(w, ",{:.3}", m.mean_rmse)?;
        }
        Ok(())
    }

    pub fn to_text(&self, reference: Option<MethodId>) -> String {
        let mut out = format!("{:<12}", "method");
        for k in 1..=self.n_stops {
            out.push_str(&format!("{:>9}", format!("stop {k}")));
        }
        out.push_str(&format!("{:>9}", "mean"));
        let improvements = reference.and_then(|r| improvement_report(self, r).ok());
        if let Some(r) = reference.filter(|_| improvements.is_some()) {
            out.push_str(&format!("  vs {r}"));
        }
        out.push('\n');
        for m in &self.methods {
            out.push_str(&format!("{:<12}", m.method.to_string()));
            for v in &m.rmse {
                out.push_str(&format!("{v:>9.3}"));
            }
            out.push_str(&format!("{:>9.3}", m.mean_rmse));
            if let Some(imp) = improvements.as_ref().and_then(|all| all.iter().find(|i| i.method == m.method)) {
                out.push_str(&format!("  {:+.1}%", imp.mean));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub method: MethodId,
    pub reference: MethodId,
    /// 100 (ref - method) / ref, per stop.
    pub per_stop: Vec<f64>,
    pub mean: f64,
}

pub fn improvement(method: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
    if method.len() != reference.len() {
        return Err(EvalError::LengthMismatch(method.len(), reference.len()));
    }
    method
        .iter()
        .zip(reference)
        .enumerate()
        .map(|(k, (&m, &r))| {
            if r == 0.0 {
                Err(EvalError::ZeroReferenceRmse { stop: k + 1 })
            } else {
                Ok(100.0 * (r - m) / r)
            }
        })
        .collect()
}

pub fn improvement_report(report: &EvalReport, reference: MethodId) -> Result<Vec<Improvement>> {
    let r = report.method(reference).ok_or(EvalError::MissingMethod(reference))?;
    report
        .methods
        .iter()
        .map(|m| {
            let per_stop = improvement(&m.rmse, &r.rmse)?;
            Ok(Improvement {
                method: m.method,
                reference,
                mean: per_stop.iter().sum::<f64>() / per_stop.len() as f64,
                per_stop,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ReportJson {
    report: EvalReport,
    improvements: Vec<Improvement>,
}

/// Writes `report.csv`, `report.json` and, when the reference method is
/// present, `improvement.csv`. Returns the written paths.
pub fn emit_report(report: &EvalReport, dir: &Path, reference: Option<MethodId>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv_path = dir.join("report.csv");
    report.write_csv(std::io::BufWriter::new(std::fs::File::create(&csv_path)?))?;
    written.push(csv_path);

    let improvements = match reference {
        Some(r) if report.method(r).is_some() => improvement_report(report, r)?,
        _ => Vec::new(),
    };
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&ReportJson {
        report: report.clone(),
        improvements: improvements.clone(),
    })?;
    std::fs::write(&json_path, json + "\n")?;
    written.push(json_path);

    if !improvements.is_empty() {
        let path = dir.join("improvement.csv");
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
        write!(w, "method,reference")?;
        for k in 1..=report.n_stops {
            write!(w, ",stop_{k}")?;
        }
        writeln!(w, ",mean")?;
        for imp in &improvements {
            write!(w, "{},{}", imp.method, imp.reference)?;
            for v in &imp.per_stop {
                write!(w, ",{v:.2}")?;
            }
            writeln!(w, ",{:.2}", imp.mean)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_report_json(path: &Path) -> Result<EvalReport> {
    let parsed: ReportJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(parsed.report)
}
