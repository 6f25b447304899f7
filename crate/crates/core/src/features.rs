//! Feature encoding and look-back windowing.
//!
//! Each encoded row is laid out as
//! `[scaled ridership | day-of-week one-hot (Mon=0) | service one-hot | rain one-hot | scaled precipitation]`
//! with disabled blocks omitted.

use std::io::Write;
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{RidershipRecord, RouteDataset, ServiceWeather};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("cannot fit a scaler on an empty sequence")]
    EmptyInput,
    #[error("one-hot index {index} out of range for cardinality {cardinality}")]
    IndexOutOfRange { index: usize, cardinality: usize },
    #[error("no contiguous segment longer than look-back {lookback} (longest is {longest})")]
    TooShort { lookback: usize, longest: usize },
    #[error("bad split boundaries: {0}")]
    BadBoundaries(String),
    #[error("dataset has no complete services")]
    NoCompleteServices,
    #[error("stop {0} out of range")]
    BadStop(usize),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub use_ridership: bool,
    pub use_day_of_week: bool,
    pub use_service_number: bool,
    /// Governs both the rain-flag one-hot and scaled precipitation.
    pub use_rain: bool,
    pub services_per_day: usize,
}

impl FeatureSpec {
    pub fn ridership_only(services_per_day: usize) -> Self {
        FeatureSpec {
            use_ridership: true,
            use_day_of_week: false,
            use_service_number: false,
            use_rain: false,
            services_per_day,
        }
    }

    pub fn with_calendar(services_per_day: usize) -> Self {
        FeatureSpec {
            use_day_of_week: true,
            use_service_number: true,
            ..Self::ridership_only(services_per_day)
        }
    }

    pub fn with_weather(services_per_day: usize) -> Self {
        FeatureSpec {
            use_rain: true,
            ..Self::ridership_only(services_per_day)
        }
    }

    pub fn all(services_per_day: usize) -> Self {
        FeatureSpec {
            use_rain: true,
            ..Self::with_calendar(services_per_day)
        }
    }

    pub fn dim(&self) -> usize {
        usize::from(self.use_ridership)
            + if self.use_day_of_week { 7 } else { 0 }
            + if self.use_service_number { self.services_per_day } else { 0 }
            + if self.use_rain { 2 + 1 } else { 0 }
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        if self.use_ridership {
            names.push("ridership".to_string());
        }
        if self.use_day_of_week {
            names.extend((0..7).map(|d| format!("dow_{d}")));
        }
        if self.use_service_number {
            names.extend((1..=self.services_per_day).map(|s| format!("service_{s}")));
        }
        if self.use_rain {
            names.push("no_rain".into());
            names.push("rain".into());
            names.push("precipitation".into());
        }
        names
    }
}

/// Min-max parameters for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: f64,
    pub max: f64,
}

impl ScalerParams {
    /// Values outside the fitted range map outside `[0, 1]`; a constant channel maps to 0.
    pub fn scale(&self, x: f64) -> f64 {
        let span = self.max - self.min;
        if span == 0.0 {
            0.0
        } else {
            (x - self.min) / span
        }
    }

    pub fn unscale(&self, y: f64) -> f64 {
        self.min + y * (self.max - self.min)
    }
}

pub fn fit_scaler(values: &[f64]) -> Result<ScalerParams> {
    let (first, rest) = values.split_first().ok_or(FeatureError::EmptyInput)?;
    let (min, max) = rest
        .iter()
        .fold((*first, *first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(ScalerParams { min, max })
}

pub fn scale(x: f64, p: &ScalerParams) -> f64 {
    p.scale(x)
}

pub fn one_hot(index: usize, cardinality: usize) -> Result<Vec<f64>> {
    if index >= cardinality {
        return Err(FeatureError::IndexOutOfRange { index, cardinality });
    }
    let mut v = vec![0.0; cardinality];
    v[index] = 1.0;
    Ok(v)
}

/// Per-stop ridership scalers plus one global precipitation scaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scalers {
    pub ridership: Vec<ScalerParams>,
    pub precipitation: ScalerParams,
}

impl Scalers {
    /// Fits on every observed count in `train` (normally the training split only).
    pub fn fit(train: &RouteDataset) -> Result<Self> {
        let ridership = (1..=train.n_stops as u32)
            .map(|stop| {
                let vals: Vec<f64> = train
                    .records
                    .iter()
                    .filter(|r| r.stop_index == stop)
                    .map(|r| r.ridership as f64)
                    .collect();
                fit_scaler(&vals)
            })
            .collect::<Result<Vec<_>>>()?;
        let prec: Vec<f64> = train.weather.iter().map(|w| w.precipitation_mm).collect();
        Ok(Scalers {
            ridership,
            precipitation: fit_scaler(&prec)?,
        })
    }

    pub fn stop(&self, stop_index: usize) -> Result<&ScalerParams> {
        stop_index
            .checked_sub(1)
            .and_then(|i| self.ridership.get(i))
            .ok_or(FeatureError::BadStop(stop_index))
    }
}

fn push_service_features(
    out: &mut Vec<f64>,
    ridership: f64,
    date: NaiveDate,
    service_index: u32,
    rain_flag: bool,
    precipitation_mm: f64,
    spec: &FeatureSpec,
    ridership_scaler: &ScalerParams,
    precipitation_scaler: &ScalerParams,
) -> Result<()> {
    if spec.use_ridership {
        out.push(ridership_scaler.scale(ridership));
    }
    if spec.use_day_of_week {
        out.extend(one_hot(date.weekday().num_days_from_monday() as usize, 7)?);
    }
    if spec.use_service_number {
        let idx = (service_index as usize)
            .checked_sub(1)
            .ok_or(FeatureError::IndexOutOfRange {
                index: 0,
                cardinality: spec.services_per_day,
            })?;
        out.extend(one_hot(idx, spec.services_per_day)?);
    }
    if spec.use_rain {
        out.extend(one_hot(usize::from(rain_flag), 2)?);
        out.push(precipitation_scaler.scale(precipitation_mm));
    }
    Ok(())
}

/// Encodes one stop's observation of one service.
pub fn encode_service(
    record: &RidershipRecord,
    sw: &ServiceWeather,
    spec: &FeatureSpec,
    scalers: &Scalers,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(spec.dim());
    push_service_features(
        &mut out,
        record.ridership as f64,
        record.service_date,
        record.service_index,
        sw.rain_flag,
        sw.precipitation_mm,
        spec,
        scalers.stop(record.stop_index as usize)?,
        &scalers.precipitation,
    )?;
    Ok(out)
}

/// Encoded rows for one stop over the complete services of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub stop_index: usize,
    pub spec: FeatureSpec,
    /// T x D, chronological.
    pub rows: Array2<f64>,
    /// Raw ridership at this stop for each row.
    pub targets: Vec<f64>,
    /// Scaled ridership for each row (the training target).
    pub scaled_targets: Vec<f64>,
    pub keys: Vec<(NaiveDate, u32)>,
    /// `true` where row t does not directly follow row t-1 in the service sequence.
    pub breaks: Vec<bool>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["date".to_string(), "service_index".to_string()];
        header.extend(self.spec.column_names());
        header.push("target".into());
        wtr.write_record(&header)?;
        for (t, row) in self.rows.outer_iter().enumerate() {
            let mut rec = vec![
                self.keys[t].0.format("%Y-%m-%d").to_string(),
                self.keys[t].1.to_string(),
            ];
            rec.extend(row.iter().map(f64::to_string));
            rec.push(self.targets[t].to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()
    }
}

/// Builds the stop's feature matrix from the dataset's complete services.
/// Incomplete services are dropped and leave a break in the sequence.
pub fn encode_stop(
    dataset: &RouteDataset,
    stop_index: usize,
    spec: &FeatureSpec,
    scalers: &Scalers,
) -> Result<FeatureMatrix> {
    if stop_index == 0 || stop_index > dataset.n_stops {
        return Err(FeatureError::BadStop(stop_index));
    }
    let rs = scalers.stop(stop_index)?;
    let d = spec.dim();
    let mut data = Vec::new();
    let mut targets = Vec::new();
    let mut scaled_targets = Vec::new();
    let mut keys = Vec::new();
    let mut breaks = Vec::new();
    let mut prev: Option<i64> = None;
    for slot in dataset.slots.iter().filter(|s| s.is_complete()) {
        let count = slot.ridership[stop_index - 1].expect("complete slot") as f64;
        push_service_features(
            &mut data,
            count,
            slot.date,
            slot.service_index,
            slot.rain_flag,
            slot.precipitation_mm,
            spec,
            rs,
            &scalers.precipitation,
        )?;
        let ord = dataset.ordinal(slot.date, slot.service_index);
        breaks.push(prev.is_some_and(|p| ord != p + 1));
        prev = Some(ord);
        targets.push(count);
        scaled_targets.push(rs.scale(count));
        keys.push((slot.date, slot.service_index));
    }
    if targets.is_empty() {
        return Err(FeatureError::NoCompleteServices);
    }
    let rows = Array2::from_shape_vec((targets.len(), d), data).expect("row length equals spec dim");
    Ok(FeatureMatrix {
        stop_index,
        spec: *spec,
        rows,
        targets,
        scaled_targets,
        keys,
        breaks,
    })
}

/// Stride-1 look-back windows over a shared feature matrix.
///
/// Window `i` covers rows `starts[i] .. starts[i] + lookback` and predicts
/// row `starts[i] + lookback`.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub matrix: Arc<FeatureMatrix>,
    pub lookback: usize,
    pub starts: Vec<usize>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn stop_index(&self) -> usize {
        self.matrix.stop_index
    }

    pub fn feature_dim(&self) -> usize {
        self.matrix.rows.ncols()
    }

    /// `(date, service_index)` of the service each window predicts.
    pub fn target_key(&self, i: usize) -> (NaiveDate, u32) {
        self.matrix.keys[self.starts[i] + self.lookback]
    }

    pub fn index_map(&self) -> Vec<(NaiveDate, u32)> {
        (0..self.len()).map(|i| self.target_key(i)).collect()
    }

    pub fn window(&self, i: usize) -> ArrayView2<'_, f64> {
        let s = self.starts[i];
        self.matrix.rows.slice(ndarray::s![s..s + self.lookback, ..])
    }

    pub fn target(&self, i: usize) -> f64 {
        self.matrix.targets[self.starts[i] + self.lookback]
    }

    pub fn scaled_target(&self, i: usize) -> f64 {
        self.matrix.scaled_targets[self.starts[i] + self.lookback]
    }

    /// B x L x D batch for the given window indices.
    pub fn gather(&self, indices: &[usize]) -> Array3<f64> {
        let (l, d) = (self.lookback, self.feature_dim());
        let mut out = Array3::zeros((indices.len(), l, d));
        for (b, &i) in indices.iter().enumerate() {
            out.slice_mut(ndarray::s![b, .., ..]).assign(&self.window(i));
        }
        out
    }

    /// Full N x L x D input tensor.
    pub fn x(&self) -> Array3<f64> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.gather(&all)
    }

    /// N x 1 raw targets.
    pub fn y(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), 1), |(i, _)| self.target(i))
    }

    /// Windows whose predicted service date satisfies `keep`.
    pub fn select(&self, keep: impl Fn(NaiveDate) -> bool) -> WindowedDataset {
        let starts = self
            .starts
            .iter()
            .copied()
            .filter(|&s| keep(self.matrix.keys[s + self.lookback].0))
            .collect();
        WindowedDataset {
            matrix: Arc::clone(&self.matrix),
            lookback: self.lookback,
            starts,
        }
    }

    /// The most recent `lookback` rows, if they form one unbroken run.
    pub fn latest_history(&self) -> Option<ArrayView2<'_, f64>> {
        let t = self.matrix.len();
        if t < self.lookback {
            return None;
        }
        let from = t - self.lookback;
        if self.matrix.breaks[from + 1..].iter().any(|&b| b) {
            return None;
        }
        Some(self.matrix.rows.slice(ndarray::s![from.., ..]))
    }
}

pub fn build_windows(matrix: Arc<FeatureMatrix>, lookback: usize) -> Result<WindowedDataset> {
    let t = matrix.len();
    let mut starts = Vec::new();
    let mut seg_start = 0;
    let mut longest = 0;
    for end in 1..=t {
        if end == t || matrix.breaks[end] {
            let seg_len = end - seg_start;
            longest = longest.max(seg_len);
            if lookback > 0 && seg_len > lookback {
                starts.extend(seg_start..end - lookback);
            }
            seg_start = end;
        }
    }
    if starts.is_empty() {
        return Err(FeatureError::TooShort { lookback, longest });
    }
    Ok(WindowedDataset {
        matrix,
        lookback,
        starts,
    })
}

/// Encodes every stop and windows each with the same look-back. Because all
/// stops share the complete-service sequence, window `i` targets the same
/// service at every stop.
pub fn build_stop_windows(
    dataset: &RouteDataset,
    spec: &FeatureSpec,
    scalers: &Scalers,
    lookback: usize,
) -> Result<Vec<WindowedDataset>> {
    (1..=dataset.n_stops)
        .map(|stop| {
            let m = encode_stop(dataset, stop, spec, scalers)?;
            build_windows(Arc::new(m), lookback)
        })
        .collect()
}

/// Split boundaries: training is strictly before `validation_start`, test starts at `test_start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBoundaries {
    pub validation_start: NaiveDate,
    pub test_start: NaiveDate,
}

impl SplitBoundaries {
    pub fn split_of(&self, date: NaiveDate) -> Split {
        if date < self.validation_start {
            Split::Train
        } else if date < self.test_start {
            Split::Validation
        } else {
            Split::Test
        }
    }

    /// Roughly 80/10/10 over the dataset's distinct dates.
    pub fn proportional(dataset: &RouteDataset) -> Result<Self> {
        let mut dates: Vec<NaiveDate> = dataset.slots.iter().map(|s| s.date).collect();
        dates.dedup();
        if dates.len() < 3 {
            return Err(FeatureError::BadBoundaries(format!(
                "need at least 3 distinct dates, have {}",
                dates.len()
            )));
        }
        let n = dates.len();
        let test_days = (n / 10).max(1);
        let val_days = (n / 10).max(1);
        Ok(SplitBoundaries {
            validation_start: dates[n - test_days - val_days],
            test_start: dates[n - test_days],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

pub fn chronological_split(
    dataset: &RouteDataset,
    b: SplitBoundaries,
) -> Result<(RouteDataset, RouteDataset, RouteDataset)> {
    let (first, last) = dataset.date_range();
    if b.validation_start >= b.test_start {
        return Err(FeatureError::BadBoundaries(format!(
            "{} is not before {}",
            b.validation_start, b.test_start
        )));
    }
    if b.validation_start <= first || b.test_start > last {
        return Err(FeatureError::BadBoundaries(format!(
            "boundaries {} / {} must fall inside ({first}, {last}]",
            b.validation_start, b.test_start
        )));
    }
    Ok((
        dataset.filter_dates(|d| b.split_of(d) == Split::Train),
        dataset.filter_dates(|d| b.split_of(d) == Split::Validation),
        dataset.filter_dates(|d| b.split_of(d) == Split::Test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_route_dataset, ServiceWeather, Timetable};

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    pub(crate) fn toy_dataset(days: u64, stops: u32, drop: Option<(u64, u32)>) -> RouteDataset {
        let start = date("2021-10-01");
        let mut recs = Vec::new();
        let mut sw = Vec::new();
        for day in 0..days {
            let d = start + chrono::Days::new(day);
            for s in 1..=26u32 {
                sw.push(ServiceWeather {
                    service_date: d,
                    service_index: s,
                    rain_flag: (day + s as u64).is_multiple_of(5),
                    precipitation_mm: ((day * 3 + s as u64) % 7) as f64 * 0.5,
                });
                for stop in 1..=stops {
                    if drop == Some((day, s)) && stop == 1 {
                        continue;
                    }
                    recs.push(RidershipRecord {
                        service_date: d,
                        service_index: s,
                        stop_index: stop,
                        ridership: ((day as u32 * 7 + s * 3 + stop) % 13) + stop,
                    });
                }
            }
        }
        build_route_dataset(recs, sw, stops as usize, 26, Timetable::default_26()).unwrap()
    }

    #[test]
    fn scaler_examples() {
        let p = fit_scaler(&[0.0, 5.0, 10.0]).unwrap();
        assert_eq!(p, ScalerParams { min: 0.0, max: 10.0 });
        assert_eq!(fit_scaler(&[4.0, 4.0, 4.0]).unwrap(), ScalerParams { min: 4.0, max: 4.0 });
        assert_eq!(fit_scaler(&[]), Err(FeatureError::EmptyInput));
        assert_eq!(scale(5.0, &p), 0.5);
        assert_eq!(scale(0.0, &p), 0.0);
        assert_eq!(scale(7.0, &ScalerParams { min: 4.0, max: 4.0 }), 0.0);
        assert_eq!(scale(12.0, &p), 1.2);
        assert_eq!(p.unscale(0.5), 5.0);
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(2, 7).unwrap(), vec![0., 0., 1., 0., 0., 0., 0.]);
        assert_eq!(one_hot(0, 2).unwrap(), vec![1., 0.]);
        assert_eq!(
            one_hot(7, 7),
            Err(FeatureError::IndexOutOfRange { index: 7, cardinality: 7 })
        );
    }

    #[test]
    fn dimension_law() {
        assert_eq!(FeatureSpec::ridership_only(26).dim(), 1);
        assert_eq!(FeatureSpec::with_calendar(26).dim(), 34);
        assert_eq!(FeatureSpec::with_weather(26).dim(), 4);
        assert_eq!(FeatureSpec::all(26).dim(), 37);
        assert_eq!(FeatureSpec::all(26).column_names().len(), 37);
    }

    #[test]
    fn encode_service_layout() {
        let ds = toy_dataset(3, 2, None);
        let scalers = Scalers::fit(&ds).unwrap();
        let rec = ds.records[5];
        let sw = ds
            .weather
            .iter()
            .find(|w| w.service_date == rec.service_date && w.service_index == rec.service_index)
            .unwrap();
        let v = encode_service(&rec, sw, &FeatureSpec::all(26), &scalers).unwrap();
        assert_eq!(v.len(), 37);
        let hot: f64 = v[1..36].iter().sum();
        assert_eq!(hot, 3.0);
        // 2021-10-01 is a Friday
        assert_eq!(rec.service_date, date("2021-10-01"));
        assert_eq!(v[1 + 4], 1.0);
        assert_eq!(v[8 + rec.service_index as usize - 1], 1.0);
        let a = encode_service(&rec, sw, &FeatureSpec::ridership_only(26), &scalers).unwrap();
        assert_eq!(a, vec![v[0]]);
    }

    #[test]
    fn windows_count_and_alignment() {
        let ds = toy_dataset(5, 1, None);
        let scalers = Scalers::fit(&ds).unwrap();
        let m = Arc::new(encode_stop(&ds, 1, &FeatureSpec::all(26), &scalers).unwrap());
        assert_eq!(m.len(), 130);
        let w = build_windows(m.clone(), 26).unwrap();
        assert_eq!(w.len(), 104);
        assert_eq!(w.x().dim(), (104, 26, 37));
        assert_eq!(w.y().dim(), (104, 1));
        // first label is the 27th service: day 2, service 1
        assert_eq!(w.target(0), m.targets[26]);
        assert_eq!(w.target_key(0), (date("2021-10-02"), 1));

        let short = Arc::new(encode_stop(&toy_dataset(1, 1, None), 1, &FeatureSpec::all(26), &scalers).unwrap());
        assert_eq!(
            build_windows(short, 26).unwrap_err(),
            FeatureError::TooShort { lookback: 26, longest: 26 }
        );
    }

    #[test]
    fn windows_do_not_span_gaps() {
        let ds = toy_dataset(5, 2, Some((2, 10)));
        let scalers = Scalers::fit(&ds).unwrap();
        let m = Arc::new(encode_stop(&ds, 2, &FeatureSpec::all(26), &scalers).unwrap());
        assert_eq!(m.len(), 129);
        let w = build_windows(m, 26).unwrap();
        // segments of 61 and 68 rows
        assert_eq!(w.len(), (61 - 26) + (68 - 26));
        for &s in &w.starts {
            assert!(!w.matrix.breaks[s + 1..=s + 26].iter().any(|&b| b));
        }
    }

    #[test]
    fn split_partitions_by_date() {
        let ds = toy_dataset(10, 2, None);
        let b = SplitBoundaries {
            validation_start: date("2021-10-07"),
            test_start: date("2021-10-09"),
        };
        let (tr, va, te) = chronological_split(&ds, b).unwrap();
        assert_eq!(tr.slots.len() + va.slots.len() + te.slots.len(), ds.slots.len());
        assert_eq!(tr.records.len() + va.records.len() + te.records.len(), ds.records.len());
        assert!(tr.slots.last().unwrap().date < va.slots[0].date);
        assert!(va.slots.last().unwrap().date < te.slots[0].date);

        let outside = SplitBoundaries {
            validation_start: date("2022-01-01"),
            test_start: date("2022-02-01"),
        };
        assert!(matches!(chronological_split(&ds, outside), Err(FeatureError::BadBoundaries(_))));
        let reversed = SplitBoundaries {
            validation_start: b.test_start,
            test_start: b.validation_start,
        };
        assert!(chronological_split(&ds, reversed).is_err());
    }

    #[test]
    fn paper_boundaries_give_ten_one_one_months() {
        let start = date("2021-10-01");
        let days = (date("2022-09-30") - start).num_days() as u64 + 1;
        let ds = toy_dataset(days, 1, None);
        let b = SplitBoundaries {
            validation_start: date("2022-08-01"),
            test_start: date("2022-09-01"),
        };
        let (tr, va, te) = chronological_split(&ds, b).unwrap();
        assert_eq!(tr.date_range(), (start, date("2022-07-31")));
        assert_eq!(va.date_range(), (date("2022-08-01"), date("2022-08-31")));
        assert_eq!(te.date_range(), (date("2022-09-01"), date("2022-09-30")));
    }
}
