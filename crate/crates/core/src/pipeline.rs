//! End-to-end glue: split and scale a route, train a method, turn runs into
//! checkpoints and back, and score everything on the test split.

use chrono::NaiveDate;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{evaluate_methods, predict_baseline, predict_model, EvalError, EvalReport, Predictions};
use crate::features::{
    build_stop_windows, chronological_split, FeatureError, FeatureSpec, Scalers, Split, SplitBoundaries,
    WindowedDataset,
};
use crate::ingest::{
    build_route_dataset, IngestError, RidershipRecord, RouteDataset, ServiceWeather, Timetable, WeatherTotals,
};
use crate::models::{
    build_model, fit_statistical, inverse_scale_clamped, member_seed, train, Architecture, Checkpoint, MethodId,
    MethodSpec, ModelError, MultiBranchLstm, StatisticalBaseline, TrainHistory, TrainSchedule, TrainedModel,
};
use crate::tuning::{run_hyperband, HyperParams, HyperbandOutcome, HyperbandSchedule, SearchSpace};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tuning(#[from] crate::tuning::TuningError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// A dataset with its split boundaries and training-split scalers.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: RouteDataset,
    pub boundaries: SplitBoundaries,
    pub scalers: Scalers,
}

/// Aligned per-stop windows for each split.
#[derive(Debug, Clone)]
pub struct SplitWindows {
    pub train: Vec<WindowedDataset>,
    pub validation: Vec<WindowedDataset>,
    pub test: Vec<WindowedDataset>,
}

impl Prepared {
    /// Uses an 80/10/10 split by date when `boundaries` is `None`.
    pub fn new(dataset: RouteDataset, boundaries: Option<SplitBoundaries>) -> Result<Self> {
        let boundaries = match boundaries {
            Some(b) => b,
            None => SplitBoundaries::proportional(&dataset)?,
        };
        let (train, _, _) = chronological_split(&dataset, boundaries)?;
        let scalers = Scalers::fit(&train)?;
        Ok(Prepared {
            dataset,
            boundaries,
            scalers,
        })
    }

    /// Inclusive date range of the training split.
    pub fn train_range(&self) -> (NaiveDate, NaiveDate) {
        let first = self.dataset.date_range().0;
        let last = self.boundaries.validation_start.pred_opt().unwrap_or(first);
        (first, last)
    }

    /// Windows over the whole sequence, assigned to a split by the date of
    /// the service they predict.
    pub fn windows(&self, spec: &FeatureSpec, lookback: usize) -> Result<SplitWindows> {
        let all = build_stop_windows(&self.dataset, spec, &self.scalers, lookback)?;
        let pick = |split: Split| -> Vec<WindowedDataset> {
            all.iter()
                .map(|w| w.select(|d| self.boundaries.split_of(d) == split))
                .collect()
        };
        Ok(SplitWindows {
            train: pick(Split::Train),
            validation: pick(Split::Validation),
            test: pick(Split::Test),
        })
    }

    pub fn fit_statistical(&self) -> Result<StatisticalBaseline> {
        let (from, to) = self.train_range();
        Ok(fit_statistical(&self.dataset, from, to)?)
    }

    /// Complete services in the test split.
    pub fn test_keys(&self) -> Vec<(NaiveDate, u32)> {
        self.dataset
            .slots
            .iter()
            .filter(|s| s.is_complete() && self.boundaries.split_of(s.date) == Split::Test)
            .map(|s| (s.date, s.service_index))
            .collect()
    }
}

/// Default hyperparameters: the tuned joint winner for A-D and the per-stop
/// winners for the per-stop baseline (falling back to stop 1's for stops
/// beyond the tuned five).
pub fn default_hyper_params(method: MethodId, n_stops: usize) -> Vec<HyperParams> {
    match MethodSpec::new(method, 1).architecture {
        Architecture::PerStop => (1..=n_stops)
            .map(|k| HyperParams::per_stop_best(k).unwrap_or_else(|| HyperParams::per_stop_best(1).unwrap()))
            .collect(),
        _ => vec![HyperParams::joint_best()],
    }
}

/// The evaluation seeds derived from a master seed.
pub fn seed_list(master: u64, k: usize) -> Vec<u64> {
    (0..k as u64).map(|i| master.wrapping_add(i)).collect()
}

fn shuffle_seed(seed: u64) -> u64 {
    seed ^ 0x5DEE_CE66_D1CE_5EED
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRun {
    pub method: MethodId,
    pub seed: u64,
    pub model: TrainedModel,
    /// One entry for a joint model, one per stop for a per-stop ensemble.
    pub hyper_params: Vec<HyperParams>,
    pub histories: Vec<TrainHistory>,
}

impl TrainedRun {
    fn hp(&self, stop: usize) -> &HyperParams {
        &self.hyper_params[(stop - 1).min(self.hyper_params.len() - 1)]
    }
}

/// Trains `method` with either one shared set of hyperparameters or one per
/// stop. Per-stop members train independently and may run in parallel.
pub fn train_method(
    prep: &Prepared,
    method: MethodId,
    hyper_params: &[HyperParams],
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainedRun> {
    let n = prep.dataset.n_stops;
    let spec = MethodSpec::new(method, prep.dataset.services_per_day);
    if hyper_params.is_empty() || (hyper_params.len() != 1 && hyper_params.len() != n) {
        return Err(PipelineError::Invalid(format!(
            "expected 1 or {n} hyperparameter sets, got {}",
            hyper_params.len()
        )));
    }
    match spec.architecture {
        Architecture::None => Err(ModelError::NotTrainable(method).into()),
        Architecture::Joint => {
            let hp = hyper_params[0];
            let w = prep.windows(&spec.feature_spec, hp.sequence_length)?;
            let model = match build_model(&spec, &hp, n, seed)? {
                TrainedModel::Joint(m) => m,
                TrainedModel::PerStop(_) => unreachable!("joint spec"),
            };
            let (model, history) = train(model, &w.train, &w.validation, &hp, schedule, shuffle_seed(seed))?;
            Ok(TrainedRun {
                method,
                seed,
                model: TrainedModel::Joint(model),
                hyper_params: vec![hp],
                histories: vec![history],
            })
        }
        Architecture::PerStop => {
            let hps: Vec<HyperParams> = (1..=n)
                .map(|k| hyper_params[(k - 1).min(hyper_params.len() - 1)])
                .collect();
            let members = (1..=n)
                .into_par_iter()
                .map(|k| train_member(prep, &spec.feature_spec, k, &hps[k - 1], schedule, member_seed(seed, k)))
                .collect::<Result<Vec<_>>>()?;
            let (models, histories) = members.into_iter().unzip();
            Ok(TrainedRun {
                method,
                seed,
                model: TrainedModel::PerStop(models),
                hyper_params: hps,
                histories,
            })
        }
    }
}

/// Trains the single-branch model for stop `k` alone.
pub fn train_member(
    prep: &Prepared,
    feature_spec: &FeatureSpec,
    k: usize,
    hp: &HyperParams,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<(MultiBranchLstm, TrainHistory)> {
    hp.validate().map_err(ModelError::InvalidHyperParams)?;
    if k == 0 || k > prep.dataset.n_stops {
        return Err(FeatureError::BadStop(k).into());
    }
    let w = prep.windows(feature_spec, hp.sequence_length)?;
    let m = MultiBranchLstm::new(1, feature_spec.dim(), hp.lstm_nodes, hp.n_layers, 1, seed)?;
    let one = |v: &[WindowedDataset]| vec![v[k - 1].clone()];
    Ok(train(m, &one(&w.train), &one(&w.validation), hp, schedule, shuffle_seed(seed))?)
}

/// Hyperband over `space` for a joint method, or for one stop's member of a
/// per-stop ensemble when `stop` is given. A trial that fails or diverges
/// scores `+inf`.
pub fn tune_method(
    prep: &Prepared,
    method: MethodId,
    stop: Option<usize>,
    schedule: &HyperbandSchedule,
    space: &SearchSpace,
    base: &TrainSchedule,
    seed: u64,
) -> Result<HyperbandOutcome> {
    let spec = MethodSpec::new(method, prep.dataset.services_per_day);
    let per_stop = match (spec.architecture, stop) {
        (Architecture::None, _) => return Err(ModelError::NotTrainable(method).into()),
        (Architecture::PerStop, None) => {
            return Err(PipelineError::Invalid(format!("method {method} is tuned one stop at a time")))
        }
        (Architecture::PerStop, Some(k)) => Some(k),
        (Architecture::Joint, _) => None,
    };
    let runner = |hp: &HyperParams, epochs: usize, trial_seed: u64| -> f64 {
        let sched = TrainSchedule {
            max_epochs: epochs,
            ..*base
        };
        let res = match per_stop {
            Some(k) => train_member(prep, &spec.feature_spec, k, hp, &sched, trial_seed).map(|(_, h)| h),
            None => train_method(prep, method, &[*hp], &sched, trial_seed).map(|r| r.histories[0].clone()),
        };
        res.map_or(f64::INFINITY, |h| h.best_val_loss)
    };
    Ok(run_hyperband(&runner, schedule, space, seed)?)
}

/// One checkpoint for a joint model, one per stop for an ensemble.
pub fn to_checkpoints(prep: &Prepared, run: &TrainedRun) -> Vec<Checkpoint> {
    let spec = MethodSpec::new(run.method, prep.dataset.services_per_day);
    match &run.model {
        TrainedModel::Joint(m) => {
            let hp = *run.hp(1);
            vec![Checkpoint::new(
                run.method,
                spec.feature_spec,
                hp,
                hp.sequence_length,
                run.seed,
                None,
                prep.scalers.clone(),
                m.clone(),
            )]
        }
        TrainedModel::PerStop(ms) => ms
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let hp = *run.hp(i + 1);
                Checkpoint::new(
                    run.method,
                    spec.feature_spec,
                    hp,
                    hp.sequence_length,
                    run.seed,
                    Some(i + 1),
                    prep.scalers.clone(),
                    m.clone(),
                )
            })
            .collect(),
    }
}

/// Reassembles a run from its checkpoint(s). Histories are not stored.
pub fn from_checkpoints(mut cks: Vec<Checkpoint>) -> Result<TrainedRun> {
    let first = cks
        .first()
        .ok_or_else(|| PipelineError::Invalid("no checkpoints".into()))?
        .header
        .clone();
    if cks.iter().any(|c| c.header.method != first.method || c.header.seed != first.seed) {
        return Err(PipelineError::Invalid("checkpoints mix methods or seeds".into()));
    }
    if first.stop_index.is_none() {
        if cks.len() != 1 {
            return Err(PipelineError::Invalid("more than one joint checkpoint".into()));
        }
        let ck = cks.pop().expect("one checkpoint");
        return Ok(TrainedRun {
            method: first.method,
            seed: first.seed,
            model: TrainedModel::Joint(ck.model),
            hyper_params: vec![first.hyper_params],
            histories: Vec::new(),
        });
    }
    cks.sort_by_key(|c| c.header.stop_index);
    for (i, c) in cks.iter().enumerate() {
        if c.header.stop_index != Some(i + 1) {
            return Err(PipelineError::Invalid(format!("missing checkpoint for stop {}", i + 1)));
        }
    }
    let hyper_params = cks.iter().map(|c| c.header.hyper_params).collect();
    Ok(TrainedRun {
        method: first.method,
        seed: first.seed,
        model: TrainedModel::PerStop(cks.into_iter().map(|c| c.model).collect()),
        hyper_params,
        histories: Vec::new(),
    })
}

/// Test-split predictions for a trained run. Per-stop members may use
/// different look-backs; only services every member can predict are kept.
pub fn predict_test(prep: &Prepared, run: &TrainedRun) -> Result<Predictions> {
    let spec = MethodSpec::new(run.method, prep.dataset.services_per_day);
    match &run.model {
        TrainedModel::Joint(_) => {
            let w = prep.windows(&spec.feature_spec, run.hp(1).sequence_length)?;
            Ok(predict_model(&run.model, &w.test, &prep.scalers)?)
        }
        TrainedModel::PerStop(ms) => {
            let mut columns = Vec::with_capacity(ms.len());
            for (i, m) in ms.iter().enumerate() {
                let k = i + 1;
                let w = prep.windows(&spec.feature_spec, run.hp(k).sequence_length)?;
                let test = &w.test[i];
                let scaled = crate::models::predict_windows(&TrainedModel::Joint(m.clone()), std::slice::from_ref(test))?;
                let p = prep.scalers.stop(k)?;
                let col: std::collections::BTreeMap<_, _> = (0..test.len())
                    .map(|j| (test.target_key(j), (inverse_scale_clamped(scaled[[j, 0]], p), test.target(j))))
                    .collect();
                columns.push(col);
            }
            let keys: Vec<_> = columns[0]
                .keys()
                .copied()
                .filter(|key| columns.iter().all(|c| c.contains_key(key)))
                .collect();
            let predicted = Array2::from_shape_fn((keys.len(), ms.len()), |(j, k)| columns[k][&keys[j]].0);
            let actual = Array2::from_shape_fn((keys.len(), ms.len()), |(j, k)| columns[k][&keys[j]].1);
            Ok(Predictions {
                keys,
                predicted,
                actual,
            })
        }
    }
}

/// Scores trained runs (grouped by method, one per seed) and, optionally,
/// the statistical baseline on the common test services.
pub fn evaluate_runs(
    prep: &Prepared,
    runs: &[(MethodId, Vec<TrainedRun>)],
    include_statistical: bool,
) -> Result<EvalReport> {
    let mut all = Vec::new();
    for (method, seeds) in runs {
        let preds = seeds
            .iter()
            .map(|r| Ok((r.seed, predict_test(prep, r)?)))
            .collect::<Result<Vec<_>>>()?;
        all.push((*method, preds));
    }
    if include_statistical {
        let baseline = prep.fit_statistical()?;
        let p = predict_baseline(&baseline, &prep.dataset, &prep.test_keys())?;
        all.push((MethodId::Statistical, vec![(0, p)]));
    }
    Ok(evaluate_methods(&all)?)
}

/// The service following `key` in the daily timetable.
pub fn next_service(key: (NaiveDate, u32), services_per_day: usize) -> (NaiveDate, u32) {
    if (key.1 as usize) < services_per_day {
        (key.0, key.1 + 1)
    } else {
        (key.0.succ_opt().unwrap_or(key.0), 1)
    }
}

/// The service after the last complete one in the dataset.
pub fn default_target(dataset: &RouteDataset) -> Option<(NaiveDate, u32)> {
    dataset
        .slots
        .iter()
        .rev()
        .find(|s| s.is_complete())
        .map(|s| next_service((s.date, s.service_index), dataset.services_per_day))
}

/// The `lookback` encoded services immediately before `target` at one stop.
/// They must be complete and consecutive.
pub fn history_before(
    dataset: &RouteDataset,
    stop: usize,
    spec: &FeatureSpec,
    scalers: &Scalers,
    target: (NaiveDate, u32),
    lookback: usize,
) -> Result<Array2<f64>> {
    let m = crate::features::encode_stop(dataset, stop, spec, scalers)?;
    let t_ord = dataset.ordinal(target.0, target.1);
    let end = m.keys.partition_point(|k| dataset.ordinal(k.0, k.1) < t_ord);
    let mut run = 0;
    let mut expect = t_ord - 1;
    for k in m.keys[..end].iter().rev() {
        if dataset.ordinal(k.0, k.1) != expect || run == lookback {
            break;
        }
        run += 1;
        expect -= 1;
    }
    if run < lookback || lookback == 0 {
        return Err(ModelError::InsufficientHistory {
            needed: lookback,
            got: run,
        }
        .into());
    }
    Ok(m.rows.slice(ndarray::s![end - lookback..end, ..]).to_owned())
}

/// Per-stop predictions in persons for `target`, from the services before it.
pub fn predict_service(
    dataset: &RouteDataset,
    run: &TrainedRun,
    scalers: &Scalers,
    target: (NaiveDate, u32),
) -> Result<Vec<f64>> {
    let spec = MethodSpec::new(run.method, dataset.services_per_day);
    let n = dataset.n_stops;
    if run.model.n_stops() != n {
        return Err(PipelineError::Invalid(format!(
            "model covers {} stops, dataset has {n}",
            run.model.n_stops()
        )));
    }
    match &run.model {
        TrainedModel::Joint(_) => {
            let l = run.hp(1).sequence_length;
            let hist = (1..=n)
                .map(|k| history_before(dataset, k, &spec.feature_spec, scalers, target, l))
                .collect::<Result<Vec<_>>>()?;
            let views: Vec<_> = hist.iter().map(|h| h.view()).collect();
            Ok(crate::models::predict_next_service(&run.model, &views, l, scalers)?)
        }
        TrainedModel::PerStop(ms) => ms
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let l = run.hp(i + 1).sequence_length;
                let h = history_before(dataset, i + 1, &spec.feature_spec, scalers, target, l)?;
                let x = h.insert_axis(ndarray::Axis(0));
                let y = m.forward(std::slice::from_ref(&x)).map_err(PipelineError::from)?;
                Ok(inverse_scale_clamped(y[[0, 0]], scalers.stop(i + 1)?))
            })
            .collect(),
    }
}

pub const CACHE_FORMAT: &str = "ridership-dataset";
pub const CACHE_VERSION: u32 = 1;
const CACHE_MAX_WIDTH: usize = 4096;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("malformed cache: {0}")]
    Malformed(String),
    #[error("not a dataset cache (format `{0}`)")]
    WrongFormat(String),
    #[error("stale cache version {0}, re-run ingest")]
    StaleVersion(u32),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// Parsed route data persisted between commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCache {
    pub format: String,
    pub version: u32,
    pub n_stops: usize,
    pub services_per_day: usize,
    pub timetable: Timetable,
    /// Hourly rain/no-rain counts from the raw weather file, when known.
    pub weather_totals: Option<WeatherTotals>,
    pub records: Vec<RidershipRecord>,
    pub weather: Vec<ServiceWeather>,
}

impl DatasetCache {
    pub fn from_dataset(dataset: &RouteDataset, weather_totals: Option<WeatherTotals>) -> Self {
        DatasetCache {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
            n_stops: dataset.n_stops,
            services_per_day: dataset.services_per_day,
            timetable: dataset.timetable.clone(),
            weather_totals,
            records: dataset.records.clone(),
            weather: dataset.weather.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("cache is plain data");
        out.push(b'\n');
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, CacheError> {
        let cache: DatasetCache = serde_json::from_slice(bytes).map_err(|e| CacheError::Malformed(e.to_string()))?;
        if cache.format != CACHE_FORMAT {
            return Err(CacheError::WrongFormat(cache.format));
        }
        if cache.version != CACHE_VERSION {
            return Err(CacheError::StaleVersion(cache.version));
        }
        if cache.n_stops > CACHE_MAX_WIDTH || cache.services_per_day > CACHE_MAX_WIDTH {
            return Err(CacheError::Malformed("route too wide".into()));
        }
        Ok(cache)
    }

    pub fn into_dataset(self) -> std::result::Result<RouteDataset, CacheError> {
        Ok(build_route_dataset(
            self.records,
            self.weather,
            self.n_stops,
            self.services_per_day,
            self.timetable,
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn prepared(days: usize) -> Prepared {
        let cfg = SynthConfig {
            n_days: days,
            n_stops: 2,
            ..SynthConfig::default()
        };
        let data = generate(&cfg, 3).unwrap();
        Prepared::new(data.dataset, None).unwrap()
    }

    fn tiny_hp(seq: usize) -> HyperParams {
        HyperParams {
            batch_size: 64,
            sequence_length: seq,
            lstm_nodes: 4,
            n_layers: 1,
            learning_rate: 0.01,
            optimizer: crate::nn::OptimizerKind::Adam,
        }
    }

    #[test]
    fn cache_round_trip() {
        let p = prepared(12);
        let cache = DatasetCache::from_dataset(&p.dataset, Some(WeatherTotals { rain: 3, no_rain: 5 }));
        let back = DatasetCache::decode(&cache.encode()).unwrap();
        assert_eq!(back, cache);
        assert_eq!(back.into_dataset().unwrap(), p.dataset);
        let mut stale = cache.clone();
        stale.version = 0;
        assert!(matches!(DatasetCache::decode(&stale.encode()), Err(CacheError::StaleVersion(0))));
        assert!(DatasetCache::decode(b"{").is_err());
    }

    #[test]
    fn splits_do_not_overlap() {
        let p = prepared(20);
        let w = p.windows(&FeatureSpec::all(26), 26).unwrap();
        let last_train = w.train[0].index_map().last().unwrap().0;
        let first_val = w.validation[0].index_map()[0].0;
        let first_test = w.test[0].index_map()[0].0;
        assert!(last_train < p.boundaries.validation_start);
        assert_eq!(first_val, p.boundaries.validation_start);
        assert_eq!(first_test, p.boundaries.test_start);
    }

    #[test]
    fn per_stop_checkpoints_round_trip() {
        let p = prepared(20);
        let schedule = TrainSchedule {
            max_epochs: 2,
            ..TrainSchedule::default()
        };
        let run = train_method(&p, MethodId::Halyal, &[tiny_hp(4), tiny_hp(6)], &schedule, 9).unwrap();
        let cks = to_checkpoints(&p, &run);
        assert_eq!(cks.len(), 2);
        let back = from_checkpoints(cks).unwrap();
        assert_eq!(back.model, run.model);
        let preds = predict_test(&p, &run).unwrap();
        assert_eq!(preds.predicted.ncols(), 2);
        // the longer look-back limits which services can be scored
        let w6 = p.windows(&FeatureSpec::ridership_only(26), 6).unwrap();
        assert_eq!(preds.keys, w6.test[0].index_map());
    }

    #[test]
    fn statistical_not_trainable() {
        let p = prepared(12);
        assert!(matches!(
            train_method(&p, MethodId::Statistical, &[tiny_hp(4)], &TrainSchedule::default(), 0),
            Err(PipelineError::Model(ModelError::NotTrainable(MethodId::Statistical)))
        ));
    }

    #[test]
    fn next_service_prediction_needs_full_history() {
        let p = prepared(4);
        let run = train_method(
            &p,
            MethodId::D,
            &[tiny_hp(26)],
            &TrainSchedule {
                max_epochs: 1,
                ..TrainSchedule::default()
            },
            0,
        )
        .unwrap();
        let target = default_target(&p.dataset).unwrap();
        assert_eq!(target, (p.dataset.date_range().1.succ_opt().unwrap(), 1));
        let out = predict_service(&p.dataset, &run, &p.scalers, target).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|v| *v >= 0.0));
        let first = p.dataset.date_range().0;
        assert!(matches!(
            predict_service(&p.dataset, &run, &p.scalers, (first, 26)),
            Err(PipelineError::Model(ModelError::InsufficientHistory { needed: 26, got: 25 }))
        ));
        assert!(predict_service(&p.dataset, &run, &p.scalers, (first.succ_opt().unwrap(), 1)).is_ok());
    }
}
