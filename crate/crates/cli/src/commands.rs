use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use ridership_core::config::KvConfig;
use ridership_core::evaluation::{correlation_matrix, emit_report, improvement_report, EvalError};
use ridership_core::features::Split;
use ridership_core::ingest::{
    build_route_dataset, join_weather_to_services, parse_ridership_csv, parse_weather_csv, RouteDataset,
    WeatherTotals,
};
use ridership_core::models::{Checkpoint, MethodId, MethodSpec, Architecture};
use ridership_core::pipeline::{
    default_hyper_params, default_target, evaluate_runs, from_checkpoints, predict_service, seed_list, to_checkpoints,
    train_method, tune_method, DatasetCache, Prepared, TrainedRun,
};
use ridership_core::synth::{generate, SynthConfig};
use ridership_core::tuning::{make_schedule, write_report, HyperParams, SearchSpace};
use serde_json::json;

use crate::output::{Format, Summary};
use crate::settings::{RunConfig, DEFAULT_EVAL_SEEDS};
use crate::{Cli, Command};

/// A failure tagged with the pipeline stage it happened in.
#[derive(Debug)]
pub struct CliError {
    stage: &'static str,
    message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error [{}]: {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

type Result<T> = std::result::Result<T, CliError>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: fmt::Display> Stage<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| CliError {
            stage,
            message: e.to_string(),
        })
    }
}

fn fail<T>(stage: &'static str, message: impl Into<String>) -> Result<T> {
    Err(CliError {
        stage,
        message: message.into(),
    })
}

/// Runs one command, writing its report to `w`.
pub fn run(cli: Cli, w: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed, cli.out.as_deref()).stage("config")?;
    if !cli.quiet {
        eprint!("# effective config\n{}", cfg.effective().to_text());
    }
    let fmt = cli.format;
    match cli.command {
        Command::Synth { days, stops } => synth(w, &cfg, fmt, days, stops),
        Command::Ingest { ridership, weather } => ingest(w, &cfg, fmt, ridership, weather),
        Command::Train {
            method,
            seeds,
            hp_files,
            max_epochs,
        } => train(w, &cfg, fmt, method, seeds, &hp_files, max_epochs),
        Command::Tune {
            method,
            stop,
            max_epochs,
            eta,
        } => tune(w, &cfg, fmt, method, stop, max_epochs, eta),
        Command::Evaluate { methods, seeds } => evaluate(w, &cfg, fmt, methods, seeds),
        Command::Predict { method, at } => predict(w, &cfg, method, at.as_deref(), fmt),
        Command::Correlate { split } => correlate(w, &cfg, fmt, split),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).stage("write")?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError {
        stage: "write",
        message: format!("{}: {e}", path.display()),
    })
}

fn path_list(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn synth(w: &mut dyn Write, cfg: &RunConfig, fmt: Format, days: Option<usize>, stops: Option<usize>) -> Result<()> {
    let mut sc = SynthConfig::from_kv(&cfg.kv).stage("synth")?;
    if let Some(d) = days {
        sc.n_days = d;
    }
    if let Some(s) = stops {
        sc.n_stops = s;
    }
    let data = generate(&sc, cfg.seed).stage("synth")?;
    let (rpath, wpath) = data.write_files(&cfg.out).stage("synth")?;
    let conf = cfg.out.join("route.conf");
    let mut text = data.route_config_text();
    text.push_str("data.ridership = ridership.csv\ndata.weather = weather.csv\n");
    write_file(&conf, text.as_bytes())?;
    let (first, last) = data.dataset.date_range();
    let mut s = Summary::default();
    s.put("days", sc.n_days)
        .put("stops", sc.n_stops)
        .put("services_per_day", sc.services_per_day)
        .put("records", data.records.len())
        .put("first_date", first.to_string())
        .put("last_date", last.to_string())
        .put("files", path_list(&[rpath, wpath, conf]));
    write!(w, "{}", s.render(fmt)).stage("write")?;
    Ok(())
}

fn ingest(w: &mut dyn Write, cfg: &RunConfig, fmt: Format, ridership: Option<PathBuf>, weather: Option<PathBuf>) -> Result<()> {
    let rpath = ridership.unwrap_or_else(|| cfg.ridership_path());
    let wpath = weather.unwrap_or_else(|| cfg.weather_path());
    let route = &cfg.route;
    let records = parse_ridership_csv(&rpath, &route.schema).stage("ingest")?;
    let obs = parse_weather_csv(&wpath, &route.aliases).stage("ingest")?;
    let totals = WeatherTotals::from_observations(&obs);
    let sw = join_weather_to_services(&records, &obs, &route.timetable).stage("ingest")?;
    let n_records = records.len();
    let dataset = build_route_dataset(records, sw, route.n_stops, route.services_per_day, route.timetable.clone())
        .stage("ingest")?;
    let cache = cfg.cache_path();
    write_file(&cache, &DatasetCache::from_dataset(&dataset, Some(totals)).encode())?;
    let (first, last) = dataset.date_range();
    let mut s = Summary::default();
    s.put("records", n_records)
        .put("services", dataset.slots.len())
        .put("incomplete_services", dataset.incomplete_count())
        .put("first_date", first.to_string())
        .put("last_date", last.to_string())
        .put("weather_rows", obs.len())
        .put("rain_hours", totals.rain)
        .put("no_rain_hours", totals.no_rain)
        .put("files", path_list(&[cache]));
    write!(w, "{}", s.render(fmt)).stage("write")?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<RouteDataset> {
    let path = cfg.cache_path();
    let bytes = std::fs::read(&path).map_err(|e| CliError {
        stage: "load",
        message: format!("{}: {e} (run `ingest` first)", path.display()),
    })?;
    let cache = DatasetCache::decode(&bytes).stage("load")?;
    let dataset = cache.into_dataset().stage("load")?;
    if dataset.n_stops != cfg.route.n_stops || dataset.services_per_day != cfg.route.services_per_day {
        return fail(
            "load",
            format!(
                "cached dataset has {} stops x {} services, config says {} x {}; re-run ingest",
                dataset.n_stops, dataset.services_per_day, cfg.route.n_stops, cfg.route.services_per_day
            ),
        );
    }
    Ok(dataset)
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let dataset = load_dataset(cfg)?;
    let boundaries = cfg.boundaries().stage("config")?;
    Prepared::new(dataset, boundaries).stage("split")
}

fn file_tag(method: MethodId) -> String {
    method.label().to_ascii_lowercase()
}

fn checkpoint_path(out: &Path, method: MethodId, seed: u64, stop: Option<usize>) -> PathBuf {
    let m = file_tag(method);
    match stop {
        Some(k) => out.join(format!("model_{m}_s{seed}_stop{k}.ckpt")),
        None => out.join(format!("model_{m}_s{seed}.ckpt")),
    }
}

fn history_path(out: &Path, method: MethodId, seed: u64, stop: Option<usize>) -> PathBuf {
    let m = file_tag(method);
    match stop {
        Some(k) => out.join(format!("history_{m}_s{seed}_stop{k}.csv")),
        None => out.join(format!("history_{m}_s{seed}.csv")),
    }
}

fn is_per_stop(method: MethodId, services_per_day: usize) -> bool {
    MethodSpec::new(method, services_per_day).architecture == Architecture::PerStop
}

/// Defaults, then `hp.*` keys from the run config, then `--hp` files: one
/// shared file or one per stop.
fn resolve_hyper_params(cfg: &RunConfig, method: MethodId, n_stops: usize, files: &[PathBuf]) -> Result<Vec<HyperParams>> {
    let mut hps = default_hyper_params(method, n_stops)
        .into_iter()
        .map(|d| HyperParams::from_kv(&cfg.kv, d))
        .collect::<std::result::Result<Vec<_>, _>>()
        .stage("config")?;
    let per_stop = is_per_stop(method, cfg.route.services_per_day);
    match files.len() {
        0 => {}
        1 => {
            let kv = read_kv(&files[0])?;
            for hp in &mut hps {
                *hp = HyperParams::from_kv(&kv, *hp).stage("config")?;
            }
        }
        k if per_stop && k == n_stops => {
            for (hp, f) in hps.iter_mut().zip(files) {
                *hp = HyperParams::from_kv(&read_kv(f)?, *hp).stage("config")?;
            }
        }
        k => {
            return fail(
                "config",
                format!("{k} --hp files given; expected 1 or one per stop ({n_stops}) for a per-stop method"),
            )
        }
    }
    for hp in &hps {
        hp.validate().stage("config")?;
    }
    Ok(hps)
}

fn read_kv(path: &Path) -> Result<KvConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError {
        stage: "config",
        message: format!("{}: {e}", path.display()),
    })?;
    text.parse().map_err(|e| CliError {
        stage: "config",
        message: format!("{}: {e}", path.display()),
    })
}

fn train(
    w: &mut dyn Write,
    cfg: &RunConfig,
    fmt: Format,
    method: Option<MethodId>,
    seeds: Option<usize>,
    hp_files: &[PathBuf],
    max_epochs: Option<usize>,
) -> Result<()> {
    let method = cfg.method(method).stage("config")?;
    if method == MethodId::Statistical {
        return fail("train", "the statistical baseline has no network; `evaluate` fits it directly");
    }
    let prep = prepare(cfg)?;
    let n = prep.dataset.n_stops;
    let hps = resolve_hyper_params(cfg, method, n, hp_files)?;
    let schedule = cfg.schedule(max_epochs).stage("config")?;
    let seeds = seed_list(cfg.seed, cfg.seed_count(seeds, 1).stage("config")?);
    let mut files = Vec::new();
    let mut runs = Vec::new();
    for &seed in &seeds {
        let run = train_method(&prep, method, &hps, &schedule, seed).stage("train")?;
        for ck in to_checkpoints(&prep, &run) {
            let p = checkpoint_path(&cfg.out, method, seed, ck.header.stop_index);
            write_file(&p, &ck.encode())?;
            files.push(p);
        }
        let per_stop = run.histories.len() > 1;
        for (i, h) in run.histories.iter().enumerate() {
            let p = history_path(&cfg.out, method, seed, per_stop.then_some(i + 1));
            let mut buf = Vec::new();
            h.write_csv(&mut buf).stage("write")?;
            write_file(&p, &buf)?;
            files.push(p);
        }
        runs.push(json!({
            "seed": seed,
            "best_epoch": run.histories.iter().map(|h| h.best_epoch).collect::<Vec<_>>(),
            "best_val_loss": run.histories.iter().map(|h| h.best_val_loss).collect::<Vec<_>>(),
        }));
    }
    let mut s = Summary::default();
    s.put("method", method.label())
        .put("seeds", seeds.clone())
        .put("max_epochs", schedule.max_epochs)
        .put("hyper_params", hps.iter().map(|h| h.to_string()).collect::<Vec<_>>())
        .put("runs", runs)
        .put("files", path_list(&files));
    write!(w, "{}", s.render(fmt)).stage("write")?;
    Ok(())
}

fn tune(
    w: &mut dyn Write,
    cfg: &RunConfig,
    fmt: Format,
    method: Option<MethodId>,
    stop: Option<usize>,
    max_epochs: Option<usize>,
    eta: Option<usize>,
) -> Result<()> {
    let method = cfg.method(method).stage("config")?;
    let prep = prepare(cfg)?;
    let n = prep.dataset.n_stops;
    let r = match max_epochs {
        Some(r) => r,
        None => cfg.kv.parse_or("tune.max_epochs", 27).stage("config")?,
    };
    let eta = match eta {
        Some(e) => e,
        None => cfg.kv.parse_or("tune.eta", 3).stage("config")?,
    };
    let schedule = make_schedule(r, eta).stage("tune")?;
    let space = SearchSpace::from_kv(&cfg.kv).stage("config")?;
    let base = cfg.schedule(None).stage("config")?;
    let stops: Vec<Option<usize>> = if is_per_stop(method, prep.dataset.services_per_day) {
        match stop {
            Some(k) if k == 0 || k > n => return fail("config", format!("--stop {k} outside 1..={n}")),
            Some(k) => vec![Some(k)],
            None => (1..=n).map(Some).collect(),
        }
    } else {
        vec![None]
    };
    let mut files = Vec::new();
    let mut winners = Vec::new();
    for st in stops {
        let outcome = tune_method(&prep, method, st, &schedule, &space, &base, cfg.seed).stage("tune")?;
        let suffix = st.map(|k| format!("_stop{k}")).unwrap_or_default();
        let m = file_tag(method);
        let report = cfg.out.join(format!("tuning_{m}{suffix}.csv"));
        let mut buf = Vec::new();
        write_report(&outcome, &mut buf).stage("write")?;
        write_file(&report, &buf)?;
        let best = cfg.out.join(format!("best_{m}{suffix}.conf"));
        write_file(&best, outcome.best.to_kv_text().as_bytes())?;
        files.push(report);
        files.push(best);
        winners.push(json!({
            "stop": st,
            "trials": outcome.trials.len(),
            "best_trial": outcome.trials[outcome.best_trial].trial_id,
            "best_val_loss": outcome.best_val_loss,
            "best": outcome.best.to_string(),
        }));
    }
    let mut s = Summary::default();
    s.put("method", method.label())
        .put("max_epochs", r)
        .put("eta", eta)
        .put("brackets", schedule.brackets.len())
        .put("winners", winners)
        .put("files", path_list(&files));
    write!(w, "{}", s.render(fmt)).stage("write")?;
    Ok(())
}

/// Loads the checkpoint(s) of one trained run.
fn load_run(cfg: &RunConfig, prep: &Prepared, method: MethodId, seed: u64) -> Result<TrainedRun> {
    let n = prep.dataset.n_stops;
    let paths: Vec<PathBuf> = if is_per_stop(method, prep.dataset.services_per_day) {
        (1..=n).map(|k| checkpoint_path(&cfg.out, method, seed, Some(k))).collect()
    } else {
        vec![checkpoint_path(&cfg.out, method, seed, None)]
    };
    let mut cks = Vec::with_capacity(paths.len());
    for p in &paths {
        let bytes = match std::fs::read(p) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let err = EvalError::MissingModel(format!("{method} (seed {seed}): {} not found", p.display()));
                return fail("evaluate", err.to_string());
            }
            Err(e) => return fail("load", format!("{}: {e}", p.display())),
        };
        let ck = Checkpoint::decode(&bytes).map_err(|e| CliError {
            stage: "load",
            message: format!("{}: {e}", p.display()),
        })?;
        if ck.header.method != method {
            return fail("load", format!("{} holds a {} model", p.display(), ck.header.method));
        }
        if ck.header.scalers != prep.scalers {
            return fail(
                "load",
                format!("{} was trained on a different dataset or split; retrain", p.display()),
            );
        }
        cks.push(ck);
    }
    from_checkpoints(cks).stage("load")
}

fn evaluate(w: &mut dyn Write, cfg: &RunConfig, fmt: Format, methods: Vec<MethodId>, seeds: Option<usize>) -> Result<()> {
    let methods = if methods.is_empty() {
        cfg.kv
            .list::<MethodId>("run.methods")
            .stage("config")?
            .unwrap_or_else(|| MethodId::ALL.to_vec())
    } else {
        methods
    };
    let seeds = seed_list(cfg.seed, cfg.seed_count(seeds, DEFAULT_EVAL_SEEDS).stage("config")?);
    let prep = prepare(cfg)?;
    let mut runs = Vec::new();
    for &m in methods.iter().filter(|&&m| m != MethodId::Statistical) {
        let per_seed = seeds
            .iter()
            .map(|&s| load_run(cfg, &prep, m, s))
            .collect::<Result<Vec<_>>>()?;
        runs.push((m, per_seed));
    }
    let with_stat = methods.contains(&MethodId::Statistical);
    let report = evaluate_runs(&prep, &runs, with_stat).stage("evaluate")?;
    let reference: Option<MethodId> = match cfg.kv.parse::<MethodId>("eval.reference").stage("config")? {
        Some(r) => Some(r),
        None => methods.contains(&MethodId::Halyal).then_some(MethodId::Halyal),
    };
    if let Some(r) = reference {
        if report.method(r).is_none() {
            return fail("evaluate", format!("reference method {r} was not evaluated"));
        }
    }
    let files = emit_report(&report, &cfg.out, reference).stage("evaluate")?;
    match fmt {
        Format::Text => {
            write!(w, "{}", report.to_text(reference)).stage("write")?;
            for f in &files {
                writeln!(w, "wrote {}", f.display()).stage("write")?;
            }
        }
        Format::Csv => {
            let mut buf = Vec::new();
            report.write_csv(&mut buf).stage("write")?;
            w.write_all(&buf).stage("write")?;
        }
        Format::Json => {
            let improvements = match reference {
                Some(r) => improvement_report(&report, r).stage("evaluate")?,
                None => Vec::new(),
            };
            let v = json!({ "report": report, "improvements": improvements, "files": path_list(&files) });
            writeln!(w, "{}", serde_json::to_string_pretty(&v).expect("plain values")).stage("write")?;
        }
    }
    Ok(())
}

fn parse_target(s: &str) -> Result<(NaiveDate, u32)> {
    let (d, svc) = s
        .rsplit_once(':')
        .ok_or_else(|| CliError {
            stage: "config",
            message: format!("--at `{s}`: expected DATE:SERVICE"),
        })?;
    let date = d.parse::<NaiveDate>().stage("config")?;
    let service = svc.parse::<u32>().stage("config")?;
    Ok((date, service))
}

fn predict(w: &mut dyn Write, cfg: &RunConfig, method: Option<MethodId>, at: Option<&str>, fmt: Format) -> Result<()> {
    let method = cfg.method(method).stage("config")?;
    if method == MethodId::Statistical {
        return fail("predict", "the statistical baseline predicts per (stop, service) means; use `evaluate`");
    }
    let prep = prepare(cfg)?;
    let target = match at {
        Some(s) => parse_target(s)?,
        None => match default_target(&prep.dataset) {
            Some(t) => t,
            None => return fail("predict", "dataset has no complete service"),
        },
    };
    if target.1 == 0 || target.1 as usize > prep.dataset.services_per_day {
        return fail(
            "predict",
            format!("service {} outside 1..={}", target.1, prep.dataset.services_per_day),
        );
    }
    let run = load_run(cfg, &prep, method, cfg.seed)?;
    let preds = predict_service(&prep.dataset, &run, &prep.scalers, target).stage("predict")?;
    match fmt {
        Format::Csv => {
            writeln!(w, "stop,prediction").stage("write")?;
            for (k, p) in preds.iter().enumerate() {
                writeln!(w, "{},{p}", k + 1).stage("write")?;
            }
        }
        Format::Text | Format::Json => {
            let per_stop: serde_json::Map<String, serde_json::Value> =
                preds.iter().enumerate().map(|(k, p)| ((k + 1).to_string(), json!(p))).collect();
            let v = json!({
                "method": method.label(),
                "seed": cfg.seed,
                "date": target.0.to_string(),
                "service_index": target.1,
                "predictions": per_stop,
            });
            writeln!(w, "{}", serde_json::to_string_pretty(&v).expect("plain values")).stage("write")?;
        }
    }
    Ok(())
}

fn correlate(w: &mut dyn Write, cfg: &RunConfig, fmt: Format, split: Option<String>) -> Result<()> {
    let split = match split {
        Some(s) => s,
        None => cfg.kv.get("correlate.split").unwrap_or("all").to_string(),
    };
    let dataset = match split.as_str() {
        "all" => load_dataset(cfg)?,
        "train" => {
            let prep = prepare(cfg)?;
            let b = prep.boundaries;
            prep.dataset.filter_dates(|d| b.split_of(d) == Split::Train)
        }
        other => return fail("config", format!("--split `{other}`: expected all or train")),
    };
    let m = correlation_matrix(&dataset).stage("correlate")?;
    let path = cfg.out.join("correlation.csv");
    let mut buf = Vec::new();
    m.write_csv(&mut buf).stage("write")?;
    write_file(&path, &buf)?;
    match fmt {
        Format::Csv => w.write_all(&buf).stage("write")?,
        Format::Json => {
            let rows: Vec<Vec<Option<f64>>> =
                (0..m.n).map(|i| (0..m.n).map(|j| m.get(i, j)).collect()).collect();
            let v = json!({ "split": split, "matrix": rows, "files": path_list(&[path]) });
            writeln!(w, "{}", serde_json::to_string_pretty(&v).expect("plain values")).stage("write")?;
        }
        Format::Text => {
            write!(w, "{:>8}", "").stage("write")?;
            for j in 0..m.n {
                write!(w, "{:>8}", format!("stop_{}", j + 1)).stage("write")?;
            }
            writeln!(w).stage("write")?;
            for i in 0..m.n {
                write!(w, "{:>8}", format!("stop_{}", i + 1)).stage("write")?;
                for j in 0..m.n {
                    match m.get(i, j) {
                        Some(r) => write!(w, "{r:>8.3}").stage("write")?,
                        None => write!(w, "{:>8}", "NA").stage("write")?,
                    }
                }
                writeln!(w).stage("write")?;
            }
            writeln!(w, "wrote {}", path.display()).stage("write")?;
        }
    }
    Ok(())
}
