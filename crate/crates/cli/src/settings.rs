use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use ridership_core::config::{ConfigError, KvConfig, RouteConfig};
use ridership_core::features::SplitBoundaries;
use ridership_core::models::{MethodId, TrainSchedule};

pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_EVAL_SEEDS: usize = 5;

/// Configuration file merged with command-line flags.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub kv: KvConfig,
    pub route: RouteConfig,
    pub out: PathBuf,
    pub seed: u64,
    /// Directory that relative data paths in the config are resolved against.
    base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<Self, String> {
        let (kv, base_dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                let kv: KvConfig = text.parse().map_err(|e| format!("{}: {e}", p.display()))?;
                let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (kv, dir)
            }
            None => (KvConfig::default(), PathBuf::new()),
        };
        let route = RouteConfig::from_kv(&kv).map_err(|e| e.to_string())?;
        let seed = match seed {
            Some(s) => s,
            None => kv.parse_or("run.seed", DEFAULT_SEED).map_err(|e| e.to_string())?,
        };
        let out = match out {
            Some(o) => o.to_path_buf(),
            None => kv.get("run.out").map(|o| base_dir.join(o)).unwrap_or_else(|| PathBuf::from("out")),
        };
        Ok(RunConfig {
            kv,
            route,
            out,
            seed,
            base_dir,
        })
    }

    fn data_path(&self, key: &str, default: &str) -> PathBuf {
        match self.kv.get(key) {
            Some(p) => self.base_dir.join(p),
            None => self.out.join(default),
        }
    }

    pub fn ridership_path(&self) -> PathBuf {
        self.data_path("data.ridership", "ridership.csv")
    }

    pub fn weather_path(&self) -> PathBuf {
        self.data_path("data.weather", "weather.csv")
    }

    pub fn cache_path(&self) -> PathBuf {
        self.out.join("dataset.json")
    }

    pub fn boundaries(&self) -> Result<Option<SplitBoundaries>, ConfigError> {
        let v: Option<NaiveDate> = self.kv.parse("split.validation_start")?;
        let t: Option<NaiveDate> = self.kv.parse("split.test_start")?;
        match (v, t) {
            (Some(validation_start), Some(test_start)) => Ok(Some(SplitBoundaries {
                validation_start,
                test_start,
            })),
            (None, None) => Ok(None),
            _ => Err(ConfigError::Missing("split.validation_start and split.test_start".into())),
        }
    }

    pub fn schedule(&self, max_epochs: Option<usize>) -> Result<TrainSchedule, ConfigError> {
        let d = TrainSchedule::default();
        let clip_norm = match self.kv.get("train.clip_norm") {
            Some("none") => None,
            Some(_) => self.kv.parse("train.clip_norm")?,
            None => d.clip_norm,
        };
        Ok(TrainSchedule {
            max_epochs: match max_epochs {
                Some(m) => m,
                None => self.kv.parse_or("train.max_epochs", d.max_epochs)?,
            },
            patience: self.kv.parse_or("train.patience", d.patience)?,
            clip_norm,
        })
    }

    pub fn method(&self, flag: Option<MethodId>) -> Result<MethodId, ConfigError> {
        match flag {
            Some(m) => Ok(m),
            None => self.kv.require("run.method"),
        }
    }

    pub fn seed_count(&self, flag: Option<usize>, default: usize) -> Result<usize, ConfigError> {
        match flag {
            Some(k) => Ok(k),
            None => self.kv.parse_or("run.seeds", default),
        }
    }

    /// The configuration with resolved defaults, for the run log.
    pub fn effective(&self) -> KvConfig {
        let mut kv = self.kv.clone();
        kv.set("run.seed", self.seed.to_string());
        kv.set("run.out", self.out.display().to_string());
        kv.set("data.ridership", self.ridership_path().display().to_string());
        kv.set("data.weather", self.weather_path().display().to_string());
        kv.set("route.n_stops", self.route.n_stops.to_string());
        kv.set("route.services_per_day", self.route.services_per_day.to_string());
        kv
    }
}
