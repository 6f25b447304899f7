//! Plain-text `key = value` configuration.
//!
//! Blank lines and lines whose first non-space character is `#` are ignored.
//! Keys are dotted paths (`route.n_stops`, `alias.晴れ`, `column.date`).

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

use crate::ingest::{CategoryAliases, Departure, RidershipSchema, Timetable, WeatherCategory};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("missing required key `{0}`")]
    Missing(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl FromStr for KvConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(ConfigError::DuplicateKey {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
        }
        Ok(KvConfig { entries })
    }
}

impl KvConfig {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Invalid {
                    key: key.to_string(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.parse(key)?
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    /// Comma-separated list value.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<T>().map_err(|e| ConfigError::Invalid {
                            key: key.to_string(),
                            reason: e.to_string(),
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    /// Entries under `prefix.` with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.entries.iter().filter_map(move |(k, v)| {
            k.strip_prefix(prefix)
                .and_then(|rest| rest.strip_prefix('.'))
                .map(|rest| (rest, v.as_str()))
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Route description: stops, services, timetable, alias map and column names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteConfig {
    pub route_name: String,
    pub n_stops: usize,
    pub services_per_day: usize,
    pub timetable: Timetable,
    pub aliases: CategoryAliases,
    pub schema: RidershipSchema,
}

impl Default for RouteConfig {
    fn default() -> Self {
        RouteConfig {
            route_name: "route".into(),
            n_stops: 5,
            services_per_day: 26,
            timetable: Timetable::default_26(),
            aliases: CategoryAliases::new(),
            schema: RidershipSchema::default(),
        }
    }
}

impl RouteConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let mut cfg = RouteConfig::default();
        if let Some(name) = kv.get("route.name") {
            cfg.route_name = name.to_string();
        }
        cfg.n_stops = kv.parse_or("route.n_stops", cfg.n_stops)?;
        if cfg.n_stops == 0 {
            return Err(ConfigError::Invalid {
                key: "route.n_stops".into(),
                reason: "must be >= 1".into(),
            });
        }
        let explicit_s: Option<usize> = kv.parse("route.services_per_day")?;
        match kv.list::<Departure>("route.timetable")? {
            Some(deps) => cfg.timetable = Timetable(deps),
            None => {
                if explicit_s.is_some_and(|s| s != 26) {
                    return Err(ConfigError::Missing("route.timetable".into()));
                }
            }
        }
        cfg.services_per_day = explicit_s.unwrap_or(cfg.timetable.len());
        if cfg.timetable.len() != cfg.services_per_day || cfg.services_per_day == 0 {
            return Err(ConfigError::Invalid {
                key: "route.timetable".into(),
                reason: format!(
                    "{} departures listed, services_per_day = {}",
                    cfg.timetable.len(),
                    cfg.services_per_day
                ),
            });
        }
        for (label, cat) in kv.with_prefix("alias") {
            let category: WeatherCategory = cat.parse().map_err(|_| ConfigError::Invalid {
                key: format!("alias.{label}"),
                reason: format!("unknown category `{cat}`"),
            })?;
            cfg.aliases.insert(label, category);
        }
        for (col, name) in kv.with_prefix("column") {
            let slot = match col {
                "date" => &mut cfg.schema.date,
                "service_index" => &mut cfg.schema.service_index,
                "stop_index" => &mut cfg.schema.stop_index,
                "ridership" => &mut cfg.schema.ridership,
                other => {
                    return Err(ConfigError::Invalid {
                        key: format!("column.{other}"),
                        reason: "unknown ridership column".into(),
                    })
                }
            };
            *slot = name.to_string();
        }
        Ok(cfg)
    }
}
