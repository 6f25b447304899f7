//! Synthetic route generator for tests and demos.
//!
//! Expected ridership at (day, service, stop) is
//!
//! ```text
//! base(stop, service) * (1 - weekend_effect)^[weekend] * (1 - rain_effect)^[rain]
//!     * (1 + latent_weight * z(day, service))
//! ```
//!
//! where `z` is a mean-reverting demand process shared by every stop. Gaussian
//! noise is added, then the value is rounded and clamped at zero. Weather is
//! hourly with a persistent rain state.

use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::KvConfig;
use crate::ingest::{
    build_route_dataset, join_weather_to_services, Departure, IngestError, RidershipRecord, RouteDataset, Timetable,
    WeatherCategory, WeatherObservation,
};
use crate::nn::rng_from_seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad synth arguments: {0}")]
    BadArgs(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_days: usize,
    pub n_stops: usize,
    pub services_per_day: usize,
    pub start_date: NaiveDate,
    /// Mean ridership of the busiest stop at an off-peak service.
    pub base_level: f64,
    pub weekend_effect: f64,
    pub rain_effect: f64,
    pub latent_weight: f64,
    pub noise_sd: f64,
    /// Probability that a rainy hour is followed by another rainy hour.
    pub rain_persistence: f64,
    /// Probability that a dry hour turns rainy.
    pub rain_onset: f64,
    /// Fraction of (date, service, stop) counts left out.
    pub missing_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_days: 60,
            n_stops: 5,
            services_per_day: 26,
            start_date: NaiveDate::from_ymd_opt(2021, 10, 1).expect("valid date"),
            base_level: 12.0,
            weekend_effect: 0.4,
            rain_effect: 0.3,
            latent_weight: 0.25,
            noise_sd: 1.0,
            rain_persistence: 0.85,
            rain_onset: 0.04,
            missing_rate: 0.0,
        }
    }
}

impl SynthConfig {
    /// Every effect, noise and the shared demand term switched off.
    pub fn constant(n_days: usize, n_stops: usize) -> Self {
        SynthConfig {
            n_days,
            n_stops,
            weekend_effect: 0.0,
            rain_effect: 0.0,
            latent_weight: 0.0,
            noise_sd: 0.0,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::BadArgs(m.to_string()));
        if self.n_days == 0 {
            return bad("n_days must be >= 1");
        }
        if self.n_stops == 0 || self.services_per_day == 0 || self.services_per_day > 48 {
            return bad("need n_stops >= 1 and 1..=48 services per day");
        }
        let unit = [
            self.weekend_effect,
            self.rain_effect,
            self.rain_persistence,
            self.rain_onset,
            self.missing_rate,
        ];
        if unit.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("effects and probabilities must lie in [0, 1]");
        }
        if !(self.base_level >= 0.0 && self.noise_sd >= 0.0 && self.latent_weight >= 0.0) {
            return bad("base_level, noise_sd and latent_weight must be >= 0");
        }
        Ok(())
    }

    /// Reads `synth.*` keys over the defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self, crate::config::ConfigError> {
        let d = SynthConfig::default();
        Ok(SynthConfig {
            n_days: kv.parse_or("synth.n_days", d.n_days)?,
            n_stops: kv.parse_or("route.n_stops", d.n_stops)?,
            services_per_day: kv.parse_or("route.services_per_day", d.services_per_day)?,
            start_date: kv.parse_or("synth.start_date", d.start_date)?,
            base_level: kv.parse_or("synth.base_level", d.base_level)?,
            weekend_effect: kv.parse_or("synth.weekend_effect", d.weekend_effect)?,
            rain_effect: kv.parse_or("synth.rain_effect", d.rain_effect)?,
            latent_weight: kv.parse_or("synth.latent_weight", d.latent_weight)?,
            noise_sd: kv.parse_or("synth.noise_sd", d.noise_sd)?,
            rain_persistence: kv.parse_or("synth.rain_persistence", d.rain_persistence)?,
            rain_onset: kv.parse_or("synth.rain_onset", d.rain_onset)?,
            missing_rate: kv.parse_or("synth.missing_rate", d.missing_rate)?,
        })
    }

    pub fn timetable(&self) -> Timetable {
        if self.services_per_day == 26 {
            return Timetable::default_26();
        }
        // evenly spaced between 06:00 and 22:00
        let n = self.services_per_day as u32;
        let span = 16 * 60;
        Timetable(
            (0..n)
                .map(|i| {
                    let m = 6 * 60 + if n == 1 { 0 } else { i * span / (n - 1) };
                    Departure {
                        hour: m / 60,
                        minute: m % 60,
                    }
                })
                .collect(),
        )
    }
}

/// Morning and evening peaks over a flat base, in (0.5, 2.5).
fn service_profile(service: usize, services_per_day: usize) -> f64 {
    let t = if services_per_day == 1 {
        0.5
    } else {
        (service - 1) as f64 / (services_per_day - 1) as f64
    };
    let bump = |c: f64, w: f64| (-((t - c) / w).powi(2)).exp();
    0.5 + 1.5 * bump(0.12, 0.08) + 1.0 * bump(0.72, 0.1)
}

fn stop_factor(stop: usize) -> f64 {
    // stops farther along the route carry more riders
    0.6 + 0.25 * (stop - 1) as f64
}

pub fn is_weekend(date: NaiveDate) -> bool {
    matches!(date.weekday(), Weekday::Sat | Weekday::Sun)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub config: SynthConfig,
    pub records: Vec<RidershipRecord>,
    pub weather: Vec<WeatherObservation>,
    pub dataset: RouteDataset,
}

pub const WEATHER_FIRST_HOUR: u32 = 6;
pub const WEATHER_LAST_HOUR: u32 = 23;

pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthData, SynthError> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let timetable = cfg.timetable();
    let dates: Vec<NaiveDate> = (0..cfg.n_days as i64).map(|d| cfg.start_date + Duration::days(d)).collect();

    let mut weather = Vec::new();
    let mut raining = false;
    for &date in &dates {
        for hour in WEATHER_FIRST_HOUR..=WEATHER_LAST_HOUR {
            let p = if raining { cfg.rain_persistence } else { cfg.rain_onset };
            raining = rng.gen_bool(p);
            let (category, precipitation_mm) = if raining {
                let cats = [
                    WeatherCategory::Rain,
                    WeatherCategory::RainShowers,
                    WeatherCategory::FreezingRain,
                    WeatherCategory::Other,
                ];
                let c = cats[rng.gen_range(0..4)];
                (c, (rng.gen_range(0.5..6.0f64) * 10.0).round() / 10.0)
            } else {
                let c = if rng.gen_bool(0.5) {
                    WeatherCategory::Sunny
                } else {
                    WeatherCategory::Cloudy
                };
                (c, 0.0)
            };
            weather.push(WeatherObservation {
                obs_date: date,
                obs_hour: hour,
                category,
                precipitation_mm,
            });
        }
    }

    let rain_at = |date_idx: usize, service: usize| -> bool {
        let hour = timetable.0[service - 1].hour;
        let h = hour.clamp(WEATHER_FIRST_HOUR, WEATHER_LAST_HOUR) - WEATHER_FIRST_HOUR;
        weather[date_idx * (WEATHER_LAST_HOUR - WEATHER_FIRST_HOUR + 1) as usize + h as usize]
            .category
            .is_rain()
    };

    let noise = Normal::new(0.0, cfg.noise_sd.max(f64::MIN_POSITIVE)).expect("finite sd");
    let shock = Normal::new(0.0, 1.0).expect("unit normal");
    let mut z: f64 = 0.0;
    let mut records = Vec::new();
    for (di, &date) in dates.iter().enumerate() {
        // day-level demand shock plus slower drift within the day
        let day_level: f64 = shock.sample(&mut rng);
        for service in 1..=cfg.services_per_day {
            z = 0.6 * z + 0.4 * day_level + 0.3 * shock.sample(&mut rng);
            let mut factor = 1.0;
            if is_weekend(date) {
                factor *= 1.0 - cfg.weekend_effect;
            }
            if rain_at(di, service) {
                factor *= 1.0 - cfg.rain_effect;
            }
            let demand = (1.0 + cfg.latent_weight * z).max(0.0);
            for stop in 1..=cfg.n_stops {
                let mean = cfg.base_level * stop_factor(stop) * service_profile(service, cfg.services_per_day);
                let eps = if cfg.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let value = (mean * factor * demand + eps).round().max(0.0);
                let drop = cfg.missing_rate > 0.0 && rng.gen_bool(cfg.missing_rate);
                if !drop {
                    records.push(RidershipRecord {
                        service_date: date,
                        service_index: service as u32,
                        stop_index: stop as u32,
                        ridership: value as u32,
                    });
                }
            }
        }
    }

    let sw = join_weather_to_services(&records, &weather, &timetable)?;
    let dataset = build_route_dataset(records.clone(), sw, cfg.n_stops, cfg.services_per_day, timetable)?;
    Ok(SynthData {
        config: cfg.clone(),
        records,
        weather,
        dataset,
    })
}

impl SynthData {
    pub fn write_weather_csv<W: std::io::Write>(&self, w: W) -> Result<(), SynthError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["date", "hour", "category", "precipitation_mm"])?;
        for o in &self.weather {
            wtr.write_record([
                o.obs_date.format("%Y-%m-%d").to_string(),
                o.obs_hour.to_string(),
                o.category.label().to_string(),
                o.precipitation_mm.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Route config text matching the generated files.
    pub fn route_config_text(&self) -> String {
        let mut kv = KvConfig::default();
        kv.set("route.name", "synthetic");
        kv.set("route.n_stops", self.config.n_stops.to_string());
        kv.set("route.services_per_day", self.config.services_per_day.to_string());
        let tt: Vec<String> = self.dataset.timetable.0.iter().map(|d| d.to_string()).collect();
        kv.set("route.timetable", tt.join(", "));
        kv.to_text()
    }

    /// Writes `ridership.csv` and `weather.csv` into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<(PathBuf, PathBuf), SynthError> {
        std::fs::create_dir_all(dir)?;
        let rpath = dir.join("ridership.csv");
        let wpath = dir.join("weather.csv");
        self.dataset
            .write_ridership_csv(std::io::BufWriter::new(std::fs::File::create(&rpath)?))?;
        self.write_weather_csv(std::io::BufWriter::new(std::fs::File::create(&wpath)?))?;
        Ok((rpath, wpath))
    }
}
