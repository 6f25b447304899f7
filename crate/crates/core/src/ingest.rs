//! Ridership and weather ingestion.
//!
//! Both inputs are plain comma-separated UTF-8 files with a header row and
//! ISO-8601 dates. Hourly weather is reduced to a rain flag plus precipitation
//! and attached to each service by the hour of its scheduled departure from the
//! first stop.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FIRST_WEATHER_HOUR: u32 = 6;
pub const LAST_WEATHER_HOUR: u32 = 23;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error at line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("duplicate ridership key ({date}, service {service}, stop {stop}) at line {line}")]
    DuplicateKey {
        line: u64,
        date: NaiveDate,
        service: u32,
        stop: u32,
    },
    #[error("duplicate weather observation ({date}, hour {hour}) at line {line}")]
    DuplicateObservation { line: u64, date: NaiveDate, hour: u32 },
    #[error("unknown weather category `{label}` at line {line}")]
    UnknownCategory { line: u64, label: String },
    #[error("weather hour {hour} at line {line} outside [6, 23]")]
    HourOutOfRange { line: u64, hour: u32 },
    #[error("no weather observation for {date} hour {hour}")]
    MissingWeather { date: NaiveDate, hour: u32 },
    #[error("timetable has no entry for service {0}")]
    MissingTimetableEntry(u32),
    #[error("no service weather for ({date}, service {service})")]
    MissingServiceWeather { date: NaiveDate, service: u32 },
    #[error("{what} {value} outside [1, {max}]")]
    OutOfRange {
        what: &'static str,
        value: u32,
        max: u32,
    },
    #[error("timetable lists {got} departures but services_per_day is {expected}")]
    TimetableLength { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// One observed departure from one stop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RidershipRecord {
    pub service_date: NaiveDate,
    pub service_index: u32,
    pub stop_index: u32,
    pub ridership: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeatherCategory {
    Sunny,
    Cloudy,
    RainShowers,
    Rain,
    FreezingRain,
    Other,
}

impl WeatherCategory {
    pub const ALL: [WeatherCategory; 6] = [
        WeatherCategory::Sunny,
        WeatherCategory::Cloudy,
        WeatherCategory::RainShowers,
        WeatherCategory::Rain,
        WeatherCategory::FreezingRain,
        WeatherCategory::Other,
    ];

    /// Sunny and Cloudy are dry; every other category (including the
    /// unclassifiable-precipitation bucket) counts as rain.
    pub fn is_rain(self) -> bool {
        !matches!(self, WeatherCategory::Sunny | WeatherCategory::Cloudy)
    }

    pub fn label(self) -> &'static str {
        match self {
            WeatherCategory::Sunny => "Sunny",
            WeatherCategory::Cloudy => "Cloudy",
            WeatherCategory::RainShowers => "RainShowers",
            WeatherCategory::Rain => "Rain",
            WeatherCategory::FreezingRain => "FreezingRain",
            WeatherCategory::Other => "Other",
        }
    }
}

impl fmt::Display for WeatherCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for WeatherCategory {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "sunny" => Ok(WeatherCategory::Sunny),
            "cloudy" => Ok(WeatherCategory::Cloudy),
            "rainshowers" => Ok(WeatherCategory::RainShowers),
            "rain" => Ok(WeatherCategory::Rain),
            "freezingrain" => Ok(WeatherCategory::FreezingRain),
            "other" => Ok(WeatherCategory::Other),
            _ => Err(()),
        }
    }
}

/// Maps source labels (e.g. Japanese weather names) onto canonical categories.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CategoryAliases(HashMap<String, WeatherCategory>);

impl CategoryAliases {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, label: impl Into<String>, category: WeatherCategory) {
        self.0.insert(label.into(), category);
    }

    pub fn resolve(&self, label: &str) -> Option<WeatherCategory> {
        let label = label.trim();
        self.0
            .get(label)
            .copied()
            .or_else(|| label.parse().ok())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherObservation {
    pub obs_date: NaiveDate,
    pub obs_hour: u32,
    pub category: WeatherCategory,
    pub precipitation_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceWeather {
    pub service_date: NaiveDate,
    pub service_index: u32,
    pub rain_flag: bool,
    pub precipitation_mm: f64,
}

/// Scheduled departure from the first stop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Departure {
    pub hour: u32,
    pub minute: u32,
}

impl fmt::Display for Departure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}", self.hour, self.minute)
    }
}

impl FromStr for Departure {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (h, m) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| format!("departure `{s}` is not HH:MM"))?;
        let hour: u32 = h.parse().map_err(|_| format!("bad hour in `{s}`"))?;
        let minute: u32 = m.parse().map_err(|_| format!("bad minute in `{s}`"))?;
        if hour > 23 || minute > 59 {
            return Err(format!("departure `{s}` out of range"));
        }
        Ok(Departure { hour, minute })
    }
}

/// Departure times indexed by service number (service 1 is element 0).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timetable(pub Vec<Departure>);

impl Timetable {
    /// A 26-service day: half-hourly 06:40-09:40, hourly 10:40-14:40,
    /// half-hourly 15:10-21:10, then a last run at 22:10.
    pub fn default_26() -> Self {
        let mut deps = Vec::with_capacity(26);
        let mut push = |h: u32, m: u32| deps.push(Departure { hour: h, minute: m });
        for k in 0..7 {
            let mins = 6 * 60 + 40 + 30 * k;
            push(mins / 60, mins % 60);
        }
        for h in 10..=14 {
            push(h, 40);
        }
        for k in 0..13 {
            let mins = 15 * 60 + 10 + 30 * k;
            push(mins / 60, mins % 60);
        }
        push(22, 10);
        Timetable(deps)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn departure(&self, service_index: u32) -> Option<Departure> {
        (service_index as usize)
            .checked_sub(1)
            .and_then(|i| self.0.get(i).copied())
    }
}

/// Column names for the ridership CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RidershipSchema {
    pub date: String,
    pub service_index: String,
    pub stop_index: String,
    pub ridership: String,
}

impl Default for RidershipSchema {
    fn default() -> Self {
        Self {
            date: "date".into(),
            service_index: "service_index".into(),
            stop_index: "stop_index".into(),
            ridership: "ridership".into(),
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
}

fn csv_reader<R: Read>(rdr: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(rdr)
}

fn csv_err(e: csv::Error) -> IngestError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    IngestError::Csv {
        line,
        message: e.to_string(),
    }
}

fn field(rec: &csv::StringRecord, idx: usize, line: u64) -> Result<&str> {
    rec.get(idx).ok_or_else(|| IngestError::MalformedRow {
        line,
        reason: format!("missing field {}", idx + 1),
    })
}

fn parse_date(s: &str, line: u64) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| IngestError::MalformedRow {
        line,
        reason: format!("bad date `{s}`"),
    })
}

fn parse_u32(s: &str, what: &str, line: u64) -> Result<u32> {
    s.parse::<u32>().map_err(|_| IngestError::MalformedRow {
        line,
        reason: format!("bad {what} `{s}`"),
    })
}

fn parse_positive(s: &str, what: &str, line: u64) -> Result<u32> {
    let v = parse_u32(s, what, line)?;
    if v == 0 {
        return Err(IngestError::MalformedRow {
            line,
            reason: format!("{what} must be >= 1"),
        });
    }
    Ok(v)
}

pub fn parse_ridership_csv(path: &Path, schema: &RidershipSchema) -> Result<Vec<RidershipRecord>> {
    parse_ridership_reader(File::open(path)?, schema)
}

/// Parses ridership rows, preserving file order.
pub fn parse_ridership_reader<R: Read>(
    rdr: R,
    schema: &RidershipSchema,
) -> Result<Vec<RidershipRecord>> {
    let mut rdr = csv_reader(rdr);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    let c_date = column(&headers, &schema.date)?;
    let c_svc = column(&headers, &schema.service_index)?;
    let c_stop = column(&headers, &schema.stop_index)?;
    let c_ride = column(&headers, &schema.ridership)?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let rec = RidershipRecord {
            service_date: parse_date(field(&row, c_date, line)?, line)?,
            service_index: parse_positive(field(&row, c_svc, line)?, "service_index", line)?,
            stop_index: parse_positive(field(&row, c_stop, line)?, "stop_index", line)?,
            ridership: parse_u32(field(&row, c_ride, line)?, "ridership", line)?,
        };
        if !seen.insert((rec.service_date, rec.service_index, rec.stop_index)) {
            return Err(IngestError::DuplicateKey {
                line,
                date: rec.service_date,
                service: rec.service_index,
                stop: rec.stop_index,
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_weather_csv(path: &Path, aliases: &CategoryAliases) -> Result<Vec<WeatherObservation>> {
    parse_weather_reader(File::open(path)?, aliases)
}

/// Parses hourly weather with columns `date,hour,category,precipitation_mm`.
pub fn parse_weather_reader<R: Read>(
    rdr: R,
    aliases: &CategoryAliases,
) -> Result<Vec<WeatherObservation>> {
    let mut rdr = csv_reader(rdr);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let c_date = column(&headers, "date")?;
    let c_hour = column(&headers, "hour")?;
    let c_cat = column(&headers, "category")?;
    let c_prec = column(&headers, "precipitation_mm")?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let obs_date = parse_date(field(&row, c_date, line)?, line)?;
        let obs_hour = parse_u32(field(&row, c_hour, line)?, "hour", line)?;
        if !(FIRST_WEATHER_HOUR..=LAST_WEATHER_HOUR).contains(&obs_hour) {
            return Err(IngestError::HourOutOfRange {
                line,
                hour: obs_hour,
            });
        }
        let label = field(&row, c_cat, line)?;
        let category = aliases
            .resolve(label)
            .ok_or_else(|| IngestError::UnknownCategory {
                line,
                label: label.to_string(),
            })?;
        let prec_s = field(&row, c_prec, line)?;
        let precipitation_mm: f64 = prec_s.parse().map_err(|_| IngestError::MalformedRow {
            line,
            reason: format!("bad precipitation `{prec_s}`"),
        })?;
        if !precipitation_mm.is_finite() || precipitation_mm < 0.0 {
            return Err(IngestError::MalformedRow {
                line,
                reason: format!("precipitation {precipitation_mm} must be finite and >= 0"),
            });
        }
        if !seen.insert((obs_date, obs_hour)) {
            return Err(IngestError::DuplicateObservation {
                line,
                date: obs_date,
                hour: obs_hour,
            });
        }
        out.push(WeatherObservation {
            obs_date,
            obs_hour,
            category,
            precipitation_mm,
        });
    }
    Ok(out)
}

pub fn binarize_weather(obs: &WeatherObservation) -> (bool, f64) {
    (obs.category.is_rain(), obs.precipitation_mm)
}

/// Hourly rain/no-rain tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeatherTotals {
    pub rain: usize,
    pub no_rain: usize,
}

impl WeatherTotals {
    pub fn from_observations(obs: &[WeatherObservation]) -> Self {
        let rain = obs.iter().filter(|o| o.category.is_rain()).count();
        WeatherTotals {
            rain,
            no_rain: obs.len() - rain,
        }
    }
}

/// Attaches to each `(date, service)` the observation at the hour of its
/// scheduled first-stop departure (minutes truncated).
pub fn join_weather_to_services(
    records: &[RidershipRecord],
    weather: &[WeatherObservation],
    timetable: &Timetable,
) -> Result<Vec<ServiceWeather>> {
    let by_hour: HashMap<(NaiveDate, u32), &WeatherObservation> = weather
        .iter()
        .map(|o| ((o.obs_date, o.obs_hour), o))
        .collect();
    let services: std::collections::BTreeSet<(NaiveDate, u32)> = records
        .iter()
        .map(|r| (r.service_date, r.service_index))
        .collect();

    services
        .into_iter()
        .map(|(date, service)| {
            let dep = timetable
                .departure(service)
                .ok_or(IngestError::MissingTimetableEntry(service))?;
            let obs = by_hour
                .get(&(date, dep.hour))
                .ok_or(IngestError::MissingWeather {
                    date,
                    hour: dep.hour,
                })?;
            let (rain_flag, precipitation_mm) = binarize_weather(obs);
            Ok(ServiceWeather {
                service_date: date,
                service_index: service,
                rain_flag,
                precipitation_mm,
            })
        })
        .collect()
}

/// One `(date, service)` with its per-stop counts and weather.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSlot {
    pub date: NaiveDate,
    pub service_index: u32,
    /// Index `k` holds stop `k + 1`.
    pub ridership: Vec<Option<u32>>,
    pub rain_flag: bool,
    pub precipitation_mm: f64,
}

impl ServiceSlot {
    pub fn is_complete(&self) -> bool {
        self.ridership.iter().all(Option::is_some)
    }
}

/// A validated, chronologically sorted route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDataset {
    pub n_stops: usize,
    pub services_per_day: usize,
    pub timetable: Timetable,
    pub records: Vec<RidershipRecord>,
    pub weather: Vec<ServiceWeather>,
    pub slots: Vec<ServiceSlot>,
}

pub fn build_route_dataset(
    records: Vec<RidershipRecord>,
    service_weather: Vec<ServiceWeather>,
    n_stops: usize,
    services_per_day: usize,
    timetable: Timetable,
) -> Result<RouteDataset> {
    if records.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    if timetable.len() != services_per_day {
        return Err(IngestError::TimetableLength {
            expected: services_per_day,
            got: timetable.len(),
        });
    }
    let mut records = records;
    for r in &records {
        check_range("stop_index", r.stop_index, n_stops)?;
        check_range("service_index", r.service_index, services_per_day)?;
    }
    records.sort();
    for w in records.windows(2) {
        if (w[0].service_date, w[0].service_index, w[0].stop_index)
            == (w[1].service_date, w[1].service_index, w[1].stop_index)
        {
            return Err(IngestError::DuplicateKey {
                line: 0,
                date: w[0].service_date,
                service: w[0].service_index,
                stop: w[0].stop_index,
            });
        }
    }

    let mut weather_map: BTreeMap<(NaiveDate, u32), ServiceWeather> = BTreeMap::new();
    for sw in service_weather {
        weather_map.insert((sw.service_date, sw.service_index), sw);
    }

    let mut slots: Vec<ServiceSlot> = Vec::new();
    let mut used = Vec::new();
    for r in &records {
        let key = (r.service_date, r.service_index);
        let fresh = slots
            .last()
            .is_none_or(|s| (s.date, s.service_index) != key);
        if fresh {
            let sw = weather_map
                .get(&key)
                .ok_or(IngestError::MissingServiceWeather {
                    date: key.0,
                    service: key.1,
                })?;
            used.push(*sw);
            slots.push(ServiceSlot {
                date: key.0,
                service_index: key.1,
                ridership: vec![None; n_stops],
                rain_flag: sw.rain_flag,
                precipitation_mm: sw.precipitation_mm,
            });
        }
        let slot = slots.last_mut().expect("slot pushed above");
        slot.ridership[r.stop_index as usize - 1] = Some(r.ridership);
    }

    Ok(RouteDataset {
        n_stops,
        services_per_day,
        timetable,
        records,
        weather: used,
        slots,
    })
}

fn check_range(what: &'static str, value: u32, max: usize) -> Result<()> {
    if value == 0 || value as usize > max {
        return Err(IngestError::OutOfRange {
            what,
            value,
            max: max as u32,
        });
    }
    Ok(())
}

impl RouteDataset {
    pub fn incomplete_count(&self) -> usize {
        self.slots.iter().filter(|s| !s.is_complete()).count()
    }

    pub fn date_range(&self) -> (NaiveDate, NaiveDate) {
        let first = self.slots.first().map(|s| s.date);
        let last = self.slots.last().map(|s| s.date);
        // build_route_dataset rejects empty input
        (first.unwrap_or_default(), last.unwrap_or_default())
    }

    /// Keeps only services whose date satisfies `keep`.
    pub fn filter_dates(&self, keep: impl Fn(NaiveDate) -> bool) -> RouteDataset {
        RouteDataset {
            n_stops: self.n_stops,
            services_per_day: self.services_per_day,
            timetable: self.timetable.clone(),
            records: self
                .records
                .iter()
                .filter(|r| keep(r.service_date))
                .copied()
                .collect(),
            weather: self
                .weather
                .iter()
                .filter(|w| keep(w.service_date))
                .copied()
                .collect(),
            slots: self.slots.iter().filter(|s| keep(s.date)).cloned().collect(),
        }
    }

    /// Position of a service in the continuous daily sequence, used to detect gaps.
    pub fn ordinal(&self, date: NaiveDate, service_index: u32) -> i64 {
        let day = date.signed_duration_since(NaiveDate::MIN).num_days();
        day * self.services_per_day as i64 + (service_index as i64 - 1)
    }

    pub fn write_ridership_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["date", "service_index", "stop_index", "ridership"])
            .map_err(csv_err)?;
        for r in &self.records {
            wtr.write_record([
                r.service_date.format("%Y-%m-%d").to_string(),
                r.service_index.to_string(),
                r.stop_index.to_string(),
                r.ridership.to_string(),
            ])
            .map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_service_weather_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["date", "service_index", "rain_flag", "precipitation_mm"])
            .map_err(csv_err)?;
        for s in &self.weather {
            wtr.write_record([
                s.service_date.format("%Y-%m-%d").to_string(),
                s.service_index.to_string(),
                u8::from(s.rain_flag).to_string(),
                s.precipitation_mm.to_string(),
            ])
            .map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Reads the per-service weather written by [`RouteDataset::write_service_weather_csv`].
pub fn parse_service_weather_reader<R: Read>(rdr: R) -> Result<Vec<ServiceWeather>> {
    let mut rdr = csv_reader(rdr);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let c_date = column(&headers, "date")?;
    let c_svc = column(&headers, "service_index")?;
    let c_flag = column(&headers, "rain_flag")?;
    let c_prec = column(&headers, "precipitation_mm")?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let rain_flag = match field(&row, c_flag, line)? {
            "0" | "false" => false,
            "1" | "true" => true,
            other => {
                return Err(IngestError::MalformedRow {
                    line,
                    reason: format!("bad rain_flag `{other}`"),
                })
            }
        };
        let prec_s = field(&row, c_prec, line)?;
        let precipitation_mm: f64 = prec_s
            .parse()
            .ok()
            .filter(|p: &f64| p.is_finite() && *p >= 0.0)
            .ok_or_else(|| IngestError::MalformedRow {
                line,
                reason: format!("bad precipitation `{prec_s}`"),
            })?;
        out.push(ServiceWeather {
            service_date: parse_date(field(&row, c_date, line)?, line)?,
            service_index: parse_positive(field(&row, c_svc, line)?, "service_index", line)?,
            rain_flag,
            precipitation_mm,
        });
    }
    Ok(out)
}
