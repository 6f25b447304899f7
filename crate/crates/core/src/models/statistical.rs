use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::ingest::RouteDataset;

use super::{ModelError, Result};

/// Historical mean ridership per `(stop, service)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticalBaseline {
    pub table: BTreeMap<(u32, u32), f64>,
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
    count: usize,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
        self.count += 1;
    }

    fn mean(&self) -> f64 {
        (self.sum + self.carry) / self.count as f64
    }
}

/// Means over every record dated within `[from, to]` (inclusive).
pub fn fit_statistical(dataset: &RouteDataset, from: NaiveDate, to: NaiveDate) -> Result<StatisticalBaseline> {
    let mut acc: BTreeMap<(u32, u32), CompensatedSum> = BTreeMap::new();
    for r in dataset
        .records
        .iter()
        .filter(|r| r.service_date >= from && r.service_date <= to)
    {
        acc.entry((r.stop_index, r.service_index))
            .or_default()
            .add(r.ridership as f64);
    }
    if acc.is_empty() {
        return Err(ModelError::EmptyWindow);
    }
    Ok(StatisticalBaseline {
        table: acc.into_iter().map(|(k, s)| (k, s.mean())).collect(),
    })
}

pub fn predict_statistical(b: &StatisticalBaseline, stop: u32, service_index: u32) -> Result<f64> {
    b.table
        .get(&(stop, service_index))
        .copied()
        .ok_or(ModelError::MissingKey {
            stop,
            service: service_index,
        })
}

impl StatisticalBaseline {
    pub fn predict(&self, stop: u32, service_index: u32) -> Result<f64> {
        predict_statistical(self, stop, service_index)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "stop_index,service_index,mean")?;
        for ((stop, svc), mean) in &self.table {
            writeln!(w, "{stop},{svc},{mean}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> std::result::Result<Self, String> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
        if headers.iter().collect::<Vec<_>>() != ["stop_index", "service_index", "mean"] {
            return Err(format!("unexpected header {headers:?}"));
        }
        let mut table = BTreeMap::new();
        for row in rdr.records() {
            let row = row.map_err(|e| e.to_string())?;
            let line = row.position().map_or(0, |p| p.line());
            let bad = || format!("malformed row at line {line}");
            let stop: u32 = row.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let svc: u32 = row.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let mean: f64 = row
                .get(2)
                .and_then(|s| s.parse().ok())
                .filter(|m: &f64| m.is_finite())
                .ok_or_else(bad)?;
            if table.insert((stop, svc), mean).is_some() {
                return Err(format!("duplicate key ({stop}, {svc}) at line {line}"));
            }
        }
        Ok(StatisticalBaseline { table })
    }
}
