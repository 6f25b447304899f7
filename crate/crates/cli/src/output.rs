use std::fmt::Write as _;

use clap::ValueEnum;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

/// Ordered key/value summary rendered in any of the output formats.
#[derive(Debug, Default)]
pub struct Summary {
    entries: Vec<(String, Value)>,
}

impl Summary {
    pub fn put(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.entries.push((key.to_string(), value.into()));
        self
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => {
                let map: serde_json::Map<String, Value> = self.entries.iter().cloned().collect();
                serde_json::to_string_pretty(&Value::Object(map)).expect("plain values") + "\n"
            }
            Format::Csv => {
                let mut out = String::from("key,value\n");
                for (k, v) in &self.entries {
                    let _ = writeln!(out, "{k},{}", plain(v).replace(',', ";"));
                }
                out
            }
            Format::Text => {
                let width = self.entries.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
                let mut out = String::new();
                for (k, v) in &self.entries {
                    let _ = writeln!(out, "{k:<width$}  {}", plain(v));
                }
                out
            }
        }
    }
}

fn plain(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(plain).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}
