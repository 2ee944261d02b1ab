//! Renders command results as aligned tables, JSON or CSV on stdout.

use std::io::{self, Write};
use std::net::SocketAddr;

use anyhow::Result;
use clap::ValueEnum;
use edgent_core::planner::PlanReport;
use edgent_core::predictor::PredictorSet;
use edgent_core::profiler::MeasurementRow;
use edgent_net::DeviceReport;
use serde::Serialize;
use serde_json::{json, Map, Value};

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
    Csv,
}

pub struct Output {
    pub format: Format,
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn fields(value: &Value) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    flatten("", value, &mut out);
    out
}

fn cell(v: &Value, table: bool) -> String {
    match v {
        Value::Null if table => "-".into(),
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Number(n) if table && n.is_f64() => {
            let x = n.as_f64().unwrap_or(f64::NAN);
            if x != 0.0 && x.abs() < 1e-3 {
                format!("{x:.3e}")
            } else {
                format!("{x:.4}")
            }
        }
        other => other.to_string(),
    }
}

impl Output {
    pub fn new(format: Format) -> Self {
        Output { format }
    }

    /// One object: key/value lines, a pretty JSON object, or a one-row CSV.
    fn record(&self, value: Value) -> Result<()> {
        let mut stdout = io::stdout().lock();
        match self.format {
            Format::Json => writeln!(stdout, "{}", serde_json::to_string_pretty(&value)?)?,
            Format::Table => {
                let fields = fields(&value);
                let width = fields.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
                for (k, v) in &fields {
                    writeln!(stdout, "{k:<width$}  {}", cell(v, true))?;
                }
            }
            Format::Csv => {
                let fields = fields(&value);
                let mut w = csv::Writer::from_writer(stdout);
                w.write_record(fields.iter().map(|(k, _)| k.as_str()))?;
                w.write_record(fields.iter().map(|(_, v)| cell(v, false)))?;
                w.flush()?;
            }
        }
        Ok(())
    }

    /// Homogeneous rows: an aligned table, a JSON array, or CSV.
    fn list(&self, rows: Vec<Value>) -> Result<()> {
        let mut stdout = io::stdout().lock();
        if self.format == Format::Json {
            writeln!(stdout, "{}", serde_json::to_string_pretty(&Value::Array(rows))?)?;
            return Ok(());
        }
        let table = self.format == Format::Table;
        let rows: Vec<Vec<(String, Value)>> = rows.iter().map(fields).collect();
        let header: Vec<String> = rows
            .first()
            .map(|r| r.iter().map(|(k, _)| k.clone()).collect())
            .unwrap_or_default();
        let cells: Vec<Vec<String>> = rows
            .iter()
            .map(|r| r.iter().map(|(_, v)| cell(v, table)).collect())
            .collect();
        if !table {
            let mut w = csv::Writer::from_writer(stdout);
            w.write_record(&header)?;
            for r in &cells {
                w.write_record(r)?;
            }
            w.flush()?;
            return Ok(());
        }
        let mut widths: Vec<usize> = header.iter().map(String::len).collect();
        for r in &cells {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |r: &[String]| {
            r.iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        writeln!(stdout, "{}", line(&header))?;
        for r in &cells {
            writeln!(stdout, "{}", line(r))?;
        }
        Ok(())
    }

    pub fn plan(&self, report: &PlanReport) -> Result<()> {
        self.record(serde_json::to_value(report)?)
    }

    pub fn rows<T: Serialize>(&self, rows: &[T]) -> Result<()> {
        self.list(rows.iter().map(serde_json::to_value).collect::<Result<_, _>>()?)
    }

    pub fn profile(&self, rows: &[MeasurementRow]) -> Result<()> {
        self.list(
            rows.iter()
                .map(|r| {
                    let x = r.features.as_slice();
                    json!({
                        "kind": r.kind.as_str(),
                        "x1": x[0],
                        "x2": x.get(1),
                        "latency_ms": r.latency_ms,
                    })
                })
                .collect(),
        )
    }

    pub fn predictors(&self, set: &PredictorSet) -> Result<()> {
        if self.format == Format::Json {
            return self.record(serde_json::from_str(&set.to_json())?);
        }
        let mut rows = Vec::new();
        for (side, models) in [("device", &set.device), ("edge", &set.edge)] {
            for (kind, m) in models.iter() {
                rows.push(json!({
                    "side": side,
                    "kind": kind.as_str(),
                    "w1": m.weights[0],
                    "w2": m.weights.get(1),
                    "b": m.intercept,
                }));
            }
        }
        self.list(rows)
    }

    pub fn simulation(&self, value: Value) -> Result<()> {
        self.record(value)
    }

    pub fn device(&self, report: &DeviceReport) -> Result<()> {
        self.record(serde_json::to_value(report)?)
    }

    pub fn listening(&self, addr: SocketAddr) -> Result<()> {
        let mut map = Map::new();
        map.insert("listening".into(), Value::String(addr.to_string()));
        self.record(Value::Object(map))?;
        io::stdout().flush()?;
        Ok(())
    }
}
