//! Report bundles and their JSON/CSV serialisations.

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Output format selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    /// Whole bundle as pretty-printed JSON.
    Json,
    /// Curve tables (or flattened results) as comma-separated values.
    Csv,
}

/// Everything needed to reproduce a bundle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    /// SHA-256 of the effective configuration's canonical JSON encoding.
    pub config_sha256: String,
    /// Seed actually used (after any `--seed` override).
    pub seed: u64,
    /// Name of the producing tool.
    pub tool: &'static str,
    /// Version of the producing tool.
    pub version: &'static str,
}

impl Provenance {
    /// Provenance for an effective configuration.
    pub fn of(config: &ExperimentConfig) -> Self {
        let canonical = serde_json::to_vec(config).expect("config serialises");
        let digest = Sha256::digest(&canonical);
        let config_sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
        Self { config_sha256, seed: config.seed, tool: env!("CARGO_PKG_NAME"), version: env!("CARGO_PKG_VERSION") }
    }
}

/// A plot-ready numeric table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    /// Table name.
    pub name: String,
    /// Column headers.
    pub columns: Vec<String>,
    /// Rows in grid order.
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    /// An empty table with the given headers.
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.to_string(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    /// Appends a row; its length must match the header.
    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// Outcome of an analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// Every check passed.
    Ok,
    /// A verdict failed; the process exits with status 1.
    Fail,
}

/// Machine-readable result of one command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportBundle {
    /// CLI verb that produced the bundle.
    pub command: String,
    /// Overall verdict.
    pub status: Status,
    /// Reproduction metadata.
    pub provenance: Provenance,
    /// Named values, verdicts and margins, in insertion order.
    pub results: Map<String, Value>,
    /// Curve tables.
    pub tables: Vec<Table>,
}

impl ReportBundle {
    /// An empty passing bundle.
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self { command: command.to_string(), status: Status::Ok, provenance: Provenance::of(config), results: Map::new(), tables: Vec::new() }
    }

    /// Records a named result.
    pub fn set(&mut self, key: &str, value: impl Serialize) {
        self.results.insert(key.to_string(), serde_json::to_value(value).expect("value serialises"));
    }

    /// Marks the bundle as failed when `ok` is false.
    pub fn require(&mut self, ok: bool) {
        if !ok {
            self.status = Status::Fail;
        }
    }

    /// Renders the bundle in the requested format.
    pub fn render(&self, format: Format) -> Result<String, CliError> {
        match format {
            Format::Json => serde_json::to_string_pretty(self).map(|s| s + "\n").map_err(|e| CliError::Output(e.to_string())),
            Format::Csv => self.to_csv(),
        }
    }

    fn to_csv(&self) -> Result<String, CliError> {
        let io = |e: csv::Error| CliError::Output(e.to_string());
        let mut out = Vec::new();
        if self.tables.is_empty() {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(["key", "value"]).map_err(io)?;
            let mut flat = Vec::new();
            flatten("", &Value::Object(self.results.clone()), &mut flat);
            for (k, v) in flat {
                w.write_record([k, v]).map_err(io)?;
            }
            w.flush().map_err(|e| CliError::Output(e.to_string()))?;
        } else {
            for (k, t) in self.tables.iter().enumerate() {
                if k > 0 {
                    out.push(b'\n');
                }
                let mut w = csv::Writer::from_writer(&mut out);
                w.write_record(&t.columns).map_err(io)?;
                for row in &t.rows {
                    w.write_record(row.iter().map(|v| format_number(*v))).map_err(io)?;
                }
                w.flush().map_err(|e| CliError::Output(e.to_string()))?;
            }
        }
        String::from_utf8(out).map_err(|e| CliError::Output(e.to_string()))
    }
}

/// Locale-free shortest round-trip decimal.
fn format_number(v: f64) -> String {
    format!("{v:?}")
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => m.iter().for_each(|(k, v)| flatten(&key(k), v, out)),
        Value::Array(a) => a.iter().enumerate().for_each(|(i, v)| flatten(&key(&i.to_string()), v, out)),
        Value::Null => out.push((prefix.to_string(), String::new())),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
