//! CSV rows, JSON dumps and the metadata sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{self, StatSummary};

/// Column order of every CSV artifact.
pub const CSV_HEADER: [&str; 9] = ["kind", "observable", "depth", "width", "init", "activation", "trial", "sub_seed", "value"];

/// Description of the interval method stored in every sidecar.
pub const CI_METHOD: &str = "percentile bootstrap on the mean, 1000 resamples, seeded";

/// One measured value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub kind: String,
    pub observable: String,
    pub depth: usize,
    pub width: usize,
    pub init: String,
    pub activation: String,
    pub trial: usize,
    pub sub_seed: u64,
    pub value: f64,
}

/// Scientific notation with 17 significant digits; parses back to the same bits.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

/// CSV text for `rows`, header included.
pub fn csv_string(rows: &[Row]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        let rec = [
            r.kind.clone(),
            r.observable.clone(),
            r.depth.to_string(),
            r.width.to_string(),
            r.init.clone(),
            r.activation.clone(),
            r.trial.to_string(),
            r.sub_seed.to_string(),
            format_value(r.value),
        ];
        w.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

/// Write rows as CSV. Refuses an empty row set without touching the filesystem.
pub fn emit_csv(rows: &[Row], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no rows to write".into()));
    }
    let text = csv_string(rows)?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Parse CSV text produced by [`csv_string`].
pub fn parse_csv_str(text: &str) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(|e| Error::Config(e.to_string()))?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(Error::Config(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(|e| Error::Config(e.to_string()))).collect()
}

pub fn parse_csv(path: &Path) -> Result<Vec<Row>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_csv_str(&text)
}

/// Write rows as a JSON array.
pub fn emit_json(rows: &[Row], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no rows to write".into()));
    }
    let text = serde_json::to_string_pretty(rows).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Raw and log-magnitude summaries of one observable at one depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableSummary {
    pub observable: String,
    pub depth: usize,
    pub width: usize,
    pub raw: Option<StatSummary>,
    pub log_abs: Option<StatSummary>,
}

/// Group rows by `(observable, depth, width)` and summarise each group.
pub fn summarize_rows(rows: &[Row]) -> Vec<ObservableSummary> {
    let mut groups: BTreeMap<(String, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.observable.clone(), r.depth, r.width)).or_default().push(r.value);
    }
    groups
        .into_iter()
        .map(|((observable, depth, width), xs)| ObservableSummary {
            observable,
            depth,
            width,
            raw: stats::summarize(&xs).ok(),
            log_abs: stats::summarize_log_abs(&xs).ok(),
        })
        .collect()
}

/// Metadata written next to every CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec: serde_json::Value,
    pub spec_sha256: String,
    pub version: String,
    pub ci_method: String,
    pub created_unix: u64,
    pub rows: usize,
    pub summaries: Vec<ObservableSummary>,
}

/// `<out>.meta.json`
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_sidecar(out: &Path, spec: serde_json::Value, spec_sha256: String, rows: &[Row]) -> Result<PathBuf> {
    let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = Sidecar {
        spec,
        spec_sha256,
        version: env!("CARGO_PKG_VERSION").to_string(),
        ci_method: CI_METHOD.to_string(),
        created_unix,
        rows: rows.len(),
        summaries: summarize_rows(rows),
    };
    let path = sidecar_path(out);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: f64) -> Row {
        Row { kind: "chain_scan".into(), observable: "x".into(), depth: 3, width: 1, init: "uniform:range=1".into(), activation: "linear".into(), trial: 0, sub_seed: 42, value: v }
    }

    #[test]
    fn values_round_trip() {
        let rows = vec![row(1.0 / 3.0), row(-2.5e-300), row(f64::INFINITY), row(0.0)];
        let back = parse_csv_str(&csv_string(&rows).unwrap()).unwrap();
        assert_eq!(back, rows);
        assert_eq!(back[0].value.to_bits(), (1.0f64 / 3.0).to_bits());
    }

    #[test]
    fn header_is_fixed() {
        let s = csv_string(&[row(1.0)]).unwrap();
        assert!(s.starts_with("kind,observable,depth,width,init,activation,trial,sub_seed,value\n"));
    }
}
