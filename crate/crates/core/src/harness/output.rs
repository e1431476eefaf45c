use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 11] = [
    "experiment",
    "kind",
    "N",
    "gamma",
    "step_rule",
    "p",
    "replicas",
    "metric_name",
    "metric_value",
    "stderr",
    "seed",
];

/// One aggregated cell. `stderr` is 0 for exact or single-run values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    pub kind: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub gamma: f64,
    pub step_rule: String,
    pub p: usize,
    pub replicas: usize,
    pub metric_name: String,
    pub metric_value: f64,
    pub stderr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub rows: Vec<MetricRow>,
    pub wall_clock_seconds: f64,
    /// Free-form conventions that apply to this run's numbers.
    pub notes: Vec<String>,
}

impl RunRecord {
    pub fn rows_named<'a>(&'a self, kind: &'a str, metric: &'a str) -> impl Iterator<Item = &'a MetricRow> + 'a {
        self.rows.iter().filter(move |r| r.kind == kind && r.metric_name == metric)
    }

    pub fn value(&self, kind: &str, metric: &str, n: usize) -> Option<f64> {
        self.rows_named(kind, metric).find(|r| r.n == n).map(|r| r.metric_value)
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        if !(r.metric_value.is_finite() && r.gamma.is_finite() && r.stderr.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite value in row {}/{}", r.kind, r.metric_name)));
        }
        w.write_record([
            r.experiment.clone(),
            r.kind.clone(),
            r.n.to_string(),
            fmt_f64(r.gamma),
            r.step_rule.clone(),
            r.p.to_string(),
            r.replicas.to_string(),
            r.metric_name.clone(),
            fmt_f64(r.metric_value),
            fmt_f64(r.stderr),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_HEADER {
        return Err(Error::Parse { line: 1, message: format!("unexpected header {header:?}") });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |k: usize| -> Result<f64> {
            rec[k].parse().map_err(|_| Error::Parse { line, message: format!("bad number in column {}", CSV_HEADER[k]) })
        };
        let int = |k: usize| -> Result<u64> {
            rec[k].parse().map_err(|_| Error::Parse { line, message: format!("bad integer in column {}", CSV_HEADER[k]) })
        };
        rows.push(MetricRow {
            experiment: rec[0].to_owned(),
            kind: rec[1].to_owned(),
            n: int(2)? as usize,
            gamma: num(3)?,
            step_rule: rec[4].to_owned(),
            p: int(5)? as usize,
            replicas: int(6)? as usize,
            metric_name: rec[7].to_owned(),
            metric_value: num(8)?,
            stderr: num(9)?,
            seed: int(10)?,
        });
    }
    Ok(rows)
}

fn create(path: &Path) -> Result<std::fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(std::fs::File::create(path)?)
}

pub fn emit_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    write_csv(rows, create(path)?)
}

pub fn emit_json(record: &RunRecord, path: &Path) -> Result<()> {
    let f = create(path)?;
    serde_json::to_writer_pretty(f, record)?;
    Ok(())
}
