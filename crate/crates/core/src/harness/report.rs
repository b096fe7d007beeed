//! Writing run reports as CSV and JSON.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::experiment::{Estimation, PlanSummary, RunReport, SweepRow};
use crate::wireless::RoundRecord;

/// Output format selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    Csv,
    Json,
    #[default]
    Both,
}

impl ReportFormat {
    fn csv(self) -> bool {
        matches!(self, Self::Csv | Self::Both)
    }

    fn json(self) -> bool {
        matches!(self, Self::Json | Self::Both)
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("unknown format {other:?} (csv, json, both)"))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Csv => "csv",
            Self::Json => "json",
            Self::Both => "both",
        })
    }
}

/// Column names of the per-round CSV.
pub const CSV_COLUMNS: [&str; 6] = ["round", "participants", "round_time_s", "cumulative_time_s", "loss", "accuracy"];

#[derive(Serialize)]
struct CsvRow<'a> {
    round: usize,
    participants: &'a str,
    round_time_s: f64,
    cumulative_time_s: f64,
    loss: f64,
    accuracy: f64,
}

/// Per-round CSV with columns
/// `round,participants,round_time_s,cumulative_time_s,loss,accuracy`;
/// participants are `;`-separated client indices.
pub fn write_records_csv<W: std::io::Write>(records: &[RoundRecord], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        let participants = r
            .participants
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(";");
        w.serialize(CsvRow {
            round: r.round,
            participants: &participants,
            round_time_s: r.round_time,
            cumulative_time_s: r.cumulative_time,
            loss: r.global_loss,
            accuracy: r.accuracy,
        })?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Parses the CSV written by [`write_records_csv`].
pub fn read_records_csv<R: std::io::Read>(reader: R) -> Result<Vec<RoundRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or_default();
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::Config(format!("bad number {:?} in CSV", field(i))))
        };
        let participants = field(1)
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Config(format!("bad client index {s:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        out.push(RoundRecord {
            round: field(0)
                .parse()
                .map_err(|_| Error::Config(format!("bad round {:?}", field(0))))?,
            participants,
            round_time: num(2)?,
            cumulative_time: num(3)?,
            global_loss: num(4)?,
            accuracy: num(5)?,
        });
    }
    Ok(out)
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Writes `records.csv` and/or `report.json` into `dir`, returning the paths written.
pub fn emit_report(report: &RunReport, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if format.csv() {
        let path = dir.join("records.csv");
        write_records_csv(&report.records, create(&path)?)?;
        written.push(path);
    }
    if format.json() {
        let path = dir.join("report.json");
        serde_json::to_writer_pretty(create(&path)?, report)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes a strategy comparison as `sweep.csv` and/or `sweep.json`, plus one
/// subdirectory per strategy holding its full report.
pub fn emit_sweep(reports: &[RunReport], dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows: Vec<SweepRow> = reports.iter().map(SweepRow::from).collect();
    let mut written = Vec::new();
    if format.csv() {
        let path = dir.join("sweep.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    if format.json() {
        let path = dir.join("sweep.json");
        serde_json::to_writer_pretty(create(&path)?, &rows)?;
        written.push(path);
    }
    for report in reports {
        let sub = dir.join(sanitize(&report.strategy));
        written.extend(emit_report(report, &sub, format)?);
    }
    Ok(written)
}

#[derive(Serialize)]
struct ProbeRow {
    q: f64,
    k: usize,
    rounds: f64,
    time_s: f64,
    y: f64,
    z: f64,
}

/// Writes `probes.csv` (one row per probe) and/or `estimation.json`, plus
/// `constants.json` in either case.
pub fn emit_estimation(estimation: &Estimation, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if format.csv() {
        let path = dir.join("probes.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        for p in &estimation.probes {
            w.serialize(ProbeRow {
                q: p.q,
                k: p.k,
                rounds: p.rounds,
                time_s: p.time,
                y: p.observation.y,
                z: p.observation.z,
            })?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    if format.json() {
        let path = dir.join("estimation.json");
        serde_json::to_writer_pretty(create(&path)?, estimation)?;
        written.push(path);
    }
    let path = dir.join("constants.json");
    serde_json::to_writer_pretty(create(&path)?, &estimation.constants)?;
    written.push(path);
    Ok(written)
}

#[derive(Serialize)]
struct PlanRow {
    client: usize,
    q: f64,
    k: usize,
}

/// Writes `plan.csv` (columns `client,q,k`) and/or `plan.json`.
pub fn emit_plan(summary: &PlanSummary, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if format.csv() {
        let path = dir.join("plan.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        for (client, (&q, &k)) in summary.plan.q().iter().zip(summary.plan.k()).enumerate() {
            w.serialize(PlanRow { client, q, k })?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    if format.json() {
        let path = dir.join("plan.json");
        serde_json::to_writer_pretty(create(&path)?, summary)?;
        written.push(path);
    }
    Ok(written)
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}
