//! Report rows, their CSV rendering and merging.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Column order of every report file.
pub const REPORT_HEADER: [&str; 11] = ["scenario", "check", "metric", "value", "se", "n_samples", "dt", "N", "M", "seed", "pass"];

/// Extra column added by [`report_merge`].
pub const PROVENANCE: &str = "provenance";

/// One metric of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub check: String,
    pub metric: String,
    pub value: f64,
    pub se: f64,
    pub n_samples: usize,
    pub dt: f64,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub pass: bool,
}

/// Renders a float with 17 significant digits, which round-trips exactly.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl ReportRow {
    fn record(&self) -> [String; 11] {
        [
            self.scenario.clone(),
            self.check.clone(),
            self.metric.clone(),
            format_float(self.value),
            format_float(self.se),
            self.n_samples.to_string(),
            format_float(self.dt),
            self.n.to_string(),
            self.m.to_string(),
            self.seed.to_string(),
            self.pass.to_string(),
        ]
    }

    fn parse(rec: &csv::StringRecord) -> Result<Self> {
        let bad = |c: &str| Error::Io(format!("cannot parse report column `{c}` in {rec:?}"));
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(REPORT_HEADER[i]));
        let u = |i: usize| rec[i].parse::<usize>().map_err(|_| bad(REPORT_HEADER[i]));
        Ok(Self {
            scenario: rec[0].to_string(),
            check: rec[1].to_string(),
            metric: rec[2].to_string(),
            value: f(3)?,
            se: f(4)?,
            n_samples: u(5)?,
            dt: f(6)?,
            n: u(7)?,
            m: u(8)?,
            seed: rec[9].parse().map_err(|_| bad("seed"))?,
            pass: rec[10].parse().map_err(|_| bad("pass"))?,
        })
    }

    /// Numeric fields are finite.
    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.se.is_finite() && self.dt.is_finite()
    }
}

/// `<scenario>__<subcommand>__<seed>.csv`
pub fn report_file_name(scenario: &str, subcommand: &str, seed: u64) -> String {
    format!("{scenario}__{subcommand}__{seed}.csv")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn render_report(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.record()).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    std::fs::write(path, render_report(rows)?)?;
    Ok(())
}

pub fn parse_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::SchemaMismatch(format!("unexpected header {header:?}")));
    }
    r.records().map(|rec| ReportRow::parse(&rec.map_err(csv_err)?)).collect()
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    parse_report(&std::fs::read_to_string(path)?)
}

/// Concatenates report files with a provenance column naming the source file
/// (kept when an input was itself merged), ordered stably by
/// `(scenario, check, metric)`. All inputs must share one schema.
pub fn report_merge(files: &[PathBuf]) -> Result<String> {
    let mut schema: Option<csv::StringRecord> = None;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for path in files {
        let text = std::fs::read_to_string(path)?;
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        let merged = header.len() == REPORT_HEADER.len() + 1
            && header.iter().take(REPORT_HEADER.len()).eq(REPORT_HEADER)
            && &header[REPORT_HEADER.len()] == PROVENANCE;
        if !merged && header.iter().ne(REPORT_HEADER) {
            return Err(Error::SchemaMismatch(format!("{}: header {:?}", path.display(), header)));
        }
        match &schema {
            Some(s) if s != &header => {
                return Err(Error::SchemaMismatch(format!("{}: header {:?} differs from {:?}", path.display(), header, s)))
            }
            Some(_) => {}
            None => schema = Some(header.clone()),
        }
        let source = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let mut v: Vec<String> = rec.iter().map(str::to_string).collect();
            if !merged {
                v.push(source.clone());
            }
            rows.push(v);
        }
    }
    rows.sort_by(|a, b| a[..3].cmp(&b[..3]));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = REPORT_HEADER.to_vec();
    header.push(PROVENANCE);
    w.write_record(&header).map_err(csv_err)?;
    for r in &rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}
