//! CSV output of benchmark results.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub algorithm: String,
    pub nodes: usize,
    pub clients: usize,
    pub read_ratio: f64,
    pub throughput_ops_s: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub manual_aborts: u64,
    pub forced_aborts: u64,
}

pub const HEADER: [&str; 9] = [
    "algorithm",
    "nodes",
    "clients",
    "read_ratio",
    "throughput_ops_s",
    "p50_ms",
    "p99_ms",
    "manual_aborts",
    "forced_aborts",
];

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes a header row and one row per result; the header is written even
/// when there are no rows.
pub fn write_csv<W: io::Write>(out: W, rows: &[ReportRow]) -> Result<(), CsvError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(path: &Path, rows: &[ReportRow]) -> Result<(), CsvError> {
    write_csv(std::fs::File::create(path)?, rows)
}

pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<ReportRow>, CsvError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
