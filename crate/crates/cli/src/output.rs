//! Trace and result writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// Hard cap on trace rows per file.
pub const TRACE_ROW_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// Writes `rows` as CSV under `header`, keeping every `every`-th row plus the
/// last one and stopping at [`TRACE_ROW_CAP`].
pub fn write_trace<R, F>(path: &Path, header: &[&str], rows: &[R], every: usize, fields: F) -> Result<()>
where
    F: Fn(&R) -> Vec<String>,
{
    let mut w = csv::Writer::from_writer(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ));
    w.write_record(header)?;
    let every = every.max(1);
    let mut written = 0;
    for (i, row) in rows.iter().enumerate() {
        if i % every != 0 && i + 1 != rows.len() {
            continue;
        }
        if written == TRACE_ROW_CAP {
            log::warn!("trace truncated at {TRACE_ROW_CAP} rows; use --trace-every to thin it");
            break;
        }
        w.write_record(fields(row))?;
        written += 1;
    }
    w.flush()?;
    Ok(())
}

/// Shortest decimal that parses back to the same float.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_csv_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ));
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner()?.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub id: String,
    pub values: Vec<f64>,
}

/// Result file of the network-free schedulers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleResult {
    pub solver: String,
    pub converged: bool,
    pub iterations: usize,
    pub cost: f64,
    /// Base load plus charging, per slot.
    pub total_load: Vec<f64>,
    pub profiles: Vec<Profile>,
}

impl ScheduleResult {
    pub fn write(&self, path: &Path, format: Format) -> Result<()> {
        match format {
            Format::Json => write_json(path, self),
            Format::Csv => write_csv_rows(
                path,
                &["id", "t", "value"],
                self.profiles.iter().flat_map(|p| {
                    p.values
                        .iter()
                        .enumerate()
                        .map(|(t, &v)| vec![p.id.clone(), t.to_string(), num(v)])
                        .collect::<Vec<_>>()
                }),
            ),
        }
    }
}
