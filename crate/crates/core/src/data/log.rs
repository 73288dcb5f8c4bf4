use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Raw records in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Drops records strictly older than `min`.
    pub fn since(mut self, min: i64) -> Self {
        self.records.retain(|r| r.timestamp >= min);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    /// `user<TAB>item<TAB>timestamp`, no header.
    Tsv,
    /// Header row naming `user_id`, `item_id`, `timestamp` (or `user`,
    /// `item`, `time`), in any column order.
    Csv,
}

impl LogFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("tsv") | Some("txt") | Some("inter") => Ok(LogFormat::Tsv),
            Some("csv") => Ok(LogFormat::Csv),
            _ => bail!(Config, "cannot infer log format of {}", path.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestOptions {
    /// Keep going past malformed lines instead of aborting.
    pub skip_bad: bool,
    pub min_timestamp: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BadLine {
    pub line: usize,
    pub message: String,
}

/// Parsed log plus every malformed line encountered.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub log: InteractionLog,
    pub bad_lines: Vec<BadLine>,
}

pub fn ingest(path: &Path, format: LogFormat, options: IngestOptions) -> Result<IngestReport> {
    let file = File::open(path)?;
    ingest_reader(BufReader::new(file), format, options)
}

pub fn ingest_reader<R: Read>(reader: R, format: LogFormat, options: IngestOptions) -> Result<IngestReport> {
    let mut report = match format {
        LogFormat::Tsv => parse_tsv(BufReader::new(reader))?,
        LogFormat::Csv => parse_csv(reader)?,
    };
    if !report.bad_lines.is_empty() && !options.skip_bad {
        let first = &report.bad_lines[0];
        return Err(Error::Parse {
            line: first.line,
            message: format!("{} ({} malformed line(s) in total)", first.message, report.bad_lines.len()),
        });
    }
    if let Some(min) = options.min_timestamp {
        report.log = std::mem::take(&mut report.log).since(min);
    }
    if report.log.is_empty() {
        bail!(Data, "interaction log is empty");
    }
    Ok(report)
}

fn parse_timestamp(field: &str) -> std::result::Result<i64, String> {
    field.trim().parse::<i64>().map_err(|_| format!("timestamp {:?} is not an integer", field.trim()))
}

fn parse_tsv<R: BufRead>(reader: R) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let number = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            report.bad_lines.push(BadLine { line: number, message: format!("expected 3 tab-separated fields, found {}", fields.len()) });
            continue;
        }
        match parse_timestamp(fields[2]) {
            Ok(timestamp) => report.log.records.push(Interaction {
                user: fields[0].trim().to_string(),
                item: fields[1].trim().to_string(),
                timestamp,
            }),
            Err(message) => report.bad_lines.push(BadLine { line: number, message }),
        }
    }
    Ok(report)
}

fn column(headers: &csv::StringRecord, names: &[&str]) -> Result<usize> {
    headers
        .iter()
        .position(|h| names.contains(&h.trim().to_ascii_lowercase().as_str()))
        .ok_or_else(|| Error::Parse { line: 1, message: format!("header lacks a {} column", names[0]) })
}

fn parse_csv<R: Read>(reader: R) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    let (u, it, ts) = (
        column(&headers, &["user_id", "user"])?,
        column(&headers, &["item_id", "item"])?,
        column(&headers, &["timestamp", "time"])?,
    );
    let mut report = IngestReport::default();
    for (i, record) in rdr.records().enumerate() {
        let number = i + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                report.bad_lines.push(BadLine { line: number, message: e.to_string() });
                continue;
            }
        };
        let (Some(user), Some(item), Some(stamp)) = (record.get(u), record.get(it), record.get(ts)) else {
            report.bad_lines.push(BadLine { line: number, message: format!("expected {} fields, found {}", headers.len(), record.len()) });
            continue;
        };
        match parse_timestamp(stamp) {
            Ok(timestamp) => report.log.records.push(Interaction { user: user.trim().into(), item: item.trim().into(), timestamp }),
            Err(message) => report.bad_lines.push(BadLine { line: number, message }),
        }
    }
    Ok(report)
}
