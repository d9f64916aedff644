//! Metrics log: one CSV row per dev evaluation.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use mmt_core::train::MetricsRow;

use crate::error::{Error, IoContext, Result};

/// `dev_ambiguous` is empty when the dev split has no slot annotations.
pub const HEADER: [&str; 5] = ["step", "train_loss", "dev_loss", "dev_bleu", "dev_ambiguous"];

pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

impl MetricsLog {
    /// Starts a new log, replacing any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).at(path)?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(HEADER).map_err(|e| csv_err(path, e))?;
        writer.flush().at(path)?;
        Ok(Self { path: path.to_path_buf(), writer })
    }

    /// Reopens a log for appending after dropping rows past `step`.
    pub fn resume(path: &Path, step: usize) -> Result<Self> {
        let kept: Vec<_> = read(path)?.into_iter().filter(|r| r.step <= step).collect();
        let mut log = Self::create(path)?;
        for r in &kept {
            log.append(r)?;
        }
        let file = OpenOptions::new().append(true).open(path).at(path)?;
        log.writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        Ok(log)
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        let fields = [
            row.step.to_string(),
            row.train_loss.to_string(),
            row.dev_loss.to_string(),
            row.dev_bleu.to_string(),
            row.dev_ambiguous.map_or(String::new(), |a| a.to_string()),
        ];
        self.writer.write_record(&fields).map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().at(&self.path)
    }
}

/// Parses a metrics log written by [`MetricsLog`].
pub fn read(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(HEADER) {
        return Err(Error::format(path, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| Error::format(path, format!("bad number '{}'", &rec[i])));
        let step = rec[0].parse().map_err(|_| Error::format(path, format!("bad step '{}'", &rec[0])))?;
        let dev_ambiguous = if rec[4].is_empty() { None } else { Some(f(4)?) };
        rows.push(MetricsRow { step, train_loss: f(1)?, dev_loss: f(2)?, dev_bleu: f(3)?, dev_ambiguous });
    }
    Ok(rows)
}
