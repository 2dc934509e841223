//! Run directories and the small text artifacts written into them.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.json";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOG_FILE: &str = "log.txt";

#[derive(Serialize)]
struct RunInfo<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    inputs: &'a [(String, String)],
}

/// A run directory. Everything written here is deterministic given the
/// inputs; wall-clock timings only go to stderr or `timings.json`.
pub struct RunDir {
    pub path: PathBuf,
    log: File,
}

impl RunDir {
    pub fn create(path: &Path, command: &str, cfg: &RunConfig, inputs: &[(String, String)]) -> Result<Self, CliError> {
        fs::create_dir_all(path)?;
        write_json(&path.join(CONFIG_FILE), cfg)?;
        let info = RunInfo {
            tool: "occpose",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: cfg.seed,
            inputs,
        };
        write_json(&path.join(RUN_FILE), &info)?;
        let log = OpenOptions::new().create(true).write(true).truncate(true).open(path.join(LOG_FILE))?;
        Ok(Self { path: path.to_path_buf(), log })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn log(&mut self, line: impl AsRef<str>) -> Result<(), CliError> {
        eprintln!("{}", line.as_ref());
        writeln!(self.log, "{}", line.as_ref())?;
        Ok(())
    }

    pub fn metrics<T: Serialize>(&self, value: &T) -> Result<(), CliError> {
        write_json(&self.join(METRICS_FILE), value)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes rows of `(epoch, term, value)`.
pub fn write_loss_csv(path: &Path, rows: &[(usize, &str, f64)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "term", "value"])?;
    for (epoch, term, value) in rows {
        w.write_record([epoch.to_string(), term.to_string(), format!("{value:e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a loss CSV back into `(epoch, term, value)` rows.
pub fn read_loss_csv(path: &Path) -> Result<Vec<(usize, String, f64)>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = || CliError::Run(occpose::Error::Format(format!("{}: malformed row", path.display())));
        let epoch = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let term = rec.get(1).ok_or_else(bad)?.to_string();
        let value = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        out.push((epoch, term, value));
    }
    Ok(out)
}

pub fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("{what} {} does not exist", path.display())))
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("{what} {} does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_csv(&p, &[(0, "total", 1.25), (1, "total", 0.1 + 0.2)]).unwrap();
        let back = read_loss_csv(&p).unwrap();
        assert_eq!(back[1], (1, "total".to_string(), 0.1 + 0.2));
    }
}
