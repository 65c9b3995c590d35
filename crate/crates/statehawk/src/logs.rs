//! NDJSON training logs and process logging setup.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::Serialize;

use crate::{Error, Result};

/// Environment variable holding the log filter (`error` .. `trace`).
pub const LOG_ENV: &str = "STATEHAWK_LOG";

/// Verbosity comes from `STATEHAWK_LOG`, defaulting to `info`.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp_secs()
        .try_init();
}

/// One JSON object per line; safe to share between threads.
pub struct NdjsonLog {
    out: Mutex<Box<dyn Write + Send>>,
}

impl NdjsonLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_writer(BufWriter::new(f)))
    }

    /// Appends, so a resumed run keeps the earlier records.
    pub fn append(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self::from_writer(BufWriter::new(f)))
    }

    pub fn from_writer(w: impl Write + Send + 'static) -> Self {
        Self {
            out: Mutex::new(Box::new(w)),
        }
    }

    pub fn write<T: Serialize>(&self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        let mut out = self.out.lock().unwrap_or_else(|p| p.into_inner());
        writeln!(out, "{line}")
            .and_then(|_| out.flush())
            .map_err(|e| Error::io("<log>", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_object_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.ndjson");
        let log = NdjsonLog::create(&path).unwrap();
        log.write(&serde_json::json!({"epoch": 0, "reward": 0.5})).unwrap();
        log.write(&serde_json::json!({"epoch": 1, "reward": f64::NAN})).unwrap();
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(v["epoch"], 1);
        assert!(v["reward"].is_null());
    }
}
