//! Dataset CSV: header `t,<names...>[,s_1..s_N]`, one row per step, states
//! 1-based.

use std::io::{Read, Write};
use std::path::Path;

use statehawk_core::dataset::Dataset;

use crate::{Error, Result};

fn format_err(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}

/// Reads a dataset; `n_states` defaults to the largest label present (or 2
/// for unlabeled data).
pub fn read_dataset<R: Read>(reader: R, n_states: Option<usize>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("t") {
        return Err(format_err("dataset header must start with `t`"));
    }
    let cols: Vec<&str> = header.iter().skip(1).collect();
    let state_cols = cols.iter().filter(|c| c.starts_with("s_")).count();
    let names: Vec<String> = cols
        .iter()
        .filter(|c| !c.starts_with("s_"))
        .map(|c| c.to_string())
        .collect();
    let n = names.len();
    if state_cols != 0 && state_cols != n {
        return Err(format_err(format!(
            "{state_cols} state columns for {n} variables"
        )));
    }
    if cols[..n].iter().any(|c| c.starts_with("s_")) {
        return Err(format_err("state columns must follow all observation columns"));
    }
    let mut values = Vec::new();
    let mut states = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != cols.len() + 1 {
            return Err(format_err(format!(
                "row {} has {} fields, expected {}",
                row + 1,
                rec.len(),
                cols.len() + 1
            )));
        }
        for k in 0..n {
            let v: f64 = rec[k + 1].parse().map_err(|_| {
                format_err(format!("row {}: `{}` is not a number", row + 1, &rec[k + 1]))
            })?;
            values.push(v);
        }
        for k in 0..state_cols {
            let s: usize = rec[n + 1 + k].parse().map_err(|_| {
                format_err(format!("row {}: `{}` is not a state", row + 1, &rec[n + 1 + k]))
            })?;
            if s == 0 {
                return Err(format_err(format!("row {}: states are 1-based", row + 1)));
            }
            states.push(s - 1);
        }
    }
    let m = n_states.unwrap_or_else(|| states.iter().max().map_or(2, |s| (s + 1).max(2)));
    let states = (state_cols > 0).then_some(states);
    Ok(Dataset::new(names, m, values, states)?)
}

pub fn write_dataset<W: Write>(writer: W, d: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let n = d.n_vars();
    let mut header = vec!["t".to_string()];
    header.extend(d.names().iter().cloned());
    if d.has_states() {
        header.extend((1..=n).map(|i| format!("s_{i}")));
    }
    w.write_record(&header)?;
    for t in 0..d.len() {
        let mut rec = vec![t.to_string()];
        rec.extend(d.row(t).iter().map(|v| format!("{v:?}")));
        for i in 0..n {
            if let Some(s) = d.state(t, i) {
                rec.push((s + 1).to_string());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<dataset>", e))
}

pub fn load_dataset(path: &Path, n_states: Option<usize>) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(std::io::BufReader::new(f), n_states)
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(std::io::BufWriter::new(f), d)
}
