//! Deterministic file emission: stable float formatting, RFC-4180 CSV, and
//! atomic writes (temp file + rename) so readers never see partial output.

use std::io::Write;
use std::path::Path;

use fedmir::{Error, Result};

/// Nine significant digits; enough to reconstruct the f64 diffs we care
/// about while keeping reruns byte-identical.
pub fn float(v: f64) -> String {
    format!("{v:.8e}")
}

/// Absent optional metrics serialize as empty cells.
pub fn opt_float(v: Option<f64>) -> String {
    v.map(float).unwrap_or_default()
}

pub fn to_csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(header).map_err(|e| Error::format(e.to_string()))?;
    for row in rows {
        writer.write_record(row).map_err(|e| Error::format(e.to_string()))?;
    }
    writer.into_inner().map_err(|e| Error::format(e.to_string()))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .ok_or_else(|| Error::input("output path needs a parent directory"))?;
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
