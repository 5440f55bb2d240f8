//! Plain CSV output with full-precision floats.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Write a CSV file, optionally preceded by a `# config_hash=` comment line.
pub fn write_csv(path: &Path, config_hash: Option<&str>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(h) = config_hash {
        writeln!(f, "# config_hash={h}")?;
    }
    let mut w = csv::Writer::from_writer(f);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a CSV written by [`write_csv`], skipping comment lines.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let header = rd.headers()?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for r in rd.records() {
        rows.push(r?.iter().map(str::to_owned).collect());
    }
    Ok((header, rows))
}
