//! Delimited text tables with `#` provenance headers.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use ptmap::map::Ensemble;

use crate::CliError;

/// Provenance line written at the top of every table.
pub fn header(config_sha256: &str, seed: Option<u64>, extra: &[(&str, String)]) -> String {
    let seed = seed.map_or_else(|| "none".to_string(), |s| s.to_string());
    let mut line = format!("# ptmap {} config_sha256={config_sha256} seed={seed}", env!("CARGO_PKG_VERSION"));
    for (k, v) in extra {
        let _ = write!(line, " {k}={v}");
    }
    line.push('\n');
    line
}

/// Shortest representation that parses back to the same value.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn table(header: &str, columns: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = String::from(header);
    out.push_str(&columns.join(","));
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<String>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| num(m[(i, j)])).collect()).collect()
}

pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

/// Reads an ensemble: one header row of names, one row per member, `#`
/// lines ignored.
pub fn read_ensemble(path: &Path) -> Result<Ensemble, CliError> {
    let bad = |m: String| CliError::Config(format!("{}: {m}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let names: Vec<String> = reader.headers().map_err(|e| bad(e.to_string()))?.iter().map(str::to_string).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        for field in rec.iter() {
            let v: f64 = field.parse().map_err(|_| bad(format!("row {}: '{field}' is not a number", i + 1)))?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(bad("no data rows".into()));
    }
    let data = DMatrix::from_row_slice(rows, names.len(), &values);
    Ensemble::new(data, names).map_err(|e| bad(e.to_string()))
}
