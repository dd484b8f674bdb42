//! Metric rows, appended atomically: the whole file is rewritten to a temporary
//! sibling and renamed over the original.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const COLUMNS: [&str; 7] = ["id", "method", "psnr", "ssim", "cons_l1", "wall_ms", "seed"];

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Row {
    pub id: String,
    pub method: String,
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub cons_l1: Option<f64>,
    pub wall_ms: Option<f64>,
    pub seed: Option<u64>,
}

pub fn append_row(path: &Path, row: &Row) -> CliResult<()> {
    let existing = match fs::read(path) {
        Ok(bytes) => bytes,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(CliError::io(path, e)),
    };
    if !existing.is_empty() {
        let mut rdr = csv::Reader::from_reader(existing.as_slice());
        let headers = rdr.headers().map_err(|e| CliError::io(path, e))?;
        if headers.iter().ne(COLUMNS) {
            return Err(CliError::io(path, format!("unexpected CSV header {headers:?}")));
        }
    }

    let mut wtr = csv::WriterBuilder::new()
        .has_headers(existing.is_empty())
        .from_writer(Vec::new());
    wtr.serialize(row).map_err(|e| CliError::io(path, e))?;
    let fresh = wtr.into_inner().map_err(|e| CliError::io(path, e))?;

    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(path, e))?;
    tmp.write_all(&existing).map_err(|e| CliError::io(path, e))?;
    if !existing.is_empty() && !existing.ends_with(b"\n") {
        tmp.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    tmp.write_all(&fresh).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
pub fn read_rows(path: &Path) -> CliResult<Vec<Row>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| CliError::io(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str) -> Row {
        Row {
            id: id.into(),
            method: "ddnm".into(),
            psnr: 30.5,
            ssim: Some(0.9),
            cons_l1: None,
            wall_ms: Some(12.0),
            seed: Some(3),
        }
    }

    #[test]
    fn header_once_then_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        append_row(&p, &row("a")).unwrap();
        append_row(&p, &row("b,with \"quotes\"")).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), COLUMNS.join(","));
        assert_eq!(text.lines().count(), 3);
        let rows = read_rows(&p).unwrap();
        assert_eq!(rows, vec![row("a"), row("b,with \"quotes\"")]);
    }

    #[test]
    fn bad_directory_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing").join("m.csv");
        assert!(append_row(&p, &row("a")).is_err());
        assert!(!p.exists());
    }

    #[test]
    fn foreign_csv_is_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "x,y\n1,2\n").unwrap();
        assert!(append_row(&p, &row("a")).is_err());
        assert_eq!(fs::read_to_string(&p).unwrap(), "x,y\n1,2\n");
    }
}
