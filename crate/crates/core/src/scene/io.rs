//! JSON-lines dataset files, one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{ScenarioRecord, SCHEMA_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum DatasetIoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    SchemaVersion { line: usize, found: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub fn save_dataset(path: &Path, records: &[ScenarioRecord]) -> Result<(), DatasetIoError> {
    let io = |source| DatasetIoError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialise");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_dataset(path: &Path) -> Result<Vec<ScenarioRecord>, DatasetIoError> {
    let io = |source| DatasetIoError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| DatasetIoError::Parse { line: n, message: e.to_string() })?;
        match value.get("schema_version") {
            Some(v) if v.as_u64() == Some(SCHEMA_VERSION as u64) => {}
            Some(v) => return Err(DatasetIoError::SchemaVersion { line: n, found: v.to_string() }),
            None => return Err(DatasetIoError::Parse { line: n, message: "missing field `schema_version`".into() }),
        }
        let rec: ScenarioRecord =
            serde_json::from_value(value).map_err(|e| DatasetIoError::Parse { line: n, message: e.to_string() })?;
        rec.validate().map_err(|e| DatasetIoError::Parse { line: n, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, GenConfig};

    fn dataset() -> Vec<ScenarioRecord> {
        generate_dataset(&GenConfig { n_records: 8, seed: 5, ..GenConfig::default() }).unwrap().0
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let recs = dataset();
        save_dataset(&p, &recs).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), recs);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_dataset(&p).unwrap().is_empty());
    }

    #[test]
    fn errors_name_line_field_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let recs = dataset();
        let good = serde_json::to_string(&recs[0]).unwrap();

        std::fs::write(&p, format!("{good}\n{}\n", &good[..good.len() / 2])).unwrap();
        let err = load_dataset(&p).unwrap_err().to_string();
        assert!(err.starts_with("line 2:"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
        v.as_object_mut().unwrap().remove("speed_limit");
        std::fs::write(&p, format!("{v}\n")).unwrap();
        let err = load_dataset(&p).unwrap_err().to_string();
        assert!(err.contains("speed_limit"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
        v["schema_version"] = 99.into();
        std::fs::write(&p, format!("{v}\n")).unwrap();
        assert!(matches!(load_dataset(&p), Err(DatasetIoError::SchemaVersion { line: 1, .. })));
    }
}
