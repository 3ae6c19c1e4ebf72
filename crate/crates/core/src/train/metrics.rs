use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Mode;
use crate::error::{Error, Result};

/// One logging event of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub mode: Mode,
    pub loss_clean: f64,
    pub loss_adv: Vec<f64>,
    pub em: Option<f64>,
    pub f1: Option<f64>,
    pub acc: Option<f64>,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractor_em: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractor_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractor_acc: Option<f64>,
}

/// Append-only JSON-lines sink. Each record goes out in a single `write`
/// call, so several runs may share one file.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let mut line = serde_json::to_vec(value).map_err(|e| Error::json(&self.path, e))?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a metrics file, skipping lines that are not records (such as a header).
pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| serde_json::from_str::<MetricsRecord>(l).ok())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_with_null_metrics() {
        let r = MetricsRecord {
            step: 3,
            epoch: 0,
            mode: Mode::Pqat,
            loss_clean: 1.25,
            loss_adv: vec![1.5, 1.75],
            em: None,
            f1: None,
            acc: None,
            wall_ms: 0,
            distractor_em: None,
            distractor_f1: None,
            distractor_acc: None,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"mode\":\"pqat\"") && s.contains("\"em\":null"));
        assert!(!s.contains("distractor"));
        assert_eq!(serde_json::from_str::<MetricsRecord>(&s).unwrap(), r);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::append(&path).unwrap();
        w.write(&serde_json::json!({"header": {"seed": 1}})).unwrap();
        w.write(&r).unwrap();
        let mut w2 = MetricsWriter::append(&path).unwrap();
        w2.write(&r).unwrap();
        assert_eq!(read_records(&path).unwrap(), vec![r.clone(), r]);
    }
}
