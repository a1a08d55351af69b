//! Per-iteration JSON-lines training log and per-epoch summaries.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::Stage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Labeled,
    Unlabeled,
    /// Stage-1 batch drawn from every case.
    Any,
}

/// One optimizer iteration. Loss terms absent from the batch are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iter: usize,
    pub stage: Stage,
    pub batch: BatchKind,
    #[serde(rename = "L_S")]
    pub l_s: Option<f64>,
    #[serde(rename = "L_CR")]
    pub l_cr: Option<f64>,
    #[serde(rename = "L_PL")]
    pub l_pl: Option<f64>,
    #[serde(rename = "L_DAE")]
    pub l_dae: Option<f64>,
    /// Voxels kept by the confidence threshold (pseudo-label batches).
    pub pseudo_kept: Option<usize>,
    pub total: f64,
    #[serde(rename = "omega_CR")]
    pub omega_cr: f64,
    pub lr: f64,
    pub unlabeled_fraction: f64,
    pub grad_norm: f64,
    /// False when the batch carried no gradient signal and no update was made.
    pub stepped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub labeled_batches: usize,
    pub unlabeled_batches: usize,
    pub val_dsc: Option<f64>,
    pub val_average_score: Option<f64>,
    pub seconds: f64,
}

/// Sink for iteration records: optional JSON-lines file plus in-memory copy.
#[derive(Debug, Default)]
pub struct TrainingLog {
    path: Option<PathBuf>,
    file: Option<BufWriter<File>>,
    pub records: Vec<IterationRecord>,
}

impl TrainingLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            file: Some(BufWriter::new(file)),
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, record: IterationRecord) -> Result<()> {
        if let (Some(f), Some(path)) = (self.file.as_mut(), self.path.as_ref()) {
            let line = serde_json::to_string(&record).map_err(|e| Error::json(path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let (Some(f), Some(path)) = (self.file.as_mut(), self.path.as_ref()) {
            f.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Read a JSON-lines log back.
pub fn read_log(path: &Path) -> Result<Vec<IterationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}
