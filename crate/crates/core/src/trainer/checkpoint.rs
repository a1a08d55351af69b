//! Checkpoint directories: `manifest.json` plus raw little-endian float32
//! parameter (`params.bin`) and momentum (`momentum.bin`) blobs.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::log::EpochRecord;
use super::RunConfig;
use crate::error::{Error, Result};
use crate::model::UNet;
use crate::nn::ParamStore;
use crate::objectives::Stage;

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    stage: Stage,
    epoch: usize,
    best_dsc: Option<f64>,
    config: RunConfig,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorMeta>,
    has_momentum: bool,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_dsc: Option<f64>,
    pub config: RunConfig,
    pub history: Vec<EpochRecord>,
    pub params: ParamStore<f32>,
    pub momentum: Option<Vec<ArrayD<f32>>>,
}

fn write_blob<'a>(path: &Path, tensors: impl Iterator<Item = &'a ArrayD<f32>>) -> Result<()> {
    let mut bytes = Vec::new();
    for t in tensors {
        for v in t.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, metas: &[TensorMeta]) -> Result<Vec<ArrayD<f32>>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let total: usize = metas.iter().map(|m| m.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 4 {
        return Err(Error::Data(format!("{}: {} bytes, expected {}", path.display(), bytes.len(), total * 4)));
    }
    let mut floats = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    Ok(metas
        .iter()
        .map(|m| {
            let n: usize = m.shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            ArrayD::from_shape_vec(IxDyn(&m.shape), data).expect("blob shape")
        })
        .collect())
}

impl Checkpoint {
    pub fn model(&self) -> Result<UNet<f32>> {
        UNet::from_params(self.config.model.clone(), self.params.clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors: Vec<TensorMeta> = self
            .params
            .iter()
            .map(|(_, p)| TensorMeta {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            epoch: self.epoch,
            best_dsc: self.best_dsc,
            config: self.config.clone(),
            history: self.history.clone(),
            tensors,
            has_momentum: self.momentum.is_some(),
        };
        write_blob(&dir.join("params.bin"), self.params.iter().map(|(_, p)| &p.value))?;
        if let Some(m) = &self.momentum {
            write_blob(&dir.join("momentum.bin"), m.iter())?;
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint format {}", manifest.format_version)));
        }
        let values = read_blob(&dir.join("params.bin"), &manifest.tensors)?;
        let mut params = ParamStore::new();
        for (meta, value) in manifest.tensors.iter().zip(values) {
            params.add(meta.name.clone(), value);
        }
        let momentum = if manifest.has_momentum {
            Some(read_blob(&dir.join("momentum.bin"), &manifest.tensors)?)
        } else {
            None
        };
        let ckpt = Self {
            stage: manifest.stage,
            epoch: manifest.epoch,
            best_dsc: manifest.best_dsc,
            config: manifest.config,
            history: manifest.history,
            params,
            momentum,
        };
        // Reject blobs that do not fit the recorded architecture.
        ckpt.model()?;
        Ok(ckpt)
    }
}
