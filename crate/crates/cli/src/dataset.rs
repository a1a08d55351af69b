//! Dataset directories: case files under `cases/` plus a `manifest.json`
//! naming the labeled-train, labeled-validation and unlabeled splits.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use semiseg_core::volumes::io::{load_case, load_dir, save_case};
use semiseg_core::volumes::synth::generate_synthetic_case;
use semiseg_core::volumes::{Case, Extent};
use semiseg_core::Error;

pub const MANIFEST: &str = "manifest.json";
pub const CASES_DIR: &str = "cases";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub extent: Extent,
    pub num_classes: usize,
    pub teeth_per_case: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub unlabeled: Vec<String>,
    /// True when no case carries a label.
    pub labeled_set_empty: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Unlabeled,
    /// Every case in the directory.
    All,
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub seed: u64,
    pub cases: usize,
    pub labeled_fraction: f64,
    pub extent: Extent,
    pub num_classes: usize,
    pub teeth_per_case: usize,
}

/// Labeled cases split two to one into train and validation.
fn split_counts(cases: usize, labeled_fraction: f64) -> (usize, usize) {
    let labeled = (labeled_fraction * cases as f64).round() as usize;
    let val = (labeled as f64 / 3.0).round() as usize;
    (labeled - val, val)
}

pub fn synthesize(spec: &SynthSpec, out: &Path) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&spec.labeled_fraction) {
        return Err(Error::Config(format!("labeled fraction must be in [0, 1], got {}", spec.labeled_fraction)).into());
    }
    let (n_train, n_val) = split_counts(spec.cases, spec.labeled_fraction);
    let dir = out.join(CASES_DIR);
    let mut manifest = Manifest {
        seed: spec.seed,
        extent: spec.extent,
        num_classes: spec.num_classes,
        teeth_per_case: spec.teeth_per_case,
        train: Vec::new(),
        val: Vec::new(),
        unlabeled: Vec::new(),
        labeled_set_empty: n_train + n_val == 0,
    };
    for i in 0..spec.cases {
        let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let synth = generate_synthetic_case(seed, spec.extent, spec.teeth_per_case, spec.num_classes)?;
        let id = format!("case_{i:04}");
        let case = Case::new(id.clone(), synth.case.volume().clone(), synth.case.label().cloned())?;
        let case = if i < n_train + n_val { case } else { case.unlabeled() };
        save_case(&dir, &case)?;
        match i {
            i if i < n_train => manifest.train.push(id),
            i if i < n_train + n_val => manifest.val.push(id),
            _ => manifest.unlabeled.push(id),
        }
    }
    let path = out.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(manifest)
}

pub fn read_manifest(dataset: &Path) -> Result<Manifest> {
    let path = dataset.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingFile(path).into());
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())).into())
}

fn load_ids(dataset: &Path, ids: &[String]) -> Result<Vec<Case>> {
    let dir = dataset.join(CASES_DIR);
    ids.iter()
        .map(|id| load_case(&dir.join(id)).with_context(|| format!("loading case {id}")))
        .collect()
}

/// The three splits of a dataset directory.
pub struct Splits {
    pub train: Vec<Case>,
    pub val: Vec<Case>,
    pub unlabeled: Vec<Case>,
}

pub fn load_splits(dataset: &Path) -> Result<Splits> {
    let m = read_manifest(dataset)?;
    Ok(Splits {
        train: load_ids(dataset, &m.train)?,
        val: load_ids(dataset, &m.val)?,
        unlabeled: load_ids(dataset, &m.unlabeled)?,
    })
}

/// Cases of one split of a dataset directory, or every case of a plain
/// directory of case files (no manifest; `split` must then be `All`).
pub fn load_cases(path: &Path, split: Split) -> Result<Vec<Case>> {
    if !path.join(MANIFEST).exists() {
        if split != Split::All {
            return Err(Error::Config(format!("{} has no manifest; use --split all", path.display())).into());
        }
        return Ok(load_dir(path)?);
    }
    let m = read_manifest(path)?;
    let ids: Vec<String> = match split {
        Split::Train => m.train,
        Split::Val => m.val,
        Split::Unlabeled => m.unlabeled,
        Split::All => m.train.into_iter().chain(m.val).chain(m.unlabeled).collect(),
    };
    load_ids(path, &ids)
}

/// Directory holding the case files of `path` (dataset or plain directory).
pub fn case_dir(path: &Path) -> PathBuf {
    if path.join(MANIFEST).exists() {
        path.join(CASES_DIR)
    } else {
        path.to_path_buf()
    }
}
