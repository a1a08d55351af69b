//! On-disk case format: raw little-endian voxels plus a JSON sidecar.
//!
//! A case `<id>` is `<id>.raw` (float32) + `<id>.json`; its optional label is
//! `<id>_seg.raw` (uint8) + `<id>_seg.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{Case, SegLabel, Volume};
use crate::error::{Error, Result};

pub const LABEL_SUFFIX: &str = "_seg";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Float32,
    Uint8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    #[serde(default)]
    pub origin: [f64; 3],
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_raw(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_len(path: &Path, got: usize, shape: [usize; 3], width: usize) -> Result<()> {
    let want = shape.iter().product::<usize>() * width;
    if got != want {
        return Err(Error::Data(format!(
            "{}: {got} bytes, expected {want} for shape {shape:?}",
            path.display()
        )));
    }
    Ok(())
}

/// Strip `.json` / `.raw` so both spellings name the same case.
fn stem_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(stem: &Path, suffix: &str, ext: &str) -> PathBuf {
    let mut name = stem.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    name.push(".");
    name.push(ext);
    stem.with_file_name(name)
}

pub fn read_volume(stem: &Path) -> Result<Volume> {
    let json = with_suffix(stem, "", "json");
    if !json.exists() {
        return Err(Error::MissingFile(json));
    }
    let meta = read_sidecar(&json)?;
    if meta.dtype != Dtype::Float32 {
        return Err(Error::Data(format!("{}: volume dtype must be float32", json.display())));
    }
    let raw_path = with_suffix(stem, "", "raw");
    let raw = read_raw(&raw_path)?;
    check_len(&raw_path, raw.len(), meta.shape, 4)?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let data = Array3::from_shape_vec(meta.shape, values).map_err(|e| Error::Data(e.to_string()))?;
    Volume::with_origin(data, meta.spacing, meta.origin)
}

pub fn read_label(stem: &Path) -> Result<Option<SegLabel>> {
    let json = with_suffix(stem, LABEL_SUFFIX, "json");
    if !json.exists() {
        return Ok(None);
    }
    let meta = read_sidecar(&json)?;
    if meta.dtype != Dtype::Uint8 {
        return Err(Error::Data(format!("{}: label dtype must be uint8", json.display())));
    }
    let raw_path = with_suffix(stem, LABEL_SUFFIX, "raw");
    let raw = read_raw(&raw_path)?;
    check_len(&raw_path, raw.len(), meta.shape, 1)?;
    let data = Array3::from_shape_vec(meta.shape, raw).map_err(|e| Error::Data(e.to_string()))?;
    let num_classes = match meta.num_classes {
        Some(c) => c,
        None => data.iter().copied().max().unwrap_or(0) as usize + 1,
    }
    .max(2);
    SegLabel::new(data, num_classes).map(Some)
}

/// Load `<path>` (either `<id>.json`, `<id>.raw` or the bare stem) and its
/// sibling label when present. The case id is the file stem.
pub fn load_case(path: &Path) -> Result<Case> {
    let stem = stem_path(path);
    let volume = read_volume(&stem)?;
    let label = read_label(&stem)?;
    let id = stem
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string();
    Case::new(id, volume, label)
}

pub fn write_volume(stem: &Path, volume: &Volume) -> Result<()> {
    let meta = Sidecar {
        shape: volume.extent(),
        spacing: volume.spacing(),
        origin: volume.origin(),
        dtype: Dtype::Float32,
        num_classes: None,
    };
    let mut bytes = Vec::with_capacity(volume.data().len() * 4);
    for v in volume.data().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let raw = with_suffix(stem, "", "raw");
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    write_json(&with_suffix(stem, "", "json"), &meta)
}

/// Write a label map with the given spacing/origin metadata.
pub fn write_label(stem: &Path, label: &SegLabel, spacing: [f64; 3], origin: [f64; 3]) -> Result<()> {
    let meta = Sidecar {
        shape: label.extent(),
        spacing,
        origin,
        dtype: Dtype::Uint8,
        num_classes: Some(label.num_classes()),
    };
    let raw = with_suffix(stem, LABEL_SUFFIX, "raw");
    let bytes: Vec<u8> = label.data().iter().copied().collect();
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    write_json(&with_suffix(stem, LABEL_SUFFIX, "json"), &meta)
}

/// Write `case` into `dir` as `<id>.{raw,json}` (+ label files).
pub fn save_case(dir: &Path, case: &Case) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = dir.join(&case.id);
    write_volume(&stem, case.volume())?;
    if let Some(label) = case.label() {
        write_label(&stem, label, case.volume().spacing(), case.volume().origin())?;
    }
    Ok(with_suffix(&stem, "", "json"))
}

/// Ids of every case in `dir` (volume sidecars, label sidecars excluded), sorted.
pub fn list_cases(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if stem.ends_with(LABEL_SUFFIX) || !with_suffix(&dir.join(stem), "", "raw").exists() {
            continue;
        }
        ids.push(stem.to_string());
    }
    ids.sort();
    Ok(ids)
}

/// Load every case in `dir`.
pub fn load_dir(dir: &Path) -> Result<Vec<Case>> {
    list_cases(dir)?
        .iter()
        .map(|id| load_case(&dir.join(id)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(label: bool) -> Case {
        let data = Array3::from_shape_fn((8, 8, 8), |(z, y, x)| (z * 64 + y * 8 + x) as f32 * 0.37 - 3.0);
        let v = Volume::with_origin(data, [1.0, 1.0, 1.0], [0.5, -2.0, 3.25]).unwrap();
        let l = label.then(|| SegLabel::new(Array3::from_shape_fn((8, 8, 8), |(z, _, _)| (z % 3) as u8), 3).unwrap());
        Case::new("case_000", v, l).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = case(true);
        let json = save_case(dir.path(), &c).unwrap();
        let back = load_case(&json).unwrap();
        assert_eq!(back, c);
        let raw = load_case(&dir.path().join("case_000.raw")).unwrap();
        assert_eq!(raw, c);
        assert_eq!(list_cases(dir.path()).unwrap(), vec!["case_000".to_string()]);
    }

    #[test]
    fn unlabeled_case_loads_without_label() {
        let dir = tempfile::tempdir().unwrap();
        let json = save_case(dir.path(), &case(false)).unwrap();
        let back = load_case(&json).unwrap();
        assert!(!back.is_labeled());
    }

    #[test]
    fn label_shape_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = case(false);
        save_case(dir.path(), &c).unwrap();
        let bad = SegLabel::new(Array3::zeros((8, 8, 4)), 3).unwrap();
        write_label(&dir.path().join("case_000"), &bad, [1.0; 3], [0.0; 3]).unwrap();
        assert!(matches!(load_case(&dir.path().join("case_000")), Err(Error::Shape(_))));
    }

    #[test]
    fn missing_file_and_bad_spacing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_case(&dir.path().join("nope.json")), Err(Error::MissingFile(_))));
        let c = case(false);
        save_case(dir.path(), &c).unwrap();
        let json = dir.path().join("case_000.json");
        let mut meta = read_sidecar(&json).unwrap();
        meta.spacing = [1.0, -1.0, 1.0];
        write_json(&json, &meta).unwrap();
        assert!(matches!(load_case(&json), Err(Error::Data(_))));
    }
}
