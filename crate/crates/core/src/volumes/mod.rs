//! Volumes, label maps, cases and patches; IO, preprocessing, sampling and
//! synthetic data.
//!
//! Every grid is stored `(depth, height, width)`.

pub mod io;
pub mod preprocess;
pub mod sampling;
pub mod synth;

use ndarray::Array3;

use crate::error::{Error, Result};

pub type Extent = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        Self::with_origin(data, spacing, [0.0; 3])
    }

    pub fn with_origin(data: Array3<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if data.shape().contains(&0) {
            return Err(Error::Data(format!("volume extents must be >= 1, got {:?}", data.shape())));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("volume contains non-finite intensities".into()));
        }
        Ok(Self { data, spacing, origin })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn extent(&self) -> Extent {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegLabel {
    data: Array3<u8>,
    num_classes: usize,
}

impl SegLabel {
    pub fn new(data: Array3<u8>, num_classes: usize) -> Result<Self> {
        if !(2..=256).contains(&num_classes) {
            return Err(Error::Data(format!("num_classes must be in [2, 256], got {num_classes}")));
        }
        if let Some(bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::Data(format!("label index {bad} outside [0, {num_classes})")));
        }
        Ok(Self { data, num_classes })
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn extent(&self) -> Extent {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0).count()
    }
}

/// A training or evaluation case. Labeled cases form the labeled set, the
/// rest the unlabeled set.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    volume: Volume,
    label: Option<SegLabel>,
}

impl Case {
    pub fn new(id: impl Into<String>, volume: Volume, label: Option<SegLabel>) -> Result<Self> {
        if let Some(l) = &label {
            if l.extent() != volume.extent() {
                return Err(Error::Shape(format!(
                    "label extent {:?} differs from volume extent {:?}",
                    l.extent(),
                    volume.extent()
                )));
            }
        }
        Ok(Self {
            id: id.into(),
            volume,
            label,
        })
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn label(&self) -> Option<&SegLabel> {
        self.label.as_ref()
    }

    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }

    /// Drop the label, moving the case into the unlabeled set.
    pub fn unlabeled(mut self) -> Self {
        self.label = None;
        self
    }

    pub fn with_volume(mut self, volume: Volume) -> Result<Self> {
        if let Some(l) = &self.label {
            if l.extent() != volume.extent() {
                return Err(Error::Shape("replacement volume extent differs from label".into()));
            }
        }
        self.volume = volume;
        Ok(self)
    }
}

/// Fixed-size crop used for training. Regions outside the source volume are
/// zero (background for labels).
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub data: Array3<f32>,
    pub label: Option<Array3<u8>>,
    /// Crop origin in source voxel coordinates (may be negative).
    pub source_offset: [isize; 3],
    /// Zero-padded voxels `(before, after)` per axis.
    pub padding: [(usize, usize); 3],
}

impl Patch {
    pub fn extent(&self) -> Extent {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }
}

/// Read access to a case collection. Stage-1 training only ever calls
/// [`CaseSource::volume`].
pub trait CaseSource {
    fn num_cases(&self) -> usize;
    fn volume(&self, index: usize) -> &Volume;
    fn label(&self, index: usize) -> Option<&SegLabel>;
    fn case_id(&self, index: usize) -> &str;
}

impl CaseSource for [Case] {
    fn num_cases(&self) -> usize {
        self.len()
    }

    fn volume(&self, index: usize) -> &Volume {
        self[index].volume()
    }

    fn label(&self, index: usize) -> Option<&SegLabel> {
        self[index].label()
    }

    fn case_id(&self, index: usize) -> &str {
        &self[index].id
    }
}

impl CaseSource for Vec<Case> {
    fn num_cases(&self) -> usize {
        self.len()
    }

    fn volume(&self, index: usize) -> &Volume {
        self[index].volume()
    }

    fn label(&self, index: usize) -> Option<&SegLabel> {
        self[index].label()
    }

    fn case_id(&self, index: usize) -> &str {
        &self[index].id
    }
}
