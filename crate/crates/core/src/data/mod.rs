//! Volume ingestion, slice selection, normalization, dataset splits and
//! synthetic augmentation.

mod augment;
mod ingest;
pub mod io;
mod normalize;
pub mod phantom;
mod selection;
mod split;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{build_augmented, Synthesizer};
pub use ingest::{ingest_volumes, IngestOptions};
pub use normalize::{normalize_slice, resize_bilinear, DEFAULT_IMAGE_SIZE};
pub use selection::{select_healthy_slices, select_tumor_slices, tumor_coverage};
pub use split::split_dataset;

/// MRI acquisition sequence. Each sequence owns one input channel of the models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sequence {
    T1,
    T2,
    #[serde(rename = "FLAIR", alias = "Flair")]
    Flair,
}

impl Sequence {
    pub const ALL: [Sequence; 3] = [Sequence::T1, Sequence::T2, Sequence::Flair];

    /// Channel slot of this sequence in a model input tensor.
    pub fn channel(self) -> usize {
        match self {
            Sequence::T1 => 0,
            Sequence::T2 => 1,
            Sequence::Flair => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sequence::T1 => "T1",
            Sequence::T2 => "T2",
            Sequence::Flair => "FLAIR",
        }
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    NoTumor,
    Glioma,
    Meningioma,
    Pituitary,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [
        ClassLabel::NoTumor,
        ClassLabel::Glioma,
        ClassLabel::Meningioma,
        ClassLabel::Pituitary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::NoTumor => "no_tumor",
            ClassLabel::Glioma => "glioma",
            ClassLabel::Meningioma => "meningioma",
            ClassLabel::Pituitary => "pituitary",
        }
    }

    /// Row title used in count tables.
    pub fn title(self) -> &'static str {
        match self {
            ClassLabel::NoTumor => "No tumor",
            ClassLabel::Glioma => "Glioma",
            ClassLabel::Meningioma => "Meningioma",
            ClassLabel::Pituitary => "Pituitary",
        }
    }

    pub fn is_tumor(self) -> bool {
        self != ClassLabel::NoTumor
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One 3-d acquisition, indexed `(x, y, z)` with `z` the axial axis.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub case_id: String,
    pub sequence: Sequence,
    pub voxels: Array3<f32>,
    pub seg: Option<Array3<u32>>,
    pub class_label: ClassLabel,
}

impl VolumeRecord {
    pub fn new(
        case_id: impl Into<String>,
        sequence: Sequence,
        voxels: Array3<f32>,
        seg: Option<Array3<u32>>,
        class_label: ClassLabel,
    ) -> Result<Self> {
        let case_id = case_id.into();
        if voxels.is_empty() {
            return Err(Error::data(format!("case {case_id}: empty volume")));
        }
        if let Some(seg) = &seg {
            if seg.shape() != voxels.shape() {
                return Err(Error::data(format!(
                    "case {case_id}: segmentation shape {:?} differs from voxel shape {:?}",
                    seg.shape(),
                    voxels.shape()
                )));
            }
        }
        if class_label == ClassLabel::Pituitary {
            return Err(Error::data(format!(
                "case {case_id}: volumes carry no_tumor, glioma or meningioma labels"
            )));
        }
        Ok(Self {
            case_id,
            sequence,
            voxels,
            seg,
            class_label,
        })
    }

    pub fn depth(&self) -> usize {
        self.voxels.shape()[2]
    }
}

/// One normalized square 2-d image.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub case_id: String,
    pub sequence: Sequence,
    pub pixels: Array2<f32>,
    pub class_label: ClassLabel,
    pub provenance: Provenance,
    pub slice_index: Option<usize>,
}

impl SliceRecord {
    /// Validates squareness and the `[-1, 1]` range.
    pub fn new(
        case_id: impl Into<String>,
        sequence: Sequence,
        pixels: Array2<f32>,
        class_label: ClassLabel,
        provenance: Provenance,
        slice_index: Option<usize>,
    ) -> Result<Self> {
        let case_id = case_id.into();
        let (h, w) = pixels.dim();
        if h != w || h == 0 {
            return Err(Error::data(format!(
                "case {case_id}: slice must be square and non-empty, got {h}x{w}"
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::data(format!(
                "case {case_id}: pixel value {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            case_id,
            sequence,
            pixels,
            class_label,
            provenance,
            slice_index,
        })
    }

    pub fn size(&self) -> usize {
        self.pixels.nrows()
    }

    /// `(case_id, slice_index)`: records of different sequences sharing it are paired.
    pub fn pair_key(&self) -> (String, Option<usize>) {
        (self.case_id.clone(), self.slice_index)
    }

    /// Stable file stem for containers.
    pub fn stem(&self) -> String {
        let idx = self
            .slice_index
            .map(|z| format!("z{z:03}"))
            .unwrap_or_else(|| "z-".into());
        let prov = match self.provenance {
            Provenance::Real => "real",
            Provenance::Synthetic => "syn",
        };
        format!("{}_{}_{}_{}", self.case_id, self.sequence, idx, prov)
    }
}

/// A named split of slice records with per-class counts.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub records: Vec<SliceRecord>,
    pub per_class_counts: BTreeMap<ClassLabel, usize>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, split: Split, records: Vec<SliceRecord>) -> Self {
        let per_class_counts = class_counts(&records);
        Self {
            name: name.into(),
            split,
            records,
            per_class_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, class: ClassLabel) -> usize {
        self.per_class_counts.get(&class).copied().unwrap_or(0)
    }

    /// Records of one sequence, in manifest order.
    pub fn of_sequence(&self, seq: Sequence) -> impl Iterator<Item = &SliceRecord> {
        self.records.iter().filter(move |r| r.sequence == seq)
    }

    /// Manifest restricted to one sequence.
    pub fn filter_sequence(&self, seq: Sequence) -> DatasetManifest {
        DatasetManifest::new(
            format!("{}-{}", self.name, seq),
            self.split,
            self.of_sequence(seq).cloned().collect(),
        )
    }
}

pub fn class_counts(records: &[SliceRecord]) -> BTreeMap<ClassLabel, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.class_label).or_insert(0) += 1;
    }
    counts
}

/// Per-class train/test counts laid out like a dataset-size table.
pub fn count_table(train: &DatasetManifest, test: &DatasetManifest) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<12}| {:<6}| {:>8}\n", "classes", "subset", train.name));
    out.push_str(&format!("{}\n", "-".repeat(32)));
    for class in ClassLabel::ALL {
        let (tr, te) = (train.count(class), test.count(class));
        if tr == 0 && te == 0 {
            continue;
        }
        out.push_str(&format!("{:<12}| {:<6}| {:>8}\n", class.title(), "Train", tr));
        out.push_str(&format!("{:<12}| {:<6}| {:>8}\n", "", "Test", te));
    }
    out.push_str(&format!("{:<12}| {:<6}| {:>8}\n", "Total", "Train", train.len()));
    out.push_str(&format!("{:<12}| {:<6}| {:>8}\n", "", "Test", test.len()));
    out
}
