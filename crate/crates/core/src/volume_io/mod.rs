//! Volume ingestion, preprocessing, augmentation, synthetic data, and folds.
//!
//! Volumes follow the BraTS convention: four co-registered modalities
//! (T1, T1CE, T2, FLAIR) per subject plus a segmentation whose sub-region
//! labels are collapsed into a single whole-tumor mask.

mod augment;
mod folds;
mod loader;
mod nifti;
mod preprocess;
pub mod resample;
mod synthetic;

pub use augment::{augment, mirror_axis, AugmentationConfig, TransformProb};
pub use folds::{make_folds, FoldSplit};
pub use loader::{load_case, load_from_manifest, write_raw_case};
pub use nifti::{read_nifti, write_nifti_mask, write_nifti_volume};
pub use preprocess::{preprocess, PREPROCESSED_SHAPE, RAW_SHAPE};
pub use synthetic::{generate_case, synthesize_dataset};

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Modality order inside every volume tensor.
pub const MODALITIES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

/// Diagnostic class of a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grade {
    HGG,
    LGG,
}

impl Grade {
    pub const ALL: [Grade; 2] = [Grade::HGG, Grade::LGG];

    /// Class index used by the classifier head (HGG = 0, LGG = 1).
    pub fn index(self) -> usize {
        match self {
            Grade::HGG => 0,
            Grade::LGG => 1,
        }
    }

    pub fn from_index(i: usize) -> Grade {
        if i == 0 {
            Grade::HGG
        } else {
            Grade::LGG
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Grade::HGG => "HGG",
            Grade::LGG => "LGG",
        }
    }
}

/// One subject: 4-modality volume, grade label, whole-tumor mask.
///
/// `volume` has shape `[4, H, W, D]` with the modality order of
/// [`MODALITIES`]; `wt_mask` has shape `[H, W, D]` with values in `{0, 1}`.
#[derive(Debug, Clone)]
pub struct CaseRecord {
    pub id: String,
    pub volume: Array4<f32>,
    pub label: Grade,
    pub wt_mask: Array3<u8>,
    /// Millimetres per voxel along each spatial axis.
    pub spacing: [f32; 3],
}

impl CaseRecord {
    /// Check the type invariants: matching spatial shapes, binary mask,
    /// strictly positive spacing.
    pub fn validate(&self) -> Result<()> {
        let v = self.volume.shape();
        let m = self.wt_mask.shape();
        if v[0] != 4 {
            return Err(Error::ShapeMismatch {
                expected: "4 modalities".into(),
                actual: format!("{} modalities", v[0]),
            });
        }
        if v[1..] != m[..] {
            return Err(Error::ShapeInconsistency {
                case: self.id.clone(),
                details: format!("volume spatial {:?} vs mask {:?}", &v[1..], m),
            });
        }
        if self.wt_mask.iter().any(|&x| x > 1) {
            return Err(Error::Input(format!(
                "case {}: wt_mask contains values outside {{0,1}}",
                self.id
            )));
        }
        if self.spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::Input(format!(
                "case {}: non-positive spacing {:?}",
                self.id, self.spacing
            )));
        }
        Ok(())
    }

    /// Spatial shape `(H, W, D)` shared by volume and mask.
    pub fn spatial_shape(&self) -> (usize, usize, usize) {
        let s = self.wt_mask.shape();
        (s[0], s[1], s[2])
    }
}

/// Where a case's voxel data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CaseSource {
    /// Load from disk (BraTS NIfTI layout or the raw fallback format).
    Path { path: PathBuf },
    /// Generate procedurally from this seed.
    Seed { seed: u64 },
}

/// One entry of a dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseDescriptor {
    pub id: String,
    #[serde(flatten)]
    pub source: CaseSource,
    pub label: Grade,
}

/// Dataset description: case descriptors plus per-class counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cases: Vec<CaseDescriptor>,
    pub class_counts: BTreeMap<Grade, usize>,
}

impl DatasetManifest {
    pub fn from_cases(cases: Vec<CaseDescriptor>) -> DatasetManifest {
        let mut class_counts = BTreeMap::new();
        for c in &cases {
            *class_counts.entry(c.label).or_insert(0) += 1;
        }
        DatasetManifest { cases, class_counts }
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn count(&self, grade: Grade) -> usize {
        self.class_counts.get(&grade).copied().unwrap_or(0)
    }

    /// Check that class counts match the case list and that every class
    /// present has at least one case.
    pub fn validate(&self) -> Result<()> {
        let recomputed = DatasetManifest::from_cases(self.cases.clone()).class_counts;
        if recomputed != self.class_counts {
            return Err(Error::Config(format!(
                "manifest class_counts {:?} inconsistent with case list {:?}",
                self.class_counts, recomputed
            )));
        }
        for (grade, n) in &self.class_counts {
            if *n == 0 {
                return Err(Error::Config(format!("class {} has zero cases", grade.name())));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<DatasetManifest> {
        let file = std::fs::File::open(path)?;
        let manifest: DatasetManifest = serde_json::from_reader(std::io::BufReader::new(file))?;
        manifest.validate()?;
        Ok(manifest)
    }
}
