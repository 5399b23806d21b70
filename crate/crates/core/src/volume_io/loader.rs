//! Case loading: BraTS-convention NIfTI directories and the raw fallback
//! format (one little-endian f32 binary per modality plus a JSON sidecar).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::nifti::read_nifti;
use super::synthetic::generate_case;
use super::{CaseRecord, CaseSource, DatasetManifest, Grade, MODALITIES};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct RawSidecar {
    shape: [usize; 3],
    spacing: [f32; 3],
    label: Grade,
}

/// Load one case from `<root>/<case_id>/`.
///
/// NIfTI layout: `<id>_{t1,t1ce,t2,flair,seg}.nii.gz` (or `.nii`). All
/// segmentation labels are collapsed to a single whole-tumor mask. The grade
/// is read from an optional `<id>.json` sidecar and defaults to HGG when
/// absent (manifest labels override it in every dataset flow).
///
/// Raw fallback layout: `<id>_{t1,t1ce,t2,flair,seg}.f32` plus `<id>.json`.
pub fn load_case(root_dir: &Path, case_id: &str) -> Result<CaseRecord> {
    let dir = root_dir.join(case_id);
    if nifti_path(&dir, case_id, "t1").is_some()
        || nifti_path(&dir, case_id, "seg").is_some()
    {
        load_nifti_case(&dir, case_id)
    } else if dir.join(format!("{case_id}_t1.f32")).exists() {
        load_raw_case(&dir, case_id)
    } else {
        Err(Error::MissingModality {
            case: case_id.into(),
            file: format!("{case_id}_t1.nii.gz (or {case_id}_t1.f32)"),
        })
    }
}

fn nifti_path(dir: &Path, case_id: &str, suffix: &str) -> Option<std::path::PathBuf> {
    for ext in ["nii.gz", "nii"] {
        let p = dir.join(format!("{case_id}_{suffix}.{ext}"));
        if p.exists() {
            return Some(p);
        }
    }
    None
}

fn load_nifti_case(dir: &Path, case_id: &str) -> Result<CaseRecord> {
    let mut channels: Vec<Array3<f32>> = Vec::with_capacity(4);
    let mut spacing = [1.0f32; 3];
    for (i, modality) in MODALITIES.iter().enumerate() {
        let path = nifti_path(dir, case_id, modality).ok_or_else(|| Error::MissingModality {
            case: case_id.into(),
            file: format!("{case_id}_{modality}.nii.gz"),
        })?;
        let (data, sp) = read_nifti(&path)?;
        if i == 0 {
            spacing = sp;
        } else if data.dim() != channels[0].dim() {
            return Err(Error::ShapeInconsistency {
                case: case_id.into(),
                details: format!(
                    "{modality} has shape {:?}, t1 has {:?}",
                    data.dim(),
                    channels[0].dim()
                ),
            });
        }
        channels.push(data);
    }

    let seg_path = nifti_path(dir, case_id, "seg").ok_or_else(|| Error::MissingModality {
        case: case_id.into(),
        file: format!("{case_id}_seg.nii.gz"),
    })?;
    let (seg, _) = read_nifti(&seg_path)?;
    if seg.dim() != channels[0].dim() {
        return Err(Error::ShapeInconsistency {
            case: case_id.into(),
            details: format!("seg has shape {:?}, t1 has {:?}", seg.dim(), channels[0].dim()),
        });
    }
    // Unify all sub-region labels into the whole-tumor mask.
    let wt_mask = seg.mapv(|v| u8::from(v > 0.0));

    let label = read_label_sidecar(dir, case_id).unwrap_or(Grade::HGG);
    Ok(assemble(case_id, channels, wt_mask, spacing, label))
}

fn read_label_sidecar(dir: &Path, case_id: &str) -> Option<Grade> {
    let path = dir.join(format!("{case_id}.json"));
    let text = std::fs::read_to_string(path).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    serde_json::from_value(value.get("label")?.clone()).ok()
}

fn load_raw_case(dir: &Path, case_id: &str) -> Result<CaseRecord> {
    let sidecar_path = dir.join(format!("{case_id}.json"));
    let sidecar: RawSidecar = serde_json::from_reader(BufReader::new(
        File::open(&sidecar_path).map_err(|_| Error::MissingModality {
            case: case_id.into(),
            file: format!("{case_id}.json"),
        })?,
    ))?;
    let n_vox = sidecar.shape.iter().product::<usize>();

    let read_volume = |suffix: &str| -> Result<Vec<f32>> {
        let path = dir.join(format!("{case_id}_{suffix}.f32"));
        let mut bytes = Vec::new();
        File::open(&path)
            .map_err(|_| Error::MissingModality {
                case: case_id.into(),
                file: format!("{case_id}_{suffix}.f32"),
            })?
            .read_to_end(&mut bytes)?;
        if bytes.len() != n_vox * 4 {
            return Err(Error::ShapeInconsistency {
                case: case_id.into(),
                details: format!(
                    "{suffix} holds {} values, sidecar shape implies {}",
                    bytes.len() / 4,
                    n_vox
                ),
            });
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    let shape = (sidecar.shape[0], sidecar.shape[1], sidecar.shape[2]);
    let mut channels = Vec::with_capacity(4);
    for modality in MODALITIES {
        let values = read_volume(modality)?;
        channels.push(Array3::from_shape_vec(shape, values).expect("length checked"));
    }
    let seg = read_volume("seg")?;
    let wt_mask =
        Array3::from_shape_vec(shape, seg.into_iter().map(|v| u8::from(v > 0.0)).collect())
            .expect("length checked");

    Ok(assemble(case_id, channels, wt_mask, sidecar.spacing, sidecar.label))
}

fn assemble(
    case_id: &str,
    channels: Vec<Array3<f32>>,
    wt_mask: Array3<u8>,
    spacing: [f32; 3],
    label: Grade,
) -> CaseRecord {
    let (h, w, d) = channels[0].dim();
    let mut volume = Array4::zeros((4, h, w, d));
    for (m, ch) in channels.into_iter().enumerate() {
        volume.index_axis_mut(Axis(0), m).assign(&ch);
    }
    CaseRecord {
        id: case_id.to_string(),
        volume,
        label,
        wt_mask,
        spacing,
    }
}

/// Write a case in the raw fallback format under `<dir>/<id>/`.
pub fn write_raw_case(dir: &Path, case: &CaseRecord) -> Result<()> {
    let case_dir = dir.join(&case.id);
    std::fs::create_dir_all(&case_dir)?;
    let (h, w, d) = case.spatial_shape();
    let sidecar = RawSidecar {
        shape: [h, w, d],
        spacing: case.spacing,
        label: case.label,
    };
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(case_dir.join(format!("{}.json", case.id)))?),
        &sidecar,
    )?;
    for (m, modality) in MODALITIES.iter().enumerate() {
        let mut file =
            BufWriter::new(File::create(case_dir.join(format!("{}_{modality}.f32", case.id)))?);
        for &v in case.volume.index_axis(Axis(0), m).iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    let mut seg = BufWriter::new(File::create(case_dir.join(format!("{}_seg.f32", case.id)))?);
    for &v in case.wt_mask.iter() {
        seg.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Materialize every case of a manifest, generating synthetic volumes and
/// loading path-backed ones relative to `base_dir`.
pub fn load_from_manifest(manifest: &DatasetManifest, base_dir: &Path) -> Result<Vec<CaseRecord>> {
    manifest
        .cases
        .iter()
        .map(|desc| {
            let mut case = match &desc.source {
                CaseSource::Seed { seed } => generate_case(&desc.id, *seed, desc.label),
                CaseSource::Path { path } => {
                    let full = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                    let root = full.parent().unwrap_or(&full);
                    load_case(root, &desc.id)?
                }
            };
            case.label = desc.label;
            case.validate()?;
            Ok(case)
        })
        .collect()
}
