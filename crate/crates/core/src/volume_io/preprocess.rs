//! Preprocessing: border crop, downsample to 1.5 mm isotropic, z-score.

use ndarray::{Array3, Array4, Axis};

use super::resample::{resize_nearest_mask, resize_trilinear};
use super::CaseRecord;
use crate::error::{Error, Result};

/// Shape of raw BraTS-convention volumes at 1 mm isotropic resolution.
pub const RAW_SHAPE: (usize, usize, usize) = (240, 240, 155);
/// Shape after crop and downsample, at 1.5 mm isotropic resolution.
pub const PREPROCESSED_SHAPE: (usize, usize, usize) = (128, 128, 96);

const CROP_SHAPE: (usize, usize, usize) = (192, 192, 144);
// Symmetric border crop: 24 voxels per side in-plane; the 11 leftover voxels
// of the third axis are split 5 / 6.
const CROP_OFFSET: (usize, usize, usize) = (24, 24, 5);

/// Crop a raw case to 192x192x144, downsample to 128x128x96 (trilinear for
/// intensities, nearest-neighbour for the mask), then z-score each modality
/// over the whole volume.
pub fn preprocess(case: &CaseRecord) -> Result<CaseRecord> {
    let shape = case.spatial_shape();
    if shape != RAW_SHAPE {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", RAW_SHAPE),
            actual: format!("{:?}", shape),
        });
    }

    let (oh, ow, od) = CROP_OFFSET;
    let (ch, cw, cd) = CROP_SHAPE;
    let cropped_vol = case
        .volume
        .slice(ndarray::s![.., oh..oh + ch, ow..ow + cw, od..od + cd])
        .to_owned();
    let cropped_mask = case
        .wt_mask
        .slice(ndarray::s![oh..oh + ch, ow..ow + cw, od..od + cd])
        .to_owned();

    let mut volume = Array4::zeros((
        4,
        PREPROCESSED_SHAPE.0,
        PREPROCESSED_SHAPE.1,
        PREPROCESSED_SHAPE.2,
    ));
    for m in 0..4 {
        let channel = cropped_vol.index_axis(Axis(0), m).to_owned();
        let resized = resize_trilinear(&channel, PREPROCESSED_SHAPE);
        let normalized = zscore(&resized)?;
        volume.index_axis_mut(Axis(0), m).assign(&normalized);
    }
    let wt_mask = resize_nearest_mask(&cropped_mask, PREPROCESSED_SHAPE);

    Ok(CaseRecord {
        id: case.id.clone(),
        volume,
        label: case.label,
        wt_mask,
        spacing: [1.5, 1.5, 1.5],
    })
}

fn zscore(v: &Array3<f32>) -> Result<Array3<f32>> {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return Err(Error::DegenerateVolume(format!(
            "modality standard deviation {std:.3e} below 1e-8"
        )));
    }
    Ok(v.mapv(|x| ((x as f64 - mean) / std) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::Grade;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha20Rng};

    fn raw_case(fill: impl Fn(usize, usize, usize, usize) -> f32) -> CaseRecord {
        let mut volume = Array4::zeros((4, 240, 240, 155));
        for ((m, h, w, d), v) in volume.indexed_iter_mut() {
            *v = fill(m, h, w, d);
        }
        let mut wt_mask = Array3::zeros((240, 240, 155));
        for h in 100..140 {
            for w in 100..140 {
                for d in 60..90 {
                    wt_mask[[h, w, d]] = 1;
                }
            }
        }
        CaseRecord {
            id: "raw".into(),
            volume,
            label: Grade::HGG,
            wt_mask,
            spacing: [1.0; 3],
        }
    }

    #[test]
    fn output_geometry_is_128x128x96_at_1p5mm() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let noise: Vec<f32> = (0..16).map(|_| rng.random::<f32>()).collect();
        let case = raw_case(|m, h, w, d| {
            (h + w + d) as f32 * 0.01 + noise[(m * 4 + h % 4) % 16] + (d % 7) as f32
        });
        let out = preprocess(&case).unwrap();
        assert_eq!(out.volume.shape(), &[4, 128, 128, 96]);
        assert_eq!(out.wt_mask.shape(), &[128, 128, 96]);
        assert_eq!(out.spacing, [1.5, 1.5, 1.5]);
        assert!(out.wt_mask.iter().any(|&v| v == 1));
    }

    #[test]
    fn modalities_are_zero_mean_unit_std() {
        let case = raw_case(|m, h, w, d| ((h * 31 + w * 17 + d * 7 + m * 5) % 97) as f32);
        let out = preprocess(&case).unwrap();
        for m in 0..4 {
            let ch = out.volume.index_axis(Axis(0), m);
            let n = ch.len() as f64;
            let mean = ch.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = ch.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5, "modality {m} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-5, "modality {m} std {}", var.sqrt());
        }
    }

    #[test]
    fn constant_modality_is_degenerate() {
        let case = raw_case(|_, _, _, _| 2.0);
        assert!(matches!(
            preprocess(&case),
            Err(Error::DegenerateVolume(_))
        ));
    }

    #[test]
    fn already_preprocessed_shape_is_rejected() {
        let case = CaseRecord {
            id: "p".into(),
            volume: Array4::zeros((4, 128, 128, 96)),
            label: Grade::LGG,
            wt_mask: Array3::zeros((128, 128, 96)),
            spacing: [1.5; 3],
        };
        assert!(matches!(preprocess(&case), Err(Error::ShapeMismatch { .. })));
    }
}
