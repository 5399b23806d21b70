//! Procedural desk-scale dataset: 4-modality volumes with one ellipsoidal
//! lesion whose internal texture heterogeneity carries the class signal.
//!
//! Lesion size and mean contrast are drawn from the same distributions for
//! both classes, so a classifier cannot shortcut via mask volume or
//! brightness; only the texture statistic separates HGG from LGG.

use ndarray::{Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::resample::resize_trilinear;
use super::{CaseDescriptor, CaseRecord, CaseSource, DatasetManifest, Grade, preprocess::PREPROCESSED_SHAPE};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

// Texture amplitude inside the lesion, per class.
const TEXTURE_SIGMA_HGG: f64 = 0.45;
const TEXTURE_SIGMA_LGG: f64 = 0.04;
// Spatial scale of the heterogeneity field in voxels.
const TEXTURE_SCALE: usize = 4;

const LESION_SEMI_AXES_INPLANE: (f64, f64) = (12.0, 22.0);
const LESION_SEMI_AXES_DEPTH: (f64, f64) = (9.0, 16.0);
const LESION_CONTRAST: (f64, f64) = (0.25, 0.45);

const BRAIN_SEMI_AXES: [f64; 3] = [52.0, 52.0, 38.0];

/// Build a manifest of `n_cases` synthetic cases with an HGG fraction of
/// `class_ratio`. Case volumes are generated lazily from per-case seeds.
pub fn synthesize_dataset(n_cases: usize, class_ratio: f64, seed: u64) -> Result<DatasetManifest> {
    if n_cases < 2 {
        return Err(Error::Config(format!("need at least 2 cases, got {n_cases}")));
    }
    if !(class_ratio > 0.0 && class_ratio < 1.0) {
        return Err(Error::Config(format!(
            "class_ratio must lie strictly inside (0,1), got {class_ratio}"
        )));
    }
    let n_hgg = (n_cases as f64 * class_ratio).round() as usize;
    if n_hgg == 0 || n_hgg == n_cases {
        return Err(Error::Config(format!(
            "parameters yield an empty class: {n_hgg} HGG of {n_cases}"
        )));
    }

    let mut cases = Vec::with_capacity(n_cases);
    let mut hgg_so_far = 0usize;
    for i in 0..n_cases {
        // Interleave classes deterministically so any prefix is near-ratio.
        let expected = ((i + 1) as f64 * class_ratio).round() as usize;
        let label = if hgg_so_far < expected.min(n_hgg) {
            hgg_so_far += 1;
            Grade::HGG
        } else {
            Grade::LGG
        };
        let case_seed: u64 = rng_for(seed, Stream::Synthesis { case: i }).random();
        cases.push(CaseDescriptor {
            id: format!("syn_{i:03}"),
            source: CaseSource::Seed { seed: case_seed },
            label,
        });
    }
    let manifest = DatasetManifest::from_cases(cases);
    manifest.validate()?;
    Ok(manifest)
}

/// Generate one synthetic case deterministically from its seed.
pub fn generate_case(id: &str, case_seed: u64, label: Grade) -> CaseRecord {
    let mut rng = rng_for(case_seed, Stream::Misc { tag: 0x53_59_4e });
    let (h, w, d) = PREPROCESSED_SHAPE;
    let centre = [h as f64 / 2.0, w as f64 / 2.0, d as f64 / 2.0];

    // Lesion geometry: same distributions for both classes.
    let semi = [
        rng.random_range(LESION_SEMI_AXES_INPLANE.0..=LESION_SEMI_AXES_INPLANE.1),
        rng.random_range(LESION_SEMI_AXES_INPLANE.0..=LESION_SEMI_AXES_INPLANE.1),
        rng.random_range(LESION_SEMI_AXES_DEPTH.0..=LESION_SEMI_AXES_DEPTH.1),
    ];
    let mut lesion_centre = [0.0f64; 3];
    for a in 0..3 {
        let margin = BRAIN_SEMI_AXES[a] - semi[a] - 6.0;
        lesion_centre[a] = centre[a] + rng.random_range(-1.0..1.0) * margin.max(0.0) * 0.7;
    }
    let euler = [
        rng.random_range(0.0..std::f64::consts::PI),
        rng.random_range(0.0..std::f64::consts::PI),
        rng.random_range(0.0..std::f64::consts::PI),
    ];
    let rot = rotation(euler);

    // Multi-scale heterogeneity field shared across modalities.
    let coarse = (
        h.div_ceil(TEXTURE_SCALE),
        w.div_ceil(TEXTURE_SCALE),
        d.div_ceil(TEXTURE_SCALE),
    );
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let mut field = Array3::zeros(coarse);
    for v in field.iter_mut() {
        *v = normal.sample(&mut rng) as f32;
    }
    let texture = resize_trilinear(&field, (h, w, d));
    let sigma_tex = match label {
        Grade::HGG => TEXTURE_SIGMA_HGG,
        Grade::LGG => TEXTURE_SIGMA_LGG,
    };

    // Per-modality appearance.
    let mut base = [0.0f64; 4];
    let mut contrast = [0.0f64; 4];
    let mut tex_scale = [0.0f64; 4];
    let mut waves = [[0.0f64; 7]; 4];
    for m in 0..4 {
        base[m] = rng.random_range(0.4..0.9);
        contrast[m] = rng.random_range(LESION_CONTRAST.0..=LESION_CONTRAST.1);
        tex_scale[m] = rng.random_range(0.7..1.3);
        for wv in waves[m].iter_mut() {
            *wv = rng.random_range(0.0..std::f64::consts::TAU);
        }
    }
    let noise = Normal::new(0.0f64, 0.02).unwrap();

    let mut volume = Array4::zeros((4, h, w, d));
    let mut wt_mask = Array3::zeros((h, w, d));
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let rel = [
                    i as f64 - centre[0],
                    j as f64 - centre[1],
                    k as f64 - centre[2],
                ];
                let brain = (rel[0] / BRAIN_SEMI_AXES[0]).powi(2)
                    + (rel[1] / BRAIN_SEMI_AXES[1]).powi(2)
                    + (rel[2] / BRAIN_SEMI_AXES[2]).powi(2)
                    <= 1.0;
                let lrel = [
                    i as f64 - lesion_centre[0],
                    j as f64 - lesion_centre[1],
                    k as f64 - lesion_centre[2],
                ];
                let local = [
                    rot[0][0] * lrel[0] + rot[0][1] * lrel[1] + rot[0][2] * lrel[2],
                    rot[1][0] * lrel[0] + rot[1][1] * lrel[1] + rot[1][2] * lrel[2],
                    rot[2][0] * lrel[0] + rot[2][1] * lrel[1] + rot[2][2] * lrel[2],
                ];
                let inside_lesion = (local[0] / semi[0]).powi(2)
                    + (local[1] / semi[1]).powi(2)
                    + (local[2] / semi[2]).powi(2)
                    <= 1.0;
                if inside_lesion {
                    wt_mask[[i, j, k]] = 1;
                }
                for m in 0..4 {
                    let mut val = 0.0f64;
                    if brain {
                        let wave = 0.06
                            * ((i as f64 * 0.08 + waves[m][0]).sin()
                                + (j as f64 * 0.06 + waves[m][1]).sin()
                                + (k as f64 * 0.09 + waves[m][2]).sin());
                        val = base[m] + wave + noise.sample(&mut rng);
                        if inside_lesion {
                            val += contrast[m]
                                + sigma_tex * tex_scale[m] * texture[[i, j, k]] as f64;
                        }
                    }
                    volume[[m, i, j, k]] = val as f32;
                }
            }
        }
    }

    // Whole-volume z-score per modality, matching the preprocessing contract.
    for m in 0..4 {
        let mut ch = volume.index_axis_mut(ndarray::Axis(0), m);
        let n = ch.len() as f64;
        let mean = ch.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = ch.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / var.sqrt().max(1e-8);
        ch.mapv_inplace(|x| ((x as f64 - mean) * inv_std) as f32);
    }

    CaseRecord {
        id: id.to_string(),
        volume,
        label,
        wt_mask,
        spacing: [1.5, 1.5, 1.5],
    }
}

fn rotation(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sc, cc) = angles[2].sin_cos();
    // Rz * Ry * Rx, expanded.
    [
        [cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa],
        [sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa],
        [-sb, cb * sa, cb * ca],
    ]
}
