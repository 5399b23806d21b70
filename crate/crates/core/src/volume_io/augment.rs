//! Online augmentation: eight stochastic transforms applied in a fixed
//! sequence (rotation/scaling, Gaussian noise, Gaussian blur, brightness,
//! contrast, low-resolution simulation, gamma, mirroring). Spatial transforms
//! are applied identically to the whole-tumor mask.

use ndarray::{Array1, Array3, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::resample::{resize_trilinear, sample_nearest_mask, sample_trilinear};
use super::CaseRecord;
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

const MAX_ROTATION_RAD: f64 = 15.0f64 * std::f64::consts::PI / 180.0;
const SCALE_RANGE: (f64, f64) = (0.85, 1.25);
const NOISE_SIGMA_MAX: f64 = 0.1;
const BLUR_SIGMA_RANGE: (f64, f64) = (0.5, 1.0);
const BRIGHTNESS_RANGE: (f64, f64) = (0.75, 1.25);
const CONTRAST_RANGE: (f64, f64) = (0.75, 1.25);
const LOWRES_FACTOR_MIN: f64 = 0.5;
const GAMMA_RANGE: (f64, f64) = (0.7, 1.5);

/// Enable flag and application probability for one transform.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TransformProb {
    pub enabled: bool,
    pub probability: f64,
}

impl TransformProb {
    pub fn new(probability: f64) -> TransformProb {
        TransformProb { enabled: true, probability }
    }

    pub fn off() -> TransformProb {
        TransformProb { enabled: false, probability: 0.0 }
    }

    fn fires(&self, rng: &mut impl Rng) -> bool {
        // Always consume the gate draw so the stream layout does not depend
        // on the enable flag.
        let u: f64 = rng.random();
        self.enabled && u < self.probability
    }
}

/// Per-transform switches plus the seed that makes a draw reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub rotation_scaling: TransformProb,
    pub gaussian_noise: TransformProb,
    pub gaussian_blur: TransformProb,
    pub brightness: TransformProb,
    pub contrast: TransformProb,
    pub low_resolution: TransformProb,
    pub gamma: TransformProb,
    /// Applied independently per axis.
    pub mirror: TransformProb,
    pub rng_seed: u64,
}

impl AugmentationConfig {
    /// Defaults: probability 0.2 for every transform except mirroring (0.5
    /// per axis).
    pub fn defaults(rng_seed: u64) -> AugmentationConfig {
        AugmentationConfig {
            rotation_scaling: TransformProb::new(0.2),
            gaussian_noise: TransformProb::new(0.2),
            gaussian_blur: TransformProb::new(0.2),
            brightness: TransformProb::new(0.2),
            contrast: TransformProb::new(0.2),
            low_resolution: TransformProb::new(0.2),
            gamma: TransformProb::new(0.2),
            mirror: TransformProb::new(0.5),
            rng_seed,
        }
    }

    /// Identity configuration: every transform disabled.
    pub fn disabled(rng_seed: u64) -> AugmentationConfig {
        AugmentationConfig {
            rotation_scaling: TransformProb::off(),
            gaussian_noise: TransformProb::off(),
            gaussian_blur: TransformProb::off(),
            brightness: TransformProb::off(),
            contrast: TransformProb::off(),
            low_resolution: TransformProb::off(),
            gamma: TransformProb::off(),
            mirror: TransformProb::off(),
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("rotation_scaling", &self.rotation_scaling),
            ("gaussian_noise", &self.gaussian_noise),
            ("gaussian_blur", &self.gaussian_blur),
            ("brightness", &self.brightness),
            ("contrast", &self.contrast),
            ("low_resolution", &self.low_resolution),
            ("gamma", &self.gamma),
            ("mirror", &self.mirror),
        ] {
            if !(0.0..=1.0).contains(&t.probability) {
                return Err(Error::Config(format!(
                    "augmentation probability for {name} outside [0,1]: {}",
                    t.probability
                )));
            }
        }
        Ok(())
    }
}

/// Apply the augmentation sequence to a preprocessed case. Deterministic
/// given `config.rng_seed`; the identity when all transforms are disabled.
pub fn augment(case: &CaseRecord, config: &AugmentationConfig) -> Result<CaseRecord> {
    config.validate()?;
    let mut rng = rng_for(config.rng_seed, Stream::Misc { tag: 0x41_55_47 });
    let mut out = case.clone();

    if config.rotation_scaling.fires(&mut rng) {
        let angles = [
            rng.random_range(-MAX_ROTATION_RAD..=MAX_ROTATION_RAD),
            rng.random_range(-MAX_ROTATION_RAD..=MAX_ROTATION_RAD),
            rng.random_range(-MAX_ROTATION_RAD..=MAX_ROTATION_RAD),
        ];
        let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        apply_affine(&mut out, angles, scale);
    }
    if config.gaussian_noise.fires(&mut rng) {
        let sigma = rng.random_range(0.0..=NOISE_SIGMA_MAX);
        let normal = Normal::new(0.0, sigma.max(1e-12)).unwrap();
        for v in out.volume.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    if config.gaussian_blur.fires(&mut rng) {
        let sigma = rng.random_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1);
        gaussian_blur(&mut out.volume, sigma);
    }
    if config.brightness.fires(&mut rng) {
        for m in 0..4 {
            let f = rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1) as f32;
            out.volume.index_axis_mut(Axis(0), m).mapv_inplace(|x| x * f);
        }
    }
    if config.contrast.fires(&mut rng) {
        for m in 0..4 {
            let f = rng.random_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1) as f32;
            let mut ch = out.volume.index_axis_mut(Axis(0), m);
            let mean = ch.iter().map(|&x| x as f64).sum::<f64>() / ch.len() as f64;
            ch.mapv_inplace(|x| (mean + (x as f64 - mean) * f as f64) as f32);
        }
    }
    if config.low_resolution.fires(&mut rng) {
        let factor = rng.random_range(LOWRES_FACTOR_MIN..1.0);
        simulate_low_resolution(&mut out.volume, factor);
    }
    if config.gamma.fires(&mut rng) {
        for m in 0..4 {
            let g = rng.random_range(GAMMA_RANGE.0..=GAMMA_RANGE.1);
            let mut ch = out.volume.index_axis_mut(Axis(0), m);
            let min = ch.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
            let max = ch.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let range = (max - min).max(1e-8);
            ch.mapv_inplace(|x| {
                let t = ((x as f64 - min) / range).clamp(0.0, 1.0);
                (t.powf(g) * range + min) as f32
            });
        }
    }
    // Mirroring: one independent draw per axis.
    for axis in 0..3 {
        if config.mirror.fires(&mut rng) {
            mirror_axis(&mut out, axis);
        }
    }

    Ok(out)
}

/// Flip volume and mask along one spatial axis (0 = H, 1 = W, 2 = D).
pub fn mirror_axis(case: &mut CaseRecord, axis: usize) {
    case.volume.invert_axis(Axis(axis + 1));
    case.wt_mask.invert_axis(Axis(axis));
}

fn apply_affine(case: &mut CaseRecord, angles: [f64; 3], scale: f64) {
    let rot = rotation_matrix(angles);
    // Output voxel -> input coordinate: inverse of scale-then-rotate about
    // the volume centre, i.e. R^T / s.
    let inv_scale = 1.0 / scale;
    let (h, w, d) = case.spatial_shape();
    let centre = [
        (h as f64 - 1.0) / 2.0,
        (w as f64 - 1.0) / 2.0,
        (d as f64 - 1.0) / 2.0,
    ];

    let mut volume = Array4::zeros(case.volume.raw_dim());
    let channels: Vec<Array3<f32>> = (0..4)
        .map(|m| case.volume.index_axis(Axis(0), m).to_owned())
        .collect();
    let mut mask = Array3::zeros(case.wt_mask.raw_dim());

    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let rel = [
                    i as f64 - centre[0],
                    j as f64 - centre[1],
                    k as f64 - centre[2],
                ];
                // R^T rel
                let src = [
                    (rot[0][0] * rel[0] + rot[1][0] * rel[1] + rot[2][0] * rel[2]) * inv_scale
                        + centre[0],
                    (rot[0][1] * rel[0] + rot[1][1] * rel[1] + rot[2][1] * rel[2]) * inv_scale
                        + centre[1],
                    (rot[0][2] * rel[0] + rot[1][2] * rel[1] + rot[2][2] * rel[2]) * inv_scale
                        + centre[2],
                ];
                for m in 0..4 {
                    volume[[m, i, j, k]] = sample_trilinear(&channels[m], src[0], src[1], src[2]);
                }
                mask[[i, j, k]] = sample_nearest_mask(&case.wt_mask, src[0], src[1], src[2]);
            }
        }
    }
    case.volume = volume;
    case.wt_mask = mask;
}

fn rotation_matrix(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sc, cc) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&mat_mul(&rz, &ry), &rx)
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

fn gaussian_blur(volume: &mut Array4<f32>, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut kernel = Array1::zeros(2 * radius + 1);
    for (i, k) in kernel.iter_mut().enumerate() {
        let x = i as f64 - radius as f64;
        *k = (-0.5 * (x / sigma).powi(2)).exp();
    }
    let sum: f64 = kernel.sum();
    kernel.mapv_inplace(|k| k / sum);

    let (c, h, w, d) = volume.dim();
    for m in 0..c {
        let mut ch = volume.index_axis(Axis(0), m).to_owned();
        for axis in 0..3 {
            let mut next = Array3::zeros(ch.raw_dim());
            let len = [h, w, d][axis];
            for i in 0..h {
                for j in 0..w {
                    for k in 0..d {
                        let pos = [i, j, k][axis];
                        let mut acc = 0.0f64;
                        for (t, kv) in kernel.iter().enumerate() {
                            let p = pos as i64 + t as i64 - radius as i64;
                            let p = p.clamp(0, len as i64 - 1) as usize;
                            let mut idx = [i, j, k];
                            idx[axis] = p;
                            acc += ch[[idx[0], idx[1], idx[2]]] as f64 * kv;
                        }
                        next[[i, j, k]] = acc as f32;
                    }
                }
            }
            ch = next;
        }
        volume.index_axis_mut(Axis(0), m).assign(&ch);
    }
}

fn simulate_low_resolution(volume: &mut Array4<f32>, factor: f64) {
    let (c, h, w, d) = volume.dim();
    let low = (
        ((h as f64 * factor).round() as usize).max(1),
        ((w as f64 * factor).round() as usize).max(1),
        ((d as f64 * factor).round() as usize).max(1),
    );
    for m in 0..c {
        let ch = volume.index_axis(Axis(0), m).to_owned();
        let down = resize_trilinear(&ch, low);
        let up = resize_trilinear(&down, (h, w, d));
        volume.index_axis_mut(Axis(0), m).assign(&up);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::Grade;
    use proptest::prelude::*;

    fn small_case(seed: u64) -> CaseRecord {
        let mut rng = rng_for(seed, Stream::Misc { tag: 99 });
        let mut volume = Array4::zeros((4, 16, 16, 12));
        for v in volume.iter_mut() {
            *v = rng.random_range(-1.0f32..1.0);
        }
        let mut wt_mask = Array3::zeros((16, 16, 12));
        for h in 5..10 {
            for w in 6..11 {
                for d in 4..8 {
                    wt_mask[[h, w, d]] = 1;
                }
            }
        }
        CaseRecord {
            id: format!("case{seed}"),
            volume,
            label: Grade::HGG,
            wt_mask,
            spacing: [1.5; 3],
        }
    }

    #[test]
    fn disabled_config_is_identity() {
        let case = small_case(3);
        let out = augment(&case, &AugmentationConfig::disabled(5)).unwrap();
        assert_eq!(out.volume, case.volume);
        assert_eq!(out.wt_mask, case.wt_mask);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let case = small_case(4);
        let cfg = AugmentationConfig::defaults(1234);
        let a = augment(&case, &cfg).unwrap();
        let b = augment(&case, &cfg).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.wt_mask, b.wt_mask);
    }

    #[test]
    fn mirror_twice_is_identity() {
        let case = small_case(5);
        for axis in 0..3 {
            let mut m = case.clone();
            mirror_axis(&mut m, axis);
            assert_ne!(m.volume, case.volume);
            mirror_axis(&mut m, axis);
            assert_eq!(m.volume, case.volume);
            assert_eq!(m.wt_mask, case.wt_mask);
        }
    }

    #[test]
    fn invalid_probability_is_rejected() {
        let mut cfg = AugmentationConfig::defaults(0);
        cfg.gamma.probability = 1.5;
        assert!(augment(&small_case(0), &cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn shapes_preserved_and_mask_binary(seed in 0u64..1000) {
            let case = small_case(1);
            let cfg = AugmentationConfig {
                // Force all transforms on so every path is exercised.
                rotation_scaling: TransformProb::new(1.0),
                gaussian_noise: TransformProb::new(1.0),
                gaussian_blur: TransformProb::new(1.0),
                brightness: TransformProb::new(1.0),
                contrast: TransformProb::new(1.0),
                low_resolution: TransformProb::new(1.0),
                gamma: TransformProb::new(1.0),
                mirror: TransformProb::new(0.5),
                rng_seed: seed,
            };
            let out = augment(&case, &cfg).unwrap();
            prop_assert_eq!(out.volume.shape(), case.volume.shape());
            prop_assert_eq!(out.wt_mask.shape(), case.wt_mask.shape());
            prop_assert!(out.wt_mask.iter().all(|&v| v <= 1));
            prop_assert!(out.volume.iter().all(|v| v.is_finite()));
        }
    }
}
