//! Grid resampling: trilinear and nearest-neighbour resizing, plus affine
//! inverse-map resampling used by the rotation/scaling augmentation.
//!
//! Coordinates follow the pixel-centre convention: output index `i` maps to
//! input coordinate `(i + 0.5) * in/out - 0.5`.

use ndarray::{Array3, Array4};

/// Trilinear resize of one scalar volume.
pub fn resize_trilinear(src: &Array3<f32>, out_shape: (usize, usize, usize)) -> Array3<f32> {
    let (ih, iw, id) = src.dim();
    let (oh, ow, od) = out_shape;
    let sh = ih as f64 / oh as f64;
    let sw = iw as f64 / ow as f64;
    let sd = id as f64 / od as f64;
    let mut out = Array3::zeros(out_shape);
    for i in 0..oh {
        let (h0, h1, fh) = span((i as f64 + 0.5) * sh - 0.5, ih);
        for j in 0..ow {
            let (w0, w1, fw) = span((j as f64 + 0.5) * sw - 0.5, iw);
            for k in 0..od {
                let (d0, d1, fd) = span((k as f64 + 0.5) * sd - 0.5, id);
                let c000 = src[[h0, w0, d0]] as f64;
                let c001 = src[[h0, w0, d1]] as f64;
                let c010 = src[[h0, w1, d0]] as f64;
                let c011 = src[[h0, w1, d1]] as f64;
                let c100 = src[[h1, w0, d0]] as f64;
                let c101 = src[[h1, w0, d1]] as f64;
                let c110 = src[[h1, w1, d0]] as f64;
                let c111 = src[[h1, w1, d1]] as f64;
                let c00 = c000 + (c001 - c000) * fd;
                let c01 = c010 + (c011 - c010) * fd;
                let c10 = c100 + (c101 - c100) * fd;
                let c11 = c110 + (c111 - c110) * fd;
                let c0 = c00 + (c01 - c00) * fw;
                let c1 = c10 + (c11 - c10) * fw;
                out[[i, j, k]] = (c0 + (c1 - c0) * fh) as f32;
            }
        }
    }
    out
}

/// Nearest-neighbour resize of a binary mask.
pub fn resize_nearest_mask(src: &Array3<u8>, out_shape: (usize, usize, usize)) -> Array3<u8> {
    let (ih, iw, id) = src.dim();
    let (oh, ow, od) = out_shape;
    let sh = ih as f64 / oh as f64;
    let sw = iw as f64 / ow as f64;
    let sd = id as f64 / od as f64;
    let mut out = Array3::zeros(out_shape);
    for i in 0..oh {
        let si = nearest((i as f64 + 0.5) * sh - 0.5, ih);
        for j in 0..ow {
            let sj = nearest((j as f64 + 0.5) * sw - 0.5, iw);
            for k in 0..od {
                let sk = nearest((k as f64 + 0.5) * sd - 0.5, id);
                out[[i, j, k]] = u8::from(src[[si, sj, sk]] > 0);
            }
        }
    }
    out
}

/// Trilinear resize applied per modality.
pub fn resize_trilinear_4d(src: &Array4<f32>, out_shape: (usize, usize, usize)) -> Array4<f32> {
    let c = src.dim().0;
    let mut out = Array4::zeros((c, out_shape.0, out_shape.1, out_shape.2));
    for m in 0..c {
        let resized = resize_trilinear(&src.index_axis(ndarray::Axis(0), m).to_owned(), out_shape);
        out.index_axis_mut(ndarray::Axis(0), m).assign(&resized);
    }
    out
}

fn span(coord: f64, len: usize) -> (usize, usize, f64) {
    let c = coord.clamp(0.0, (len - 1) as f64);
    let lo = c.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, c - lo as f64)
}

fn nearest(coord: f64, len: usize) -> usize {
    (coord.round().clamp(0.0, (len - 1) as f64)) as usize
}

/// Sample one point of a volume with trilinear interpolation; coordinates
/// outside the grid return 0.
pub fn sample_trilinear(src: &Array3<f32>, h: f64, w: f64, d: f64) -> f32 {
    let (ih, iw, id) = src.dim();
    if h <= -1.0 || w <= -1.0 || d <= -1.0 {
        return 0.0;
    }
    if h >= ih as f64 || w >= iw as f64 || d >= id as f64 {
        return 0.0;
    }
    let h0 = h.floor();
    let w0 = w.floor();
    let d0 = d.floor();
    let fh = h - h0;
    let fw = w - w0;
    let fd = d - d0;
    let mut acc = 0.0f64;
    for (dh, wh) in [(0i64, 1.0 - fh), (1, fh)] {
        let hi = h0 as i64 + dh;
        if hi < 0 || hi >= ih as i64 || wh == 0.0 {
            continue;
        }
        for (dw, ww) in [(0i64, 1.0 - fw), (1, fw)] {
            let wi = w0 as i64 + dw;
            if wi < 0 || wi >= iw as i64 || ww == 0.0 {
                continue;
            }
            for (dd, wd) in [(0i64, 1.0 - fd), (1, fd)] {
                let di = d0 as i64 + dd;
                if di < 0 || di >= id as i64 || wd == 0.0 {
                    continue;
                }
                acc += src[[hi as usize, wi as usize, di as usize]] as f64 * wh * ww * wd;
            }
        }
    }
    acc as f32
}

/// Sample one point with nearest-neighbour lookup; outside the grid returns 0.
pub fn sample_nearest_mask(src: &Array3<u8>, h: f64, w: f64, d: f64) -> u8 {
    let (ih, iw, id) = src.dim();
    let hi = h.round();
    let wi = w.round();
    let di = d.round();
    if hi < 0.0 || wi < 0.0 || di < 0.0 {
        return 0;
    }
    let (hi, wi, di) = (hi as usize, wi as usize, di as usize);
    if hi >= ih || wi >= iw || di >= id {
        return 0;
    }
    u8::from(src[[hi, wi, di]] > 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_resize_preserves_values() {
        let mut src = Array3::zeros((4, 4, 3));
        for (i, v) in src.iter_mut().enumerate() {
            *v = i as f32;
        }
        let out = resize_trilinear(&src, (4, 4, 3));
        for (a, b) in src.iter().zip(out.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn constant_volume_stays_constant() {
        let src = Array3::from_elem((6, 6, 4), 3.5f32);
        let out = resize_trilinear(&src, (4, 4, 3));
        for v in out.iter() {
            assert_abs_diff_eq!(*v, 3.5, epsilon = 1e-6);
        }
    }

    // Independent triple-loop oracle with the same pixel-centre convention.
    fn oracle_resize(src: &Array3<f32>, out_shape: (usize, usize, usize)) -> Array3<f32> {
        let (ih, iw, id) = src.dim();
        let mut out = Array3::zeros(out_shape);
        for i in 0..out_shape.0 {
            for j in 0..out_shape.1 {
                for k in 0..out_shape.2 {
                    let src_h = ((i as f64 + 0.5) * ih as f64 / out_shape.0 as f64 - 0.5)
                        .clamp(0.0, (ih - 1) as f64);
                    let src_w = ((j as f64 + 0.5) * iw as f64 / out_shape.1 as f64 - 0.5)
                        .clamp(0.0, (iw - 1) as f64);
                    let src_d = ((k as f64 + 0.5) * id as f64 / out_shape.2 as f64 - 0.5)
                        .clamp(0.0, (id - 1) as f64);
                    let mut acc = 0.0f64;
                    for (h, w, d) in itertools_cube() {
                        let hh = (src_h.floor() as usize + h).min(ih - 1);
                        let ww = (src_w.floor() as usize + w).min(iw - 1);
                        let dd = (src_d.floor() as usize + d).min(id - 1);
                        let wgt = tri_weight(src_h, h) * tri_weight(src_w, w) * tri_weight(src_d, d);
                        acc += src[[hh, ww, dd]] as f64 * wgt;
                    }
                    out[[i, j, k]] = acc as f32;
                }
            }
        }
        out
    }

    fn itertools_cube() -> Vec<(usize, usize, usize)> {
        let mut v = Vec::new();
        for h in 0..2 {
            for w in 0..2 {
                for d in 0..2 {
                    v.push((h, w, d));
                }
            }
        }
        v
    }

    fn tri_weight(coord: f64, corner: usize) -> f64 {
        let f = coord - coord.floor();
        if corner == 0 {
            1.0 - f
        } else {
            f
        }
    }

    #[test]
    fn upsample_matches_triple_loop_oracle() {
        let mut src = Array3::zeros((4, 4, 3));
        src[[1, 2, 1]] = 1.0; // single interior hot voxel
        let got = resize_trilinear(&src, (16, 16, 12));
        let want = oracle_resize(&src, (16, 16, 12));
        for (a, b) in got.iter().zip(want.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn nearest_mask_stays_binary() {
        let mut src = Array3::zeros((5, 5, 5));
        src[[2, 2, 2]] = 1;
        let out = resize_nearest_mask(&src, (8, 8, 8));
        assert!(out.iter().all(|&v| v <= 1));
        assert!(out.iter().any(|&v| v == 1));
    }
}
