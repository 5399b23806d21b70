//! Log-sum-exp spatial pooling and the online-CAM auxiliary head.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView3};

use crate::network::ops::{softmax, softmax_backward};
use crate::real::Real;

/// LSE pooling of one spatial map:
/// `(1/r) * log[(1/V) * sum exp(r * x)]`, evaluated with max-subtraction so
/// large `r * x` cannot overflow. A smooth interpolant between average
/// (`r -> 0`) and max (`r -> inf`) pooling.
pub fn lse_pool<F: Real>(map: &ArrayView3<F>, r: f64) -> F {
    let rf = F::c(r);
    let n = F::c(map.len() as f64);
    let max = map.iter().cloned().fold(F::neg_infinity(), F::max);
    let sum = map.iter().fold(F::zero(), |a, &v| a + (rf * (v - max)).exp());
    max + (sum / n).ln() / rf
}

/// Gradient of [`lse_pool`]: the spatial softmax of `r * x` times the
/// incoming scalar gradient.
pub fn lse_pool_backward<F: Real>(map: &ArrayView3<F>, r: f64, grad: F) -> ndarray::Array3<F> {
    let rf = F::c(r);
    let max = map.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut weights = map.mapv(|v| (rf * (v - max)).exp());
    let sum = weights.sum();
    weights.mapv_inplace(|w| grad * w / sum);
    weights
}

/// LSE pooling applied per channel: `[E, H, W, D] -> [E]`.
pub fn lse_vector<F: Real>(features: &Array4<F>, r: f64) -> Array1<F> {
    let e = features.dim().0;
    Array1::from_iter(
        (0..e).map(|ei| lse_pool(&features.index_axis(ndarray::Axis(0), ei), r)),
    )
}

/// Backward of [`lse_vector`].
pub fn lse_vector_backward<F: Real>(features: &Array4<F>, r: f64, grad: &ArrayView1<F>) -> Array4<F> {
    let mut out = Array4::zeros(features.raw_dim());
    for (ei, &g) in grad.iter().enumerate() {
        let ch = features.index_axis(ndarray::Axis(0), ei);
        out.index_axis_mut(ndarray::Axis(0), ei)
            .assign(&lse_pool_backward(&ch, r, g));
    }
    out
}

/// Intermediate values of the online-CAM head, kept for backward.
pub struct OnlineCamTrace<F> {
    /// Per-channel LSE of the mapping module's pre-final features.
    pub lse: Array1<F>,
    /// `q = W_convmap . lse`, the CAM-style per-prototype score.
    pub q: Array1<F>,
    pub p_oc: Array1<F>,
}

/// The auxiliary probability `p_OC = softmax(LSE(I) . W_convmap . W_cls)`.
///
/// `w_map` is the live weight of the mapping module's final convolution in
/// `[K, E]` layout (shared with the attention path, not copied).
pub fn online_cam_probability<F: Real>(
    features: &Array4<F>,
    w_map: &ArrayView2<F>,
    w_cls: &ArrayView2<F>,
    r: f64,
) -> OnlineCamTrace<F> {
    let lse = lse_vector(features, r);
    let q = w_map.dot(&lse);
    let z = q.dot(w_cls);
    let p_oc = softmax(&z.view());
    OnlineCamTrace { lse, q, p_oc }
}

/// Backward of [`online_cam_probability`] from `dL/dp_OC`. Returns the
/// gradient with respect to the features and the two weight matrices.
pub fn online_cam_probability_backward<F: Real>(
    features: &Array4<F>,
    w_map: &ArrayView2<F>,
    w_cls: &ArrayView2<F>,
    r: f64,
    trace: &OnlineCamTrace<F>,
    grad_p: &ArrayView1<F>,
) -> (Array4<F>, Array2<F>, Array2<F>) {
    let dz = softmax_backward(&trace.p_oc.view(), grad_p);
    // z = q . W_cls
    let dq = w_cls.dot(&dz);
    let mut dw_cls = Array2::zeros(w_cls.raw_dim());
    for k in 0..w_cls.nrows() {
        for c in 0..w_cls.ncols() {
            dw_cls[[k, c]] = trace.q[k] * dz[c];
        }
    }
    // q = W_map . lse
    let dlse = w_map.t().dot(&dq);
    let mut dw_map = Array2::zeros(w_map.raw_dim());
    for k in 0..w_map.nrows() {
        for e in 0..w_map.ncols() {
            dw_map[[k, e]] = dq[k] * trace.lse[e];
        }
    }
    let dfeatures = lse_vector_backward(features, r, &dlse.view());
    (dfeatures, dw_map, dw_cls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array3};
    use rand::Rng;

    use crate::rng::{rng_for, Stream};

    #[test]
    fn constant_map_pools_to_itself() {
        for c in [-2.5f64, 0.0, 3.25] {
            let map = Array3::from_elem((4, 4, 3), c);
            let got = lse_pool(&map.view(), 10.0);
            assert!((got - c).abs() < 1e-12, "c={c} got={got}");
        }
    }

    #[test]
    fn single_hot_voxel_value() {
        // One voxel at 1 among 3072 zeros, r = 10:
        // (1/10) ln[(3071 + e^10)/3072] = 0.21005...
        let mut map = Array3::zeros((16, 16, 12));
        map[[3, 5, 7]] = 1.0f64;
        let got = lse_pool(&map.view(), 10.0);
        let want = ((3071.0 + 10.0f64.exp()) / 3072.0).ln() / 10.0;
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.2100).abs() < 5e-5);
    }

    #[test]
    fn jensen_bounds_hold() {
        let mut rng = rng_for(1, Stream::Misc { tag: 30 });
        for _ in 0..200 {
            let map = Array3::from_shape_fn((5, 4, 3), |_| rng.random_range(-2.0f64..2.0));
            let lse = lse_pool(&map.view(), 10.0);
            let mean = map.sum() / map.len() as f64;
            let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(mean <= lse + 1e-12 && lse <= max + 1e-12);
        }
    }

    #[test]
    fn max_subtraction_matches_naive_where_safe() {
        let mut rng = rng_for(2, Stream::Misc { tag: 30 });
        for _ in 0..100 {
            let map = Array3::from_shape_fn((4, 3, 2), |_| rng.random_range(-3.0f64..3.0));
            let r = 10.0;
            let naive = ((map.mapv(|v| (r * v).exp()).sum()) / map.len() as f64).ln() / r;
            let stable = lse_pool(&map.view(), r);
            assert!((naive - stable).abs() < 1e-10);
        }
        // And survives magnitudes where the naive form overflows.
        let big = Array3::from_elem((2, 2, 2), 500.0f64);
        assert!(lse_pool(&big.view(), 10.0).is_finite());
    }

    #[test]
    fn lse_gradient_matches_fd() {
        let mut rng = rng_for(3, Stream::Misc { tag: 30 });
        let map = Array3::from_shape_fn((3, 3, 2), |_| rng.random_range(-1.0f64..1.0));
        let grad = lse_pool_backward(&map.view(), 10.0, 1.0);
        let eps = 1e-5;
        for idx in 0..map.len() {
            let mut a = map.clone();
            a.as_slice_mut().unwrap()[idx] += eps;
            let lp = lse_pool(&a.view(), 10.0);
            a.as_slice_mut().unwrap()[idx] -= 2.0 * eps;
            let lm = lse_pool(&a.view(), 10.0);
            let fd = (lp - lm) / (2.0 * eps);
            let an = grad.as_slice().unwrap()[idx];
            assert!(
                ((fd - an) / fd.abs().max(an.abs()).max(1e-6)).abs() < 1e-4,
                "idx={idx} fd={fd} an={an}"
            );
        }
    }

    #[test]
    fn oc_symmetry_case() {
        // Weights that cancel: z = (0, 0) gives p = (0.5, 0.5).
        let features = Array4::<f64>::zeros((2, 2, 2, 2));
        let w_map = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let w_cls = arr2(&[[0.0, 0.0], [0.0, 0.0]]);
        let t = online_cam_probability(&features, &w_map.view(), &w_cls.view(), 10.0);
        assert!((t.p_oc[0] - 0.5).abs() < 1e-12 && (t.p_oc[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn oc_matches_hand_matrix_product() {
        // Toy E = 2, K = 2 with constant feature maps so LSE is exact.
        let mut features = Array4::<f64>::zeros((2, 2, 1, 1));
        features.index_axis_mut(ndarray::Axis(0), 0).fill(0.3);
        features.index_axis_mut(ndarray::Axis(0), 1).fill(-0.2);
        let w_map = arr2(&[[0.5, -1.0], [2.0, 0.25]]);
        let w_cls = arr2(&[[1.0, -0.5], [0.0, 1.5]]);
        let t = online_cam_probability(&features, &w_map.view(), &w_cls.view(), 10.0);
        let lse = arr1(&[0.3, -0.2]);
        let q = arr1(&[0.5 * 0.3 + -1.0 * -0.2, 2.0 * 0.3 + 0.25 * -0.2]);
        let z = arr1(&[q[0] * 1.0 + q[1] * 0.0, q[0] * -0.5 + q[1] * 1.5]);
        for e in 0..2 {
            assert!((t.lse[e] - lse[e]).abs() < 1e-12);
            assert!((t.q[e] - q[e]).abs() < 1e-12);
        }
        let p = crate::network::ops::softmax(&z.view());
        for c in 0..2 {
            assert!((t.p_oc[c] - p[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn oc_gradients_match_fd() {
        let mut rng = rng_for(4, Stream::Misc { tag: 30 });
        let features = Array4::from_shape_fn((2, 2, 2, 1), |_| rng.random_range(-1.0f64..1.0));
        let w_map = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0f64..1.0));
        let w_cls = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0f64..1.0));
        let proj = arr1(&[0.8, -0.4]);
        let loss = |f: &Array4<f64>, wm: &Array2<f64>, wc: &Array2<f64>| {
            online_cam_probability(f, &wm.view(), &wc.view(), 10.0)
                .p_oc
                .dot(&proj)
        };
        let trace = online_cam_probability(&features, &w_map.view(), &w_cls.view(), 10.0);
        let (df, dwm, dwc) = online_cam_probability_backward(
            &features,
            &w_map.view(),
            &w_cls.view(),
            10.0,
            &trace,
            &proj.view(),
        );
        let eps = 1e-6;
        let check = |fd: f64, an: f64| ((fd - an) / fd.abs().max(an.abs()).max(1e-6)).abs() < 1e-4;
        for idx in 0..features.len() {
            let mut a = features.clone();
            a.as_slice_mut().unwrap()[idx] += eps;
            let lp = loss(&a, &w_map, &w_cls);
            a.as_slice_mut().unwrap()[idx] -= 2.0 * eps;
            let lm = loss(&a, &w_map, &w_cls);
            assert!(check((lp - lm) / (2.0 * eps), df.as_slice().unwrap()[idx]));
        }
        for idx in 0..w_map.len() {
            let mut a = w_map.clone();
            a.as_slice_mut().unwrap()[idx] += eps;
            let lp = loss(&features, &a, &w_cls);
            a.as_slice_mut().unwrap()[idx] -= 2.0 * eps;
            let lm = loss(&features, &a, &w_cls);
            assert!(check((lp - lm) / (2.0 * eps), dwm.as_slice().unwrap()[idx]));
        }
        for idx in 0..w_cls.len() {
            let mut a = w_cls.clone();
            a.as_slice_mut().unwrap()[idx] += eps;
            let lp = loss(&features, &w_map, &a);
            a.as_slice_mut().unwrap()[idx] -= 2.0 * eps;
            let lm = loss(&features, &w_map, &a);
            assert!(check((lp - lm) / (2.0 * eps), dwc.as_slice().unwrap()[idx]));
        }
    }
}
