//! The individual loss terms: class-weighted focal classification, cluster
//! and separation over prototype similarities, attention-map sparsity, and
//! cross-class L1 of the classification layer.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::network::ops::softmax_backward;
use crate::real::Real;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-8;

/// Focal term for one sample: `(1 - p_c)^gamma * (-ln p_c)`, minimized at
/// `p_c = 1`.
pub fn focal_sample_loss<F: Real>(p_true: F, gamma: f64) -> F {
    let eps = F::c(PROB_EPS);
    let p = p_true.max(eps).min(F::one() - eps);
    (F::one() - p).powf(F::c(gamma)) * (-p.ln())
}

fn focal_sample_grad<F: Real>(p_true: F, gamma: f64) -> F {
    let eps = F::c(PROB_EPS);
    if p_true < eps || p_true > F::one() - eps {
        // Clamped region: the loss is locally constant in p.
        return F::zero();
    }
    let g = F::c(gamma);
    let one_m = F::one() - p_true;
    // d/dp [ (1-p)^g * (-ln p) ] = g (1-p)^(g-1) ln p - (1-p)^g / p
    g * one_m.powf(g - F::one()) * p_true.ln() - one_m.powf(g) / p_true
}

/// Class-weighted focal classification loss over a batch:
/// `sum_i (1 / N^{c_i}) * (1 - p^{c_i})^gamma * (-ln p^{c_i})`.
///
/// `class_counts[c]` is the number of training samples of class `c` in the
/// whole training set, not the batch.
pub fn classification_loss<F: Real>(
    p_batch: &ArrayView2<F>,
    labels: &[usize],
    class_counts: &[usize],
    gamma: f64,
) -> Result<F> {
    check_cls_inputs(p_batch, labels, class_counts)?;
    let mut total = F::zero();
    for (i, &c) in labels.iter().enumerate() {
        let w = F::one() / F::c(class_counts[c] as f64);
        total = total + w * focal_sample_loss(p_batch[[i, c]], gamma);
    }
    Ok(total)
}

/// Gradient of [`classification_loss`] with respect to the probabilities.
pub fn classification_loss_backward<F: Real>(
    p_batch: &ArrayView2<F>,
    labels: &[usize],
    class_counts: &[usize],
    gamma: f64,
) -> Result<Array2<F>> {
    check_cls_inputs(p_batch, labels, class_counts)?;
    let mut grad = Array2::zeros(p_batch.raw_dim());
    for (i, &c) in labels.iter().enumerate() {
        let w = F::one() / F::c(class_counts[c] as f64);
        grad[[i, c]] = w * focal_sample_grad(p_batch[[i, c]], gamma);
    }
    Ok(grad)
}

fn check_cls_inputs<F: Real>(
    p_batch: &ArrayView2<F>,
    labels: &[usize],
    class_counts: &[usize],
) -> Result<()> {
    if p_batch.nrows() != labels.len() {
        return Err(Error::Input(format!(
            "{} probability rows for {} labels",
            p_batch.nrows(),
            labels.len()
        )));
    }
    for &c in labels {
        if c >= class_counts.len() || class_counts[c] == 0 {
            return Err(Error::Input(format!("label {c} has no positive class count")));
        }
    }
    Ok(())
}

/// Gradient of the per-sample weighted focal loss with respect to the
/// logits feeding a softmax: the focal chain composed with the softmax
/// Jacobian.
pub fn focal_grad_logits<F: Real>(
    p: &ArrayView1<F>,
    class_idx: usize,
    class_count: usize,
    gamma: f64,
) -> Array1<F> {
    let w = F::one() / F::c(class_count as f64);
    let mut dp = Array1::zeros(p.len());
    dp[class_idx] = w * focal_sample_grad(p[class_idx], gamma);
    softmax_backward(p, &dp.view())
}

/// Cluster and separation losses over a batch of similarity vectors:
/// `clst = sum_i (1/N^{c_i}) (1 - max_{k in c_i} s_ik)` pulls every sample
/// towards its best own-class prototype, and
/// `sep = sum_i (1/N^{c_i}) max_{k not in c_i} s_ik` pushes it away from the
/// nearest other-class prototype.
pub fn cluster_and_separation_loss<F: Real>(
    s_batch: &ArrayView2<F>,
    labels: &[usize],
    class_of: &[usize],
    class_counts: &[usize],
) -> Result<(F, F)> {
    let (clst, sep, _, _) = cluster_separation_impl(s_batch, labels, class_of, class_counts)?;
    Ok((clst, sep))
}

/// Gradients `(d_clst, d_sep)` of the two terms with respect to `s_batch`.
pub fn cluster_separation_backward<F: Real>(
    s_batch: &ArrayView2<F>,
    labels: &[usize],
    class_of: &[usize],
    class_counts: &[usize],
) -> Result<(Array2<F>, Array2<F>)> {
    let (_, _, d_clst, d_sep) = cluster_separation_impl(s_batch, labels, class_of, class_counts)?;
    Ok((d_clst, d_sep))
}

#[allow(clippy::type_complexity)]
fn cluster_separation_impl<F: Real>(
    s_batch: &ArrayView2<F>,
    labels: &[usize],
    class_of: &[usize],
    class_counts: &[usize],
) -> Result<(F, F, Array2<F>, Array2<F>)> {
    if s_batch.ncols() != class_of.len() {
        return Err(Error::Input(format!(
            "{} similarity columns for {} prototypes",
            s_batch.ncols(),
            class_of.len()
        )));
    }
    for c in 0..class_counts.len() {
        if labels.contains(&c) && !class_of.contains(&c) {
            return Err(Error::Config(format!("class {c} has zero prototypes")));
        }
    }
    let mut clst = F::zero();
    let mut sep = F::zero();
    let mut d_clst = Array2::zeros(s_batch.raw_dim());
    let mut d_sep = Array2::zeros(s_batch.raw_dim());
    for (i, &c) in labels.iter().enumerate() {
        let w = F::one() / F::c(class_counts[c] as f64);
        let row = s_batch.row(i);
        let mut own_best: Option<(usize, F)> = None;
        let mut other_best: Option<(usize, F)> = None;
        for (k, (&s, &kc)) in row.iter().zip(class_of).enumerate() {
            let slot = if kc == c { &mut own_best } else { &mut other_best };
            if slot.map_or(true, |(_, best)| s > best) {
                *slot = Some((k, s));
            }
        }
        let (own_k, own_s) = own_best.expect("own class has prototypes");
        clst = clst + w * (F::one() - own_s);
        d_clst[[i, own_k]] = -w;
        if let Some((other_k, other_s)) = other_best {
            sep = sep + w * other_s;
            d_sep[[i, other_k]] = w;
        }
    }
    Ok((clst, sep, d_clst, d_sep))
}

/// Sparsity term of the occurrence loss: mean absolute value of the
/// pre-mask attention maps over the whole batch tensor.
pub fn mapping_loss<F: Real>(m0_batch: &[&Array4<F>]) -> F {
    let mut total = F::zero();
    let mut n = 0usize;
    for m0 in m0_batch {
        total = total + m0.iter().fold(F::zero(), |a, &v| a + v.abs());
        n += m0.len();
    }
    if n == 0 {
        return F::zero();
    }
    total / F::c(n as f64)
}

/// Gradient of [`mapping_loss`] for one batch element of `n_total` overall
/// entries: `sign(m0) / n_total`.
pub fn mapping_loss_backward<F: Real>(m0: &Array4<F>, n_total: usize) -> Array4<F> {
    let scale = F::one() / F::c(n_total as f64);
    m0.mapv(|v| {
        if v > F::zero() {
            scale
        } else if v < F::zero() {
            -scale
        } else {
            F::zero()
        }
    })
}

/// Affine-consistency term: mean absolute difference between the attention
/// maps of a transformed input and the transformed attention maps of the
/// original. Off by default in training.
pub fn mapping_consistency_loss<F: Real>(pairs: &[(Array4<F>, Array4<F>)]) -> F {
    let mut total = F::zero();
    let mut n = 0usize;
    for (a, b) in pairs {
        total = total
            + a.iter()
                .zip(b.iter())
                .fold(F::zero(), |acc, (&x, &y)| acc + (x - y).abs());
        n += a.len();
    }
    if n == 0 {
        return F::zero();
    }
    total / F::c(n as f64)
}

/// L1 of the classification weights connecting each prototype to classes
/// other than its own.
pub fn l1_loss<F: Real>(w_cls: &ArrayView2<F>, class_of: &[usize]) -> F {
    let mut total = F::zero();
    for (k, &kc) in class_of.iter().enumerate() {
        for c in 0..w_cls.ncols() {
            if c != kc {
                total = total + w_cls[[k, c]].abs();
            }
        }
    }
    total
}

/// Subgradient of [`l1_loss`]: sign on cross-class entries, zero elsewhere.
pub fn l1_loss_backward<F: Real>(w_cls: &ArrayView2<F>, class_of: &[usize]) -> Array2<F> {
    let mut grad = Array2::zeros(w_cls.raw_dim());
    for (k, &kc) in class_of.iter().enumerate() {
        for c in 0..w_cls.ncols() {
            if c != kc {
                let v = w_cls[[k, c]];
                grad[[k, c]] = if v > F::zero() {
                    F::one()
                } else if v < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                };
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use rand::Rng;

    use crate::rng::{rng_for, Stream};

    #[test]
    fn perfect_prediction_is_zero_loss() {
        let p = arr2(&[[1.0f64, 0.0], [0.0, 1.0]]);
        let l = classification_loss(&p.view(), &[0, 1], &[1, 1], 2.0).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn half_probability_scalar_value() {
        // (1 - 0.5)^2 * (-ln 0.5) = 0.25 * ln 2
        let p = arr2(&[[0.5f64, 0.5]]);
        let l = classification_loss(&p.view(), &[0], &[1, 1], 2.0).unwrap();
        assert!((l - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.17328679513998632).abs() < 1e-10);
    }

    #[test]
    fn gamma_zero_reduces_to_weighted_cross_entropy() {
        let mut rng = rng_for(1, Stream::Misc { tag: 20 });
        let mut p = Array2::zeros((6, 2));
        let mut labels = Vec::new();
        for i in 0..6 {
            let a: f64 = rng.random_range(0.05..0.95);
            p[[i, 0]] = a;
            p[[i, 1]] = 1.0 - a;
            labels.push(i % 2);
        }
        let counts = [4usize, 2];
        let focal0 = classification_loss(&p.view(), &labels, &counts, 0.0).unwrap();
        let ce: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| -(p[[i, c]].ln()) / counts[c] as f64)
            .sum();
        assert!((focal0 - ce).abs() < 1e-7);
    }

    #[test]
    fn cluster_loss_zero_when_sample_matches_own_prototype() {
        // Sample 0 has similarity 1 with an own-class prototype.
        let s = arr2(&[[1.0f64, 0.2, -0.3, 0.1]]);
        let class_of = [0usize, 0, 1, 1];
        let (clst, _) =
            cluster_and_separation_loss(&s.view(), &[0], &class_of, &[1, 1]).unwrap();
        assert!(clst.abs() < 1e-12);
    }

    #[test]
    fn separation_at_cosine_lower_bound() {
        let s = arr2(&[[0.5f64, 0.4, -1.0, -1.0], [-1.0, -1.0, 0.9, 0.3]]);
        let class_of = [0usize, 0, 1, 1];
        let counts = [1usize, 1];
        let (_, sep) = cluster_and_separation_loss(&s.view(), &[0, 1], &class_of, &counts).unwrap();
        // All cross-class similarities are -1: sep = -sum(1/N^c).
        assert!((sep - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn cluster_separation_match_brute_force() {
        let mut rng = rng_for(2, Stream::Misc { tag: 20 });
        for _ in 0..100 {
            let b = 5;
            let k = 6;
            let class_of: Vec<usize> = (0..k).map(|i| i % 2).collect();
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..2usize)).collect();
            let counts = [3usize, 2];
            let s: Array2<f64> = Array2::from_shape_fn((b, k), |_| rng.random_range(-1.0..1.0));
            let (clst, sep) =
                cluster_and_separation_loss(&s.view(), &labels, &class_of, &counts).unwrap();

            // Exhaustive loop oracle.
            let mut bclst = 0.0;
            let mut bsep = 0.0;
            for (i, &c) in labels.iter().enumerate() {
                let mut own = f64::NEG_INFINITY;
                let mut other = f64::NEG_INFINITY;
                for ki in 0..k {
                    if class_of[ki] == c {
                        own = own.max(s[[i, ki]]);
                    } else {
                        other = other.max(s[[i, ki]]);
                    }
                }
                bclst += (1.0 - own) / counts[c] as f64;
                bsep += other / counts[c] as f64;
            }
            assert!((clst - bclst).abs() < 1e-12);
            assert!((sep - bsep).abs() < 1e-12);
        }
    }

    #[test]
    fn class_without_prototypes_is_config_error() {
        let s = arr2(&[[0.1f64, 0.2]]);
        let class_of = [0usize, 0];
        assert!(matches!(
            cluster_and_separation_loss(&s.view(), &[1], &class_of, &[1, 1]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mapping_loss_constant_maps() {
        let zeros = Array4::<f64>::zeros((2, 3, 3, 2));
        assert_eq!(mapping_loss(&[&zeros]), 0.0);
        let ones = Array4::<f64>::from_elem((2, 3, 3, 2), 1.0);
        assert!((mapping_loss(&[&ones]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mapping_loss_matches_summation_oracle() {
        let mut rng = rng_for(3, Stream::Misc { tag: 20 });
        let a = Array4::from_shape_fn((2, 2, 3, 2), |_| rng.random_range(-1.0f64..1.0));
        let b = Array4::from_shape_fn((2, 2, 3, 2), |_| rng.random_range(-1.0f64..1.0));
        let got = mapping_loss(&[&a, &b]);
        let want = a.iter().chain(b.iter()).map(|v| v.abs()).sum::<f64>() / (a.len() + b.len()) as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn l1_counts_only_cross_class_entries() {
        let class_of = [0usize, 1];
        let w = arr2(&[[1.0f64, 0.0], [0.0, 2.0]]);
        assert_eq!(l1_loss(&w.view(), &class_of), 0.0);
        let w2 = arr2(&[[1.0f64, -0.5], [0.0, 2.0]]);
        assert!((l1_loss(&w2.view(), &class_of) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn l1_matches_masked_sum() {
        let mut rng = rng_for(4, Stream::Misc { tag: 20 });
        let class_of: Vec<usize> = (0..8).map(|i| i / 4).collect();
        let w: Array2<f64> = Array2::from_shape_fn((8, 2), |_| rng.random_range(-2.0..2.0));
        let got = l1_loss(&w.view(), &class_of);
        let mut want = 0.0;
        for k in 0..8 {
            for c in 0..2 {
                if class_of[k] != c {
                    want += w[[k, c]].abs();
                }
            }
        }
        assert!((got - want).abs() < 1e-12);
    }

    // --- finite differences ------------------------------------------------

    fn fd_ok(fd: f64, an: f64) -> bool {
        ((fd - an) / fd.abs().max(an.abs()).max(1e-6)).abs() < 1e-4
    }

    #[test]
    fn classification_gradient_matches_fd() {
        let mut rng = rng_for(5, Stream::Misc { tag: 20 });
        let mut p = Array2::zeros((4, 2));
        for i in 0..4 {
            let a: f64 = rng.random_range(0.1..0.9);
            p[[i, 0]] = a;
            p[[i, 1]] = 1.0 - a;
        }
        let labels = [0usize, 1, 0, 1];
        let counts = [2usize, 2];
        let grad = classification_loss_backward(&p.view(), &labels, &counts, 2.0).unwrap();
        let eps = 1e-7;
        for idx in 0..p.len() {
            let mut a = p.clone();
            a.as_slice_mut().unwrap()[idx] += eps;
            let lp = classification_loss(&a.view(), &labels, &counts, 2.0).unwrap();
            a.as_slice_mut().unwrap()[idx] -= 2.0 * eps;
            let lm = classification_loss(&a.view(), &labels, &counts, 2.0).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            assert!(fd_ok(fd, grad.as_slice().unwrap()[idx]));
        }
    }

    #[test]
    fn cluster_separation_gradients_match_fd() {
        let mut rng = rng_for(6, Stream::Misc { tag: 20 });
        let class_of = [0usize, 0, 1, 1, 1];
        let labels = [0usize, 1, 1];
        let counts = [1usize, 2];
        let s: Array2<f64> = Array2::from_shape_fn((3, 5), |_| rng.random_range(-0.9..0.9));
        let (d_clst, d_sep) =
            cluster_separation_backward(&s.view(), &labels, &class_of, &counts).unwrap();
        let eps = 1e-7;
        for idx in 0..s.len() {
            let mut a = s.clone();
            a.as_slice_mut().unwrap()[idx] += eps;
            let (cp, sp) = cluster_and_separation_loss(&a.view(), &labels, &class_of, &counts).unwrap();
            a.as_slice_mut().unwrap()[idx] -= 2.0 * eps;
            let (cm, sm) = cluster_and_separation_loss(&a.view(), &labels, &class_of, &counts).unwrap();
            assert!(fd_ok((cp - cm) / (2.0 * eps), d_clst.as_slice().unwrap()[idx]));
            assert!(fd_ok((sp - sm) / (2.0 * eps), d_sep.as_slice().unwrap()[idx]));
        }
    }

    #[test]
    fn mapping_gradient_matches_fd() {
        let mut rng = rng_for(7, Stream::Misc { tag: 20 });
        let m0 = Array4::from_shape_fn((2, 2, 2, 2), |_| rng.random_range(0.05f64..1.0));
        let grad = mapping_loss_backward(&m0, m0.len());
        let eps = 1e-7;
        for idx in 0..m0.len() {
            let mut a = m0.clone();
            a.as_slice_mut().unwrap()[idx] += eps;
            let lp = mapping_loss(&[&a]);
            a.as_slice_mut().unwrap()[idx] -= 2.0 * eps;
            let lm = mapping_loss(&[&a]);
            assert!(fd_ok((lp - lm) / (2.0 * eps), grad.as_slice().unwrap()[idx]));
        }
    }

    #[test]
    fn l1_gradient_matches_fd_at_nonzero_entries() {
        let mut rng = rng_for(8, Stream::Misc { tag: 20 });
        let class_of = [0usize, 0, 1, 1];
        let w: Array2<f64> =
            Array2::from_shape_fn((4, 2), |_| rng.random_range(0.1..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 });
        let grad = l1_loss_backward(&w.view(), &class_of);
        let eps = 1e-7;
        for idx in 0..w.len() {
            let mut a = w.clone();
            a.as_slice_mut().unwrap()[idx] += eps;
            let lp = l1_loss(&a.view(), &class_of);
            a.as_slice_mut().unwrap()[idx] -= 2.0 * eps;
            let lm = l1_loss(&a.view(), &class_of);
            assert!(fd_ok((lp - lm) / (2.0 * eps), grad.as_slice().unwrap()[idx]));
        }
    }

    #[test]
    fn gradient_descent_drives_probability_to_one() {
        // Separable toy batch: minimizing the focal loss through a softmax
        // must monotonically raise p for the true class.
        let mut logits = ndarray::arr1(&[0.2f64, -0.1]);
        let counts = [1usize, 1];
        let mut last = f64::INFINITY;
        let mut p_true = 0.0;
        for _ in 0..3000 {
            let p = crate::network::ops::softmax(&logits.view());
            let l = classification_loss(
                &p.clone().insert_axis(ndarray::Axis(0)).view(),
                &[0],
                &counts,
                2.0,
            )
            .unwrap();
            assert!(l <= last + 1e-12, "loss must not increase: {l} > {last}");
            last = l;
            p_true = p[0];
            let dlogits = focal_grad_logits(&p.view(), 0, 1, 2.0);
            logits = &logits - &dlogits.mapv(|g| 0.5 * g);
        }
        assert!(p_true > 0.95, "p after descent = {p_true}");
    }
}
