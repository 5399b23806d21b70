//! Forward-path operations of the prototype network head, with analytic
//! backward passes. All functions are generic over the float type.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Dimension};

use crate::real::Real;

/// Sharpening constants of the soft-masking sigmoid.
pub const SOFT_MASK_OMEGA: f64 = 10.0;
pub const SOFT_MASK_SIGMA: f64 = 0.5;

/// Differentiable soft masking: `1 / (1 + exp(-omega * (m0 - sigma)))`,
/// sharpening attention values around `sigma`.
pub fn soft_mask_scalar<F: Real>(m0: F) -> F {
    let omega = F::c(SOFT_MASK_OMEGA);
    let sigma = F::c(SOFT_MASK_SIGMA);
    F::one() / (F::one() + (-omega * (m0 - sigma)).exp())
}

pub fn soft_mask<F: Real, D: Dimension>(m0: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    m0.mapv(soft_mask_scalar)
}

/// Backward of [`soft_mask`]: `dm0 = dm * omega * m * (1 - m)` where `m` is
/// the forward output.
pub fn soft_mask_backward<F: Real, D: Dimension>(
    grad_m: &ndarray::Array<F, D>,
    m: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let omega = F::c(SOFT_MASK_OMEGA);
    let mut out = grad_m.clone();
    out.zip_mut_with(m, |g, &mv| *g = *g * omega * mv * (F::one() - mv));
    out
}

/// Attention-weighted feature pooling: `H[k,e] = mean_v G[e,v] * M[k,v]`,
/// one embedding vector per prototype. `g` is `[E, V]`, `m` is `[K, V]`.
pub fn pool_features<F: Real>(g: &ArrayView2<F>, m: &ArrayView2<F>) -> Array2<F> {
    let v = F::c(g.ncols() as f64);
    m.dot(&g.t()).mapv(|x| x / v)
}

/// Backward of [`pool_features`]: returns `(dG, dM)` given `dH` of `[K, E]`.
pub fn pool_features_backward<F: Real>(
    grad_h: &ArrayView2<F>,
    g: &ArrayView2<F>,
    m: &ArrayView2<F>,
) -> (Array2<F>, Array2<F>) {
    let v = F::c(g.ncols() as f64);
    let dg = grad_h.t().dot(m).mapv(|x| x / v);
    let dm = grad_h.dot(g).mapv(|x| x / v);
    (dg, dm)
}

/// Cosine similarity, with the zero-vector convention `s = 0`.
pub fn cosine_similarity<F: Real>(h: &ArrayView1<F>, p: &ArrayView1<F>) -> F {
    let dot = h.dot(p);
    let nh = h.dot(h).sqrt();
    let np = p.dot(p).sqrt();
    if nh == F::zero() || np == F::zero() {
        return F::zero();
    }
    dot / (nh * np)
}

/// Backward of [`cosine_similarity`] for a single pair. Zero vectors
/// contribute no gradient.
pub fn cosine_backward<F: Real>(
    h: &ArrayView1<F>,
    p: &ArrayView1<F>,
    grad_s: F,
) -> (Array1<F>, Array1<F>) {
    let nh = h.dot(h).sqrt();
    let np = p.dot(p).sqrt();
    if nh == F::zero() || np == F::zero() {
        return (Array1::zeros(h.len()), Array1::zeros(p.len()));
    }
    let s = h.dot(p) / (nh * np);
    let dh = p.mapv(|pv| grad_s * (pv / (nh * np))) - h.mapv(|hv| grad_s * s * hv / (nh * nh));
    let dp = h.mapv(|hv| grad_s * (hv / (nh * np))) - p.mapv(|pv| grad_s * s * pv / (np * np));
    (dh, dp)
}

/// Per-prototype similarity vector: `s_k = cos(H_k, p_k)`.
pub fn similarity_vector<F: Real>(h: &ArrayView2<F>, protos: &ArrayView2<F>) -> Array1<F> {
    Array1::from_iter(
        h.rows()
            .into_iter()
            .zip(protos.rows())
            .map(|(hk, pk)| cosine_similarity(&hk, &pk)),
    )
}

/// Backward of [`similarity_vector`]: `(dH, dProtos)` given `dS` of `[K]`.
pub fn similarity_vector_backward<F: Real>(
    h: &ArrayView2<F>,
    protos: &ArrayView2<F>,
    grad_s: &ArrayView1<F>,
) -> (Array2<F>, Array2<F>) {
    let (k, e) = h.dim();
    let mut dh = Array2::zeros((k, e));
    let mut dp = Array2::zeros((k, e));
    for ki in 0..k {
        let (dhk, dpk) = cosine_backward(&h.row(ki), &protos.row(ki), grad_s[ki]);
        dh.row_mut(ki).assign(&dhk);
        dp.row_mut(ki).assign(&dpk);
    }
    (dh, dp)
}

/// Numerically stable softmax.
pub fn softmax<F: Real>(z: &ArrayView1<F>) -> Array1<F> {
    let max = z.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps = z.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps.mapv(|v| v / sum)
}

/// Backward through softmax: `dz_j = p_j * (dp_j - sum_i dp_i * p_i)`.
pub fn softmax_backward<F: Real>(p: &ArrayView1<F>, grad_p: &ArrayView1<F>) -> Array1<F> {
    let dot = p.dot(grad_p);
    Array1::from_iter(p.iter().zip(grad_p.iter()).map(|(&pv, &gv)| pv * (gv - dot)))
}

/// Classification head: `p = softmax(S . W_cls)`. Returns `(logits, p)`.
pub fn classify<F: Real>(s: &ArrayView1<F>, w_cls: &ArrayView2<F>) -> (Array1<F>, Array1<F>) {
    let logits = s.dot(w_cls);
    let p = softmax(&logits.view());
    (logits, p)
}

/// Backward of [`classify`] from `dL/dp`: returns `(dS, dW_cls)`.
pub fn classify_backward<F: Real>(
    s: &ArrayView1<F>,
    w_cls: &ArrayView2<F>,
    p: &ArrayView1<F>,
    grad_p: &ArrayView1<F>,
) -> (Array1<F>, Array2<F>) {
    let dz = softmax_backward(p, grad_p);
    classify_backward_from_logits(s, w_cls, &dz.view())
}

/// Backward of the linear head given `dL/dlogits` directly.
pub fn classify_backward_from_logits<F: Real>(
    s: &ArrayView1<F>,
    w_cls: &ArrayView2<F>,
    grad_logits: &ArrayView1<F>,
) -> (Array1<F>, Array2<F>) {
    let ds = w_cls.dot(grad_logits);
    let (k, c) = w_cls.dim();
    let mut dw = Array2::zeros((k, c));
    for ki in 0..k {
        for ci in 0..c {
            dw[[ki, ci]] = s[ki] * grad_logits[ci];
        }
    }
    (ds, dw)
}

/// Location-wise similarity with top-fraction average pooling, the
/// ProtoPNet-style scoring path. Returns the score vector, the pre-pooling
/// similarity field `[K, V]`, and the pooled location indices per prototype.
pub struct TopPoolSim<F> {
    pub s: Array1<F>,
    pub field: Array2<F>,
    pub top: Vec<Vec<u32>>,
}

pub fn protopnet_similarity<F: Real>(
    g: &ArrayView2<F>,
    protos: &ArrayView2<F>,
    alpha: f64,
) -> TopPoolSim<F> {
    let (k, _e) = protos.dim();
    let v = g.ncols();
    let m = (((alpha * v as f64).floor() as usize).max(1)).min(v);

    // Location norms are shared across prototypes.
    let loc_norm: Vec<F> = (0..v).map(|vi| g.column(vi).dot(&g.column(vi)).sqrt()).collect();

    let mut field = Array2::zeros((k, v));
    let mut s = Array1::zeros(k);
    let mut top = Vec::with_capacity(k);
    for ki in 0..k {
        let pk = protos.row(ki);
        let np = pk.dot(&pk).sqrt();
        for vi in 0..v {
            let denom = loc_norm[vi] * np;
            field[[ki, vi]] = if denom == F::zero() {
                F::zero()
            } else {
                g.column(vi).dot(&pk) / denom
            };
        }
        // Top-m by value, ties broken by the lower index.
        let mut order: Vec<u32> = (0..v as u32).collect();
        order.sort_unstable_by(|&a, &b| {
            field[[ki, b as usize]]
                .partial_cmp(&field[[ki, a as usize]])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(m);
        let mean = order
            .iter()
            .map(|&vi| field[[ki, vi as usize]])
            .fold(F::zero(), |a, b| a + b)
            / F::c(m as f64);
        s[ki] = mean;
        top.push(order);
    }
    TopPoolSim { s, field, top }
}

/// Backward of [`protopnet_similarity`]: gradients flow only through the
/// pooled locations, `1/m` each, then through the per-location cosine.
pub fn protopnet_similarity_backward<F: Real>(
    g: &ArrayView2<F>,
    protos: &ArrayView2<F>,
    sim: &TopPoolSim<F>,
    grad_s: &ArrayView1<F>,
) -> (Array2<F>, Array2<F>) {
    let (e, v) = g.dim();
    let k = protos.nrows();
    let mut dg = Array2::zeros((e, v));
    let mut dp = Array2::zeros((k, e));
    for ki in 0..k {
        let m = F::c(sim.top[ki].len() as f64);
        let gk = grad_s[ki] / m;
        if gk == F::zero() {
            continue;
        }
        for &vi in &sim.top[ki] {
            let col = g.column(vi as usize);
            let (dcol, dpk) = cosine_backward(&col, &protos.row(ki), gk);
            for ei in 0..e {
                dg[[ei, vi as usize]] = dg[[ei, vi as usize]] + dcol[ei];
            }
            for ei in 0..e {
                dp[[ki, ei]] = dp[[ki, ei]] + dpk[ei];
            }
        }
    }
    (dg, dp)
}
