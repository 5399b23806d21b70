//! Hand-rolled 3D layers with explicit forward/backward passes.
//!
//! Activations are `[C, H, W, D]` with D contiguous, so the innermost loops
//! run over contiguous rows and vectorize. Gradients are returned by value
//! (not accumulated in place), which keeps batch-parallel backward passes
//! free of shared mutable state.

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

/// A named weight tensor. Names are hierarchical ("backbone.stem.conv.w")
/// and index optimizer state, freeze sets, and checkpoints.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f32>) -> Param {
        Param { name: name.into(), value }
    }
}

/// Named gradients produced by one backward pass, aligned with parameter
/// names rather than positions.
#[derive(Debug, Default)]
pub struct GradSink {
    pub grads: Vec<(String, ArrayD<f32>)>,
}

impl GradSink {
    pub fn push(&mut self, name: &str, grad: ArrayD<f32>) {
        self.grads.push((name.to_string(), grad));
    }

    /// Sum another sink into this one (matching by name, appending new).
    pub fn merge(&mut self, other: GradSink) {
        for (name, grad) in other.grads {
            if let Some((_, g)) = self.grads.iter_mut().find(|(n, _)| *n == name) {
                *g += &grad;
            } else {
                self.grads.push((name, grad));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.grads.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }
}

fn kaiming_conv(rng: &mut ChaCha20Rng, shape: &[usize]) -> ArrayD<f32> {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng) as f32)
}

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight independent accumulators so the reduction
/// vectorizes without reassociation.
#[inline]
fn dot8(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let n8 = a.len() / 8 * 8;
    let mut i = 0;
    while i < n8 {
        for l in 0..8 {
            acc[l] += a[i + l] * b[i + l];
        }
        i += 8;
    }
    let mut s = 0.0;
    for v in acc {
        s += v;
    }
    for j in n8..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// Fused 3-tap row convolution: `acc[i] += w0*x[i] + w1*x[i+1] + w2*x[i+2]`.
#[inline]
fn conv_row3(acc: &mut [f32], x: &[f32], w0: f32, w1: f32, w2: f32) {
    let n = acc.len();
    debug_assert!(x.len() >= n + 2);
    for i in 0..n {
        acc[i] += w0 * x[i] + w1 * x[i + 1] + w2 * x[i + 2];
    }
}

/// Fused 3-tap row convolution over split phases (stride 2, k = 3):
/// even taps 0 and 2 read the even phase at offsets 0 and 1, tap 1 reads the
/// odd phase.
#[inline]
fn conv_row3_phased(acc: &mut [f32], even: &[f32], odd: &[f32], w0: f32, w1: f32, w2: f32) {
    let n = acc.len();
    debug_assert!(even.len() >= n + 1 && odd.len() >= n);
    for i in 0..n {
        acc[i] += w0 * even[i] + w1 * odd[i] + w2 * even[i + 1];
    }
}

/// Three shifted dot products in one pass:
/// `out[t] = sum_i g[i] * x[i + t]` for `t` in 0..3.
#[inline]
fn dot3(g: &[f32], x: &[f32]) -> [f32; 3] {
    let n = g.len();
    debug_assert!(x.len() >= n + 2);
    let mut a0 = [0.0f32; 8];
    let mut a1 = [0.0f32; 8];
    let mut a2 = [0.0f32; 8];
    let n8 = n / 8 * 8;
    let mut i = 0;
    while i < n8 {
        for l in 0..8 {
            let gv = g[i + l];
            a0[l] += gv * x[i + l];
            a1[l] += gv * x[i + l + 1];
            a2[l] += gv * x[i + l + 2];
        }
        i += 8;
    }
    let mut out = [a0.iter().sum(), a1.iter().sum(), a2.iter().sum::<f32>()];
    for j in n8..n {
        out[0] += g[j] * x[j];
        out[1] += g[j] * x[j + 1];
        out[2] += g[j] * x[j + 2];
    }
    out
}

/// Phase version of [`dot3`]: taps 0/2 against the even phase (offsets 0/1),
/// tap 1 against the odd phase.
#[inline]
fn dot3_phased(g: &[f32], even: &[f32], odd: &[f32]) -> [f32; 3] {
    let n = g.len();
    debug_assert!(even.len() >= n + 1 && odd.len() >= n);
    let mut a0 = [0.0f32; 8];
    let mut a1 = [0.0f32; 8];
    let mut a2 = [0.0f32; 8];
    let n8 = n / 8 * 8;
    let mut i = 0;
    while i < n8 {
        for l in 0..8 {
            let gv = g[i + l];
            a0[l] += gv * even[i + l];
            a1[l] += gv * odd[i + l];
            a2[l] += gv * even[i + l + 1];
        }
        i += 8;
    }
    let mut out = [a0.iter().sum(), a1.iter().sum(), a2.iter().sum::<f32>()];
    for j in n8..n {
        out[0] += g[j] * even[j];
        out[1] += g[j] * odd[j];
        out[2] += g[j] * even[j + 1];
    }
    out
}

// ---------------------------------------------------------------------------
// Conv3d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: Param,
    pub b: Option<Param>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    storage: ConvStorage,
}

enum ConvStorage {
    /// Stride-1: input with zero padding applied (or the raw input when
    /// pad = 0).
    Padded(Array4<f32>),
    /// Stride-2: even/odd depth phases of the padded input, so every inner
    /// loop reads contiguous rows.
    Phases { even: Array4<f32>, odd: Array4<f32>, padded_dim: (usize, usize, usize, usize) },
}

impl Conv3d {
    pub fn new(
        name: &str,
        rng: &mut ChaCha20Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Conv3d {
        let w = Param::new(
            format!("{name}.w"),
            kaiming_conv(rng, &[out_ch, in_ch, k, k, k]),
        );
        let b = bias.then(|| Param::new(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_ch]))));
        Conv3d { w, b, in_ch, out_ch, k, stride, pad: k / 2 }
    }

    pub fn out_shape(&self, x: (usize, usize, usize)) -> (usize, usize, usize) {
        let o = |n: usize| (n + 2 * self.pad - self.k) / self.stride + 1;
        (o(x.0), o(x.1), o(x.2))
    }

    fn pad_input(&self, x: &Array4<f32>) -> Array4<f32> {
        let (c, h, w, d) = x.dim();
        let p = self.pad;
        if p == 0 {
            return x.clone();
        }
        let mut xp = Array4::zeros((c, h + 2 * p, w + 2 * p, d + 2 * p));
        xp.slice_mut(ndarray::s![.., p..p + h, p..p + w, p..p + d])
            .assign(x);
        xp
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        self.forward_cached(x).0
    }

    /// Split a padded volume into even/odd depth phases.
    fn split_phases(xp: &Array4<f32>) -> (Array4<f32>, Array4<f32>) {
        let (c, hp, wp, dp) = xp.dim();
        let de = dp.div_ceil(2);
        let dov = dp / 2;
        let mut even = Array4::zeros((c, hp, wp, de));
        let mut odd = Array4::zeros((c, hp, wp, dov));
        let xs = xp.as_slice().unwrap();
        let es = even.as_slice_mut().unwrap();
        let os = odd.as_slice_mut().unwrap();
        for row in 0..c * hp * wp {
            let src = &xs[row * dp..row * dp + dp];
            let erow = &mut es[row * de..row * de + de];
            let orow = &mut os[row * dov..row * dov + dov];
            for (i, e) in erow.iter_mut().enumerate() {
                *e = src[2 * i];
            }
            for (i, o) in orow.iter_mut().enumerate() {
                *o = src[2 * i + 1];
            }
        }
        (even, odd)
    }

    pub fn forward_cached(&self, x: &Array4<f32>) -> (Array4<f32>, ConvCache) {
        assert_eq!(x.dim().0, self.in_ch, "{}: channel mismatch", self.w.name);
        debug_assert!(self.stride == 1 || self.stride == 2);
        if self.k == 1 && self.stride == 1 {
            let y = self.forward_1x1(x);
            return (y, ConvCache { storage: ConvStorage::Padded(x.clone()) });
        }
        let xp = self.pad_input(x);
        let (ho, wo, do_) = self.out_shape((x.dim().1, x.dim().2, x.dim().3));
        let mut out = Array4::zeros((self.out_ch, ho, wo, do_));

        let ws = self.w.value.as_slice().expect("weights are contiguous");
        let k = self.k;
        let plane = ho * wo * do_;
        let flops = self.out_ch * self.in_ch * k * k * k * plane;

        if self.stride == 1 {
            let (_, hp, wp, dp) = xp.dim();
            let xs = xp.as_slice().unwrap();
            let in_plane = hp * wp * dp;
            let body = |co: usize, o: &mut [f32]| {
                let bias = self.b.as_ref().map_or(0.0, |b| b.value.as_slice().unwrap()[co]);
                let mut acc = vec![0.0f32; do_];
                for h in 0..ho {
                    for wj in 0..wo {
                        acc.fill(bias);
                        for ci in 0..self.in_ch {
                            let xbase = ci * in_plane;
                            for kh in 0..k {
                                let hin = h + kh;
                                for kw in 0..k {
                                    let win = wj + kw;
                                    let wb = (((co * self.in_ch + ci) * k + kh) * k + kw) * k;
                                    let ibase = xbase + (hin * wp + win) * dp;
                                    if k == 3 {
                                        conv_row3(
                                            &mut acc,
                                            &xs[ibase..ibase + do_ + 2],
                                            ws[wb],
                                            ws[wb + 1],
                                            ws[wb + 2],
                                        );
                                    } else {
                                        for kd in 0..k {
                                            axpy(
                                                &mut acc,
                                                ws[wb + kd],
                                                &xs[ibase + kd..ibase + kd + do_],
                                            );
                                        }
                                    }
                                }
                            }
                        }
                        let obase = (h * wo + wj) * do_;
                        o[obase..obase + do_].copy_from_slice(&acc);
                    }
                }
            };
            let os = out.as_slice_mut().unwrap();
            if flops > 64_000_000 {
                os.par_chunks_mut(plane).enumerate().for_each(|(co, o)| body(co, o));
            } else {
                for (co, o) in os.chunks_mut(plane).enumerate() {
                    body(co, o);
                }
            }
            (out, ConvCache { storage: ConvStorage::Padded(xp) })
        } else {
            let padded_dim = xp.dim();
            let (even, odd) = Self::split_phases(&xp);
            drop(xp);
            let (_, hp, wp, de) = even.dim();
            let dov = odd.dim().3;
            let es = even.as_slice().unwrap();
            let osl = odd.as_slice().unwrap();
            let body = |co: usize, o: &mut [f32]| {
                let bias = self.b.as_ref().map_or(0.0, |b| b.value.as_slice().unwrap()[co]);
                let mut acc = vec![0.0f32; do_];
                for h in 0..ho {
                    for wj in 0..wo {
                        acc.fill(bias);
                        for ci in 0..self.in_ch {
                            for kh in 0..k {
                                let hin = 2 * h + kh;
                                for kw in 0..k {
                                    let win = 2 * wj + kw;
                                    let wb = (((co * self.in_ch + ci) * k + kh) * k + kw) * k;
                                    let row = (ci * hp + hin) * wp + win;
                                    if k == 3 {
                                        conv_row3_phased(
                                            &mut acc,
                                            &es[row * de..row * de + do_ + 1],
                                            &osl[row * dov..row * dov + do_],
                                            ws[wb],
                                            ws[wb + 1],
                                            ws[wb + 2],
                                        );
                                    } else {
                                        for kd in 0..k {
                                            let (phase, dlen) =
                                                if kd % 2 == 0 { (es, de) } else { (osl, dov) };
                                            let ibase = row * dlen + kd / 2;
                                            axpy(&mut acc, ws[wb + kd], &phase[ibase..ibase + do_]);
                                        }
                                    }
                                }
                            }
                        }
                        let obase = (h * wo + wj) * do_;
                        o[obase..obase + do_].copy_from_slice(&acc);
                    }
                }
            };
            let os = out.as_slice_mut().unwrap();
            if flops > 64_000_000 {
                os.par_chunks_mut(plane).enumerate().for_each(|(co, o)| body(co, o));
            } else {
                for (co, o) in os.chunks_mut(plane).enumerate() {
                    body(co, o);
                }
            }
            (out, ConvCache { storage: ConvStorage::Phases { even, odd, padded_dim } })
        }
    }

    /// 1x1x1 convolution as a channel-mixing matmul.
    fn forward_1x1(&self, x: &Array4<f32>) -> Array4<f32> {
        let (c, h, w, d) = x.dim();
        let v = h * w * d;
        let x2 = x.view().into_shape_with_order((c, v)).unwrap();
        let w2 = self
            .w
            .value
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch))
            .unwrap();
        let mut y2 = w2.dot(&x2);
        if let Some(b) = &self.b {
            let bs = b.value.as_slice().unwrap();
            for (mut row, bv) in y2.rows_mut().into_iter().zip(bs) {
                row += *bv;
            }
        }
        y2.into_shape_with_order((self.out_ch, h, w, d)).unwrap()
    }

    /// Backward pass. Returns the input gradient (when requested) and pushes
    /// weight gradients into `sink`.
    pub fn backward(
        &self,
        grad_out: &Array4<f32>,
        cache: &ConvCache,
        need_dx: bool,
        sink: &mut GradSink,
    ) -> Option<Array4<f32>> {
        if self.k == 1 && self.stride == 1 {
            return self.backward_1x1(grad_out, cache, need_dx, sink);
        }
        match &cache.storage {
            ConvStorage::Padded(xp) => self.backward_s1(grad_out, xp, need_dx, sink),
            ConvStorage::Phases { even, odd, padded_dim } => {
                self.backward_s2(grad_out, even, odd, *padded_dim, need_dx, sink)
            }
        }
    }

    fn backward_s1(
        &self,
        grad_out: &Array4<f32>,
        xp: &Array4<f32>,
        need_dx: bool,
        sink: &mut GradSink,
    ) -> Option<Array4<f32>> {
        let (_, hp, wp, dp) = xp.dim();
        let (_, ho, wo, do_) = grad_out.dim();
        let k = self.k;
        let in_plane = hp * wp * dp;
        let plane = ho * wo * do_;
        let xs = xp.as_slice().unwrap();
        let gs = grad_out.as_slice().unwrap();
        let flops = self.out_ch * self.in_ch * k * k * k * plane;

        let mut dw = ArrayD::<f32>::zeros(self.w.value.raw_dim());
        let wchunk = self.in_ch * k * k * k;
        {
            let dws = dw.as_slice_mut().unwrap();
            let body = |co: usize, dwc: &mut [f32]| {
                let gbase = co * plane;
                for h in 0..ho {
                    for wj in 0..wo {
                        let go = gbase + (h * wo + wj) * do_;
                        let grow = &gs[go..go + do_];
                        for ci in 0..self.in_ch {
                            let xbase = ci * in_plane;
                            for kh in 0..k {
                                let hin = h + kh;
                                for kw in 0..k {
                                    let win = wj + kw;
                                    let tap = ((ci * k + kh) * k + kw) * k;
                                    let ibase = xbase + (hin * wp + win) * dp;
                                    if k == 3 {
                                        let d = dot3(grow, &xs[ibase..ibase + do_ + 2]);
                                        dwc[tap] += d[0];
                                        dwc[tap + 1] += d[1];
                                        dwc[tap + 2] += d[2];
                                    } else {
                                        for kd in 0..k {
                                            dwc[tap + kd] +=
                                                dot8(grow, &xs[ibase + kd..ibase + kd + do_]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            };
            if flops > 64_000_000 {
                dws.par_chunks_mut(wchunk).enumerate().for_each(|(co, c)| body(co, c));
            } else {
                for (co, c) in dws.chunks_mut(wchunk).enumerate() {
                    body(co, c);
                }
            }
        }
        sink.push(&self.w.name, dw);
        self.push_bias_grad(grad_out, plane, sink);

        if !need_dx {
            return None;
        }
        let ws = self.w.value.as_slice().unwrap();
        let mut dxp = Array4::<f32>::zeros(xp.raw_dim());
        {
            let dxs = dxp.as_slice_mut().unwrap();
            let body = |ci: usize, dxc: &mut [f32]| {
                for co in 0..self.out_ch {
                    let gbase = co * plane;
                    for kh in 0..k {
                        for kw in 0..k {
                            for kd in 0..k {
                                let wv = ws[(((co * self.in_ch + ci) * k + kh) * k + kw) * k + kd];
                                for h in 0..ho {
                                    let hin = h + kh;
                                    for wj in 0..wo {
                                        let win = wj + kw;
                                        let go = gbase + (h * wo + wj) * do_;
                                        let ibase = (hin * wp + win) * dp + kd;
                                        axpy(&mut dxc[ibase..ibase + do_], wv, &gs[go..go + do_]);
                                    }
                                }
                            }
                        }
                    }
                }
            };
            if flops > 64_000_000 {
                dxs.par_chunks_mut(in_plane).enumerate().for_each(|(ci, c)| body(ci, c));
            } else {
                for (ci, c) in dxs.chunks_mut(in_plane).enumerate() {
                    body(ci, c);
                }
            }
        }
        Some(self.crop_padding(dxp))
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_s2(
        &self,
        grad_out: &Array4<f32>,
        even: &Array4<f32>,
        odd: &Array4<f32>,
        padded_dim: (usize, usize, usize, usize),
        need_dx: bool,
        sink: &mut GradSink,
    ) -> Option<Array4<f32>> {
        let (_, hp, wp, de) = even.dim();
        let dov = odd.dim().3;
        let (_, ho, wo, do_) = grad_out.dim();
        let k = self.k;
        let plane = ho * wo * do_;
        let es = even.as_slice().unwrap();
        let osl = odd.as_slice().unwrap();
        let gs = grad_out.as_slice().unwrap();
        let flops = self.out_ch * self.in_ch * k * k * k * plane;

        let mut dw = ArrayD::<f32>::zeros(self.w.value.raw_dim());
        let wchunk = self.in_ch * k * k * k;
        {
            let dws = dw.as_slice_mut().unwrap();
            let body = |co: usize, dwc: &mut [f32]| {
                let gbase = co * plane;
                for h in 0..ho {
                    for wj in 0..wo {
                        let go = gbase + (h * wo + wj) * do_;
                        let grow = &gs[go..go + do_];
                        for ci in 0..self.in_ch {
                            for kh in 0..k {
                                let hin = 2 * h + kh;
                                for kw in 0..k {
                                    let win = 2 * wj + kw;
                                    let tap = ((ci * k + kh) * k + kw) * k;
                                    let row = (ci * hp + hin) * wp + win;
                                    if k == 3 {
                                        let d = dot3_phased(
                                            grow,
                                            &es[row * de..row * de + do_ + 1],
                                            &osl[row * dov..row * dov + do_],
                                        );
                                        dwc[tap] += d[0];
                                        dwc[tap + 1] += d[1];
                                        dwc[tap + 2] += d[2];
                                    } else {
                                        for kd in 0..k {
                                            let (phase, dlen) =
                                                if kd % 2 == 0 { (es, de) } else { (osl, dov) };
                                            let ibase = row * dlen + kd / 2;
                                            dwc[tap + kd] +=
                                                dot8(grow, &phase[ibase..ibase + do_]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            };
            if flops > 64_000_000 {
                dws.par_chunks_mut(wchunk).enumerate().for_each(|(co, c)| body(co, c));
            } else {
                for (co, c) in dws.chunks_mut(wchunk).enumerate() {
                    body(co, c);
                }
            }
        }
        sink.push(&self.w.name, dw);
        self.push_bias_grad(grad_out, plane, sink);

        if !need_dx {
            return None;
        }
        // Accumulate phase gradients with contiguous writes, then interleave.
        let ws = self.w.value.as_slice().unwrap();
        let mut d_even = Array4::<f32>::zeros(even.raw_dim());
        let mut d_odd = Array4::<f32>::zeros(odd.raw_dim());
        {
            let devs = d_even.as_slice_mut().unwrap();
            let dods = d_odd.as_slice_mut().unwrap();
            // Split per channel so the parallel loop owns disjoint slices.
            let eplane = hp * wp * de;
            let oplane = hp * wp * dov;
            let pairs: Vec<(usize, (&mut [f32], &mut [f32]))> = devs
                .chunks_mut(eplane)
                .zip(dods.chunks_mut(oplane))
                .enumerate()
                .map(|(ci, (a, b))| (ci, (a, b)))
                .collect();
            let body = |ci: usize, dev: &mut [f32], dod: &mut [f32]| {
                for co in 0..self.out_ch {
                    let gbase = co * plane;
                    for kh in 0..k {
                        for kw in 0..k {
                            for kd in 0..k {
                                let wv = ws[(((co * self.in_ch + ci) * k + kh) * k + kw) * k + kd];
                                let off = kd / 2;
                                for h in 0..ho {
                                    let hin = 2 * h + kh;
                                    for wj in 0..wo {
                                        let win = 2 * wj + kw;
                                        let go = gbase + (h * wo + wj) * do_;
                                        if kd % 2 == 0 {
                                            let ibase = (hin * wp + win) * de + off;
                                            axpy(
                                                &mut dev[ibase..ibase + do_],
                                                wv,
                                                &gs[go..go + do_],
                                            );
                                        } else {
                                            let ibase = (hin * wp + win) * dov + off;
                                            axpy(
                                                &mut dod[ibase..ibase + do_],
                                                wv,
                                                &gs[go..go + do_],
                                            );
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            };
            if flops > 64_000_000 {
                pairs
                    .into_par_iter()
                    .for_each(|(ci, (dev, dod))| body(ci, dev, dod));
            } else {
                for (ci, (dev, dod)) in pairs {
                    body(ci, dev, dod);
                }
            }
        }
        // Interleave phases back into padded coordinates and crop.
        let mut dxp = Array4::<f32>::zeros(padded_dim);
        {
            let (c, hpx, wpx, dp) = padded_dim;
            let dxs = dxp.as_slice_mut().unwrap();
            let devs = d_even.as_slice().unwrap();
            let dods = d_odd.as_slice().unwrap();
            for row in 0..c * hpx * wpx {
                let dst = &mut dxs[row * dp..row * dp + dp];
                let erow = &devs[row * de..row * de + de];
                let orow = &dods[row * dov..row * dov + dov];
                for (i, &e) in erow.iter().enumerate() {
                    dst[2 * i] = e;
                }
                for (i, &o) in orow.iter().enumerate() {
                    dst[2 * i + 1] = o;
                }
            }
        }
        Some(self.crop_padding(dxp))
    }

    fn push_bias_grad(&self, grad_out: &Array4<f32>, plane: usize, sink: &mut GradSink) {
        if let Some(b) = &self.b {
            let gs = grad_out.as_slice().unwrap();
            let mut db = Array1::<f32>::zeros(self.out_ch);
            for co in 0..self.out_ch {
                db[co] = gs[co * plane..(co + 1) * plane].iter().sum();
            }
            sink.push(&b.name, db.into_dyn());
        }
    }

    fn crop_padding(&self, dxp: Array4<f32>) -> Array4<f32> {
        let p = self.pad;
        if p == 0 {
            return dxp;
        }
        let (_, hp, wp, dp) = dxp.dim();
        let (h, w, d) = (hp - 2 * p, wp - 2 * p, dp - 2 * p);
        dxp.slice(ndarray::s![.., p..p + h, p..p + w, p..p + d]).to_owned()
    }

    fn backward_1x1(
        &self,
        grad_out: &Array4<f32>,
        cache: &ConvCache,
        need_dx: bool,
        sink: &mut GradSink,
    ) -> Option<Array4<f32>> {
        let x = match &cache.storage {
            ConvStorage::Padded(x) => x,
            ConvStorage::Phases { .. } => unreachable!("1x1 stride-1 caches the raw input"),
        };
        let (c, h, w, d) = x.dim();
        let v = h * w * d;
        let x2 = x.view().into_shape_with_order((c, v)).unwrap();
        let g2 = grad_out.view().into_shape_with_order((self.out_ch, v)).unwrap();

        let dw = g2.dot(&x2.t());
        sink.push(
            &self.w.name,
            dw.into_dyn().into_shape_with_order(self.w.value.raw_dim()).unwrap(),
        );
        if let Some(b) = &self.b {
            let db: Array1<f32> = g2.rows().into_iter().map(|r| r.sum()).collect();
            sink.push(&b.name, db.into_dyn());
        }
        if !need_dx {
            return None;
        }
        let w2 = self
            .w
            .value
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch))
            .unwrap();
        let dx2 = w2.t().dot(&g2);
        Some(dx2.into_shape_with_order((c, h, w, d)).unwrap())
    }

    pub fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.w);
        if let Some(b) = &self.b {
            out.push(b);
        }
    }

    pub fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.w);
        if let Some(b) = &mut self.b {
            out.push(b);
        }
    }
}

// ---------------------------------------------------------------------------
// InstanceNorm3d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct InstanceNorm3d {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

pub struct NormCache {
    xhat: Array4<f32>,
    inv_std: Vec<f64>,
}

impl InstanceNorm3d {
    pub fn new(name: &str, channels: usize) -> InstanceNorm3d {
        InstanceNorm3d {
            gamma: Param::new(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), 1.0)),
            beta: Param::new(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array4<f32>) -> (Array4<f32>, NormCache) {
        let (c, h, w, d) = x.dim();
        let v = (h * w * d) as f64;
        let mut xhat = Array4::zeros(x.raw_dim());
        let mut out = Array4::zeros(x.raw_dim());
        let mut inv_std = Vec::with_capacity(c);
        let gs = self.gamma.value.as_slice().unwrap();
        let bs = self.beta.value.as_slice().unwrap();
        for ci in 0..c {
            let xc = x.index_axis(ndarray::Axis(0), ci);
            let mean = xc.iter().map(|&x| x as f64).sum::<f64>() / v;
            let var = xc.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / v;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std.push(inv);
            let (g, b) = (gs[ci] as f64, bs[ci] as f64);
            let mut xh = xhat.index_axis_mut(ndarray::Axis(0), ci);
            let mut oc = out.index_axis_mut(ndarray::Axis(0), ci);
            for ((xh, oc), &xv) in xh.iter_mut().zip(oc.iter_mut()).zip(xc.iter()) {
                let n = (xv as f64 - mean) * inv;
                *xh = n as f32;
                *oc = (g * n + b) as f32;
            }
        }
        (out, NormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        grad_out: &Array4<f32>,
        cache: &NormCache,
        sink: &mut GradSink,
    ) -> Array4<f32> {
        let (c, h, w, d) = grad_out.dim();
        let v = (h * w * d) as f64;
        let mut dx = Array4::zeros(grad_out.raw_dim());
        let mut dgamma = Array1::<f32>::zeros(c);
        let mut dbeta = Array1::<f32>::zeros(c);
        let gs = self.gamma.value.as_slice().unwrap();
        for ci in 0..c {
            let dy = grad_out.index_axis(ndarray::Axis(0), ci);
            let xh = cache.xhat.index_axis(ndarray::Axis(0), ci);
            let sum_dy = dy.iter().map(|&g| g as f64).sum::<f64>();
            let sum_dy_xh = dy
                .iter()
                .zip(xh.iter())
                .map(|(&g, &x)| g as f64 * x as f64)
                .sum::<f64>();
            dbeta[ci] = sum_dy as f32;
            dgamma[ci] = sum_dy_xh as f32;
            let scale = gs[ci] as f64 * cache.inv_std[ci];
            let m_dy = sum_dy / v;
            let m_dy_xh = sum_dy_xh / v;
            let mut dxc = dx.index_axis_mut(ndarray::Axis(0), ci);
            for ((dxv, &dyv), &xhv) in dxc.iter_mut().zip(dy.iter()).zip(xh.iter()) {
                *dxv = (scale * (dyv as f64 - m_dy - xhv as f64 * m_dy_xh)) as f32;
            }
        }
        sink.push(&self.gamma.name, dgamma.into_dyn());
        sink.push(&self.beta.name, dbeta.into_dyn());
        dx
    }

    pub fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }

    pub fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// Activations and pooling
// ---------------------------------------------------------------------------

/// ReLU. The cache is the output itself.
pub fn relu(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(grad_out: &Array4<f32>, y: &Array4<f32>) -> Array4<f32> {
    let mut dx = grad_out.clone();
    dx.zip_mut_with(y, |g, &yv| {
        if yv <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

/// Elementwise logistic sigmoid. The cache is the output itself.
pub fn sigmoid(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward(grad_out: &Array4<f32>, y: &Array4<f32>) -> Array4<f32> {
    let mut dx = grad_out.clone();
    dx.zip_mut_with(y, |g, &yv| *g *= yv * (1.0 - yv));
    dx
}

/// 3x3x3 max pooling with stride 2 and padding 1.
pub struct MaxPool3d;

pub struct PoolCache {
    /// Flat input index of each output voxel's maximum.
    argmax: Vec<u32>,
    in_dim: (usize, usize, usize, usize),
}

impl MaxPool3d {
    pub fn out_shape(x: (usize, usize, usize)) -> (usize, usize, usize) {
        let o = |n: usize| (n + 2 - 3) / 2 + 1;
        (o(x.0), o(x.1), o(x.2))
    }

    pub fn forward(x: &Array4<f32>) -> Array4<f32> {
        Self::forward_cached(x).0
    }

    pub fn forward_cached(x: &Array4<f32>) -> (Array4<f32>, PoolCache) {
        let (c, h, w, d) = x.dim();
        let (ho, wo, do_) = Self::out_shape((h, w, d));
        let xs = x.as_slice().unwrap();
        let mut out = Array4::zeros((c, ho, wo, do_));
        let mut argmax = vec![0u32; c * ho * wo * do_];
        let os = out.as_slice_mut().unwrap();
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    for kk in 0..do_ {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for dh in 0..3usize {
                            let hi = (i * 2 + dh) as i64 - 1;
                            if hi < 0 || hi >= h as i64 {
                                continue;
                            }
                            for dw in 0..3usize {
                                let wi = (j * 2 + dw) as i64 - 1;
                                if wi < 0 || wi >= w as i64 {
                                    continue;
                                }
                                for dd in 0..3usize {
                                    let di = (kk * 2 + dd) as i64 - 1;
                                    if di < 0 || di >= d as i64 {
                                        continue;
                                    }
                                    let idx = ((ci * h + hi as usize) * w + wi as usize) * d
                                        + di as usize;
                                    let v = xs[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx as u32;
                                    }
                                }
                            }
                        }
                        let oidx = ((ci * ho + i) * wo + j) * do_ + kk;
                        os[oidx] = best;
                        argmax[oidx] = best_idx;
                    }
                }
            }
        }
        (out, PoolCache { argmax, in_dim: (c, h, w, d) })
    }

    pub fn backward(grad_out: &Array4<f32>, cache: &PoolCache) -> Array4<f32> {
        let mut dx = Array4::zeros(cache.in_dim);
        let dxs = dx.as_slice_mut().unwrap();
        for (g, &idx) in grad_out.as_slice().unwrap().iter().zip(&cache.argmax) {
            dxs[idx as usize] += g;
        }
        dx
    }
}

/// Global average pooling over the spatial grid: `[C,H,W,D] -> [C]`.
pub fn global_avg_pool(x: &Array4<f32>) -> Array1<f32> {
    let (c, h, w, d) = x.dim();
    let v = (h * w * d) as f32;
    let x2 = x.view().into_shape_with_order((c, h * w * d)).unwrap();
    x2.rows().into_iter().map(|r| r.sum() / v).collect()
}

pub fn global_avg_pool_backward(grad_out: &Array1<f32>, dim: (usize, usize, usize, usize)) -> Array4<f32> {
    let (c, h, w, d) = dim;
    let v = (h * w * d) as f32;
    let mut dx = Array4::zeros(dim);
    for ci in 0..c {
        let g = grad_out[ci] / v;
        dx.index_axis_mut(ndarray::Axis(0), ci).fill(g);
    }
    dx
}

/// Uniform(0, 1) initialization used for prototype vectors.
pub fn uniform_init(rng: &mut ChaCha20Rng, shape: &[usize]) -> ArrayD<f32> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(0.0..1.0))
}

/// Matrix of shape `[rows, cols]` with Kaiming-style init for linear maps.
pub fn linear_init(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f32> {
    let std = (2.0 / rows as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, Stream};

    fn rand_x(rng: &mut ChaCha20Rng, c: usize, h: usize, w: usize, d: usize) -> Array4<f32> {
        Array4::from_shape_fn((c, h, w, d), |_| rng.random_range(-1.0f32..1.0))
    }

    /// Central finite differences of a scalar projection of a layer's output
    /// with respect to `param`, compared against the analytic gradient.
    fn check_conv_grads(conv: &Conv3d, x: &Array4<f32>, tol: f32) {
        let proj = {
            let y = conv.forward(x);
            Array4::from_shape_fn(y.raw_dim(), |_| 1.0f32)
                .indexed_iter()
                .map(|(idx, _)| {
                    let (a, b, c, d) = (idx.0, idx.1, idx.2, idx.3);
                    ((a * 31 + b * 17 + c * 7 + d) % 13) as f32 / 13.0 - 0.5
                })
                .collect::<Vec<f32>>()
        };
        let loss = |conv: &Conv3d, x: &Array4<f32>| -> f64 {
            let y = conv.forward(x);
            y.iter().zip(&proj).map(|(&a, &b)| a as f64 * b as f64).sum()
        };

        let (y, cache) = conv.forward_cached(x);
        let grad_out = Array4::from_shape_vec(y.raw_dim(), proj.clone()).unwrap();
        let mut sink = GradSink::default();
        let dx = conv.backward(&grad_out, &cache, true, &mut sink).unwrap();
        let dw = sink.get(&conv.w.name).unwrap().clone();

        let mut conv_p = conv.clone();
        let eps = 1e-2f32;
        for idx in [0usize, dw.len() / 2, dw.len() - 1] {
            let orig = conv.w.value.as_slice().unwrap()[idx];
            conv_p.w.value.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = loss(&conv_p, x);
            conv_p.w.value.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = loss(&conv_p, x);
            conv_p.w.value.as_slice_mut().unwrap()[idx] = orig;
            let fd = ((lp - lm) / (2.0 * eps as f64)) as f32;
            let an = dw.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs().max(an.abs())),
                "dW[{idx}]: fd={fd} analytic={an}"
            );
        }
        let mut xp = x.clone();
        for idx in [0usize, x.len() / 2, x.len() - 1] {
            let orig = x.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = loss(conv, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = loss(conv, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            let fd = ((lp - lm) / (2.0 * eps as f64)) as f32;
            let an = dx.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs().max(an.abs())),
                "dX[{idx}]: fd={fd} analytic={an}"
            );
        }
    }

    #[test]
    fn conv3d_stride1_gradients_match_fd() {
        let mut rng = rng_for(1, Stream::Misc { tag: 1 });
        let conv = Conv3d::new("c", &mut rng, 2, 3, 3, 1, true);
        let x = rand_x(&mut rng, 2, 5, 4, 6);
        check_conv_grads(&conv, &x, 2e-2);
    }

    #[test]
    fn conv3d_stride2_gradients_match_fd() {
        let mut rng = rng_for(2, Stream::Misc { tag: 1 });
        let conv = Conv3d::new("c", &mut rng, 2, 4, 3, 2, false);
        let x = rand_x(&mut rng, 2, 6, 6, 8);
        check_conv_grads(&conv, &x, 2e-2);
    }

    #[test]
    fn conv1x1_gradients_match_fd() {
        let mut rng = rng_for(3, Stream::Misc { tag: 1 });
        let conv = Conv3d::new("c", &mut rng, 3, 2, 1, 1, true);
        let x = rand_x(&mut rng, 3, 4, 3, 5);
        check_conv_grads(&conv, &x, 2e-2);
    }

    #[test]
    fn conv1x1_matches_direct_matmul() {
        let mut rng = rng_for(4, Stream::Misc { tag: 1 });
        let conv = Conv3d::new("c", &mut rng, 3, 2, 1, 1, true);
        let x = rand_x(&mut rng, 3, 2, 2, 2);
        let y = conv.forward(&x);
        for co in 0..2 {
            for idx in [(0, 0, 0), (1, 1, 1)] {
                let mut want = conv.b.as_ref().unwrap().value.as_slice().unwrap()[co];
                for ci in 0..3 {
                    want += conv.w.value[[co, ci, 0, 0, 0]] * x[[ci, idx.0, idx.1, idx.2]];
                }
                assert!((y[[co, idx.0, idx.1, idx.2]] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn instance_norm_normalizes_and_gradients_match_fd() {
        let mut rng = rng_for(5, Stream::Misc { tag: 1 });
        let mut norm = InstanceNorm3d::new("n", 3);
        for v in norm.gamma.value.iter_mut() {
            *v = rng.random_range(0.5f32..1.5);
        }
        for v in norm.beta.value.iter_mut() {
            *v = rng.random_range(-0.5f32..0.5);
        }
        let x = rand_x(&mut rng, 3, 4, 4, 3);
        let (y, cache) = norm.forward_cached(&x);

        // Per-channel standardization before the affine map.
        for ci in 0..3 {
            let xh = cache.xhat.index_axis(ndarray::Axis(0), ci);
            let mean: f64 = xh.iter().map(|&v| v as f64).sum::<f64>() / xh.len() as f64;
            assert!(mean.abs() < 1e-5);
        }

        let proj: Vec<f32> = (0..y.len()).map(|i| ((i % 7) as f32 - 3.0) / 7.0).collect();
        let loss = |norm: &InstanceNorm3d, x: &Array4<f32>| -> f64 {
            norm.forward(x)
                .iter()
                .zip(&proj)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        let grad_out = Array4::from_shape_vec(y.raw_dim(), proj.clone()).unwrap();
        let mut sink = GradSink::default();
        let dx = norm.backward(&grad_out, &cache, &mut sink);

        let eps = 1e-2f32;
        let mut xp = x.clone();
        for idx in [0usize, x.len() / 3, x.len() - 1] {
            let orig = x.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = loss(&norm, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = loss(&norm, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            let fd = ((lp - lm) / (2.0 * eps as f64)) as f32;
            let an = dx.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() <= 2e-2 * (1.0 + fd.abs().max(an.abs())),
                "dX[{idx}]: fd={fd} analytic={an}"
            );
        }
        // dgamma via FD.
        let dgamma = sink.get(&norm.gamma.name).unwrap().clone();
        let orig = norm.gamma.value.as_slice().unwrap()[1];
        norm.gamma.value.as_slice_mut().unwrap()[1] = orig + eps;
        let lp = loss(&norm, &x);
        norm.gamma.value.as_slice_mut().unwrap()[1] = orig - eps;
        let lm = loss(&norm, &x);
        norm.gamma.value.as_slice_mut().unwrap()[1] = orig;
        let fd = ((lp - lm) / (2.0 * eps as f64)) as f32;
        assert!((fd - dgamma.as_slice().unwrap()[1]).abs() < 2e-2 * (1.0 + fd.abs()));
    }

    #[test]
    fn maxpool_halves_spatial_dims_and_routes_gradients() {
        let mut rng = rng_for(6, Stream::Misc { tag: 1 });
        let x = rand_x(&mut rng, 2, 8, 8, 6);
        let (y, cache) = MaxPool3d::forward_cached(&x);
        assert_eq!(y.dim(), (2, 4, 4, 3));
        // Every output value exists somewhere in its input window.
        assert!(y.iter().all(|v| x.iter().any(|xv| xv == v)));

        let grad_out = Array4::from_elem(y.raw_dim(), 1.0f32);
        let dx = MaxPool3d::backward(&grad_out, &cache);
        assert_eq!(dx.dim(), x.dim());
        let total: f32 = dx.sum();
        assert_eq!(total, y.len() as f32);
    }

    #[test]
    fn relu_and_sigmoid_backward_match_fd() {
        let mut rng = rng_for(7, Stream::Misc { tag: 1 });
        let x = rand_x(&mut rng, 1, 3, 3, 3);
        let y = sigmoid(&x);
        let grad_out = Array4::from_elem(y.raw_dim(), 1.0f32);
        let dx = sigmoid_backward(&grad_out, &y);
        let eps = 1e-3f64;
        for idx in [0usize, 13, 26] {
            let orig = x.as_slice().unwrap()[idx] as f64;
            let f = |v: f64| 1.0 / (1.0 + (-v).exp());
            let fd = (f(orig + eps) - f(orig - eps)) / (2.0 * eps);
            assert!((fd - dx.as_slice().unwrap()[idx] as f64).abs() < 1e-4);
        }
        let yr = relu(&x);
        let dxr = relu_backward(&grad_out, &yr);
        for (i, &xv) in x.as_slice().unwrap().iter().enumerate() {
            let expect = if xv > 0.0 { 1.0 } else { 0.0 };
            assert_eq!(dxr.as_slice().unwrap()[i], expect);
        }
    }

    #[test]
    fn global_avg_pool_is_mean_per_channel() {
        let mut rng = rng_for(8, Stream::Misc { tag: 1 });
        let x = rand_x(&mut rng, 3, 2, 2, 2);
        let y = global_avg_pool(&x);
        for ci in 0..3 {
            let want: f32 = x.index_axis(ndarray::Axis(0), ci).sum() / 8.0;
            assert!((y[ci] - want).abs() < 1e-6);
        }
        let dy = Array1::from_vec(vec![8.0, 16.0, 24.0]);
        let dx = global_avg_pool_backward(&dy, x.dim());
        assert_eq!(dx[[0, 0, 0, 0]], 1.0);
        assert_eq!(dx[[1, 0, 0, 0]], 2.0);
        assert_eq!(dx[[2, 1, 1, 1]], 3.0);
    }
}
