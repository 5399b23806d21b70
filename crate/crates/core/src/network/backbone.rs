//! 3D residual feature extractor: stem convolution, max pooling, and two
//! residual stages with a fixed 8x spatial downsampling, so a 128x128x96
//! input always maps to a 16x16x12 feature grid regardless of widths.

use ndarray::Array4;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::nn::{
    relu, relu_backward, Conv3d, ConvCache, GradSink, InstanceNorm3d, MaxPool3d, NormCache, Param,
    PoolCache,
};
use crate::error::{Error, Result};

/// One residual stage: `blocks` blocks of `out_channels`, the first carrying
/// the stage stride. `bottleneck_channels` selects 1-3-1 bottleneck blocks;
/// otherwise blocks are two 3x3x3 convolutions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub blocks: usize,
    pub stride: usize,
    pub bottleneck_channels: Option<usize>,
}

/// Widths, depths, and head sizes of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_shape: (usize, usize, usize),
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Embedding channels E of the localization layer.
    pub embedding: usize,
    /// Prototypes per class K^c; K = 2 * K^c.
    pub prototypes_per_class: usize,
}

impl BackboneConfig {
    /// Full-scale profile: the truncated 3D ResNet-152 (bottleneck stages of
    /// 3 and 8 blocks, 512 output channels), E = 128, K = 30.
    pub fn paper() -> BackboneConfig {
        BackboneConfig {
            input_shape: (128, 128, 96),
            stem_channels: 64,
            stages: vec![
                StageSpec { out_channels: 256, blocks: 3, stride: 1, bottleneck_channels: Some(64) },
                StageSpec { out_channels: 512, blocks: 8, stride: 2, bottleneck_channels: Some(128) },
            ],
            embedding: 128,
            prototypes_per_class: 15,
        }
    }

    /// Desk-scale profile: same operator structure at a fraction of the
    /// width, small enough to train on a CPU in minutes.
    pub fn toy() -> BackboneConfig {
        BackboneConfig {
            input_shape: (128, 128, 96),
            stem_channels: 4,
            stages: vec![
                StageSpec { out_channels: 8, blocks: 1, stride: 1, bottleneck_channels: None },
                StageSpec { out_channels: 16, blocks: 1, stride: 2, bottleneck_channels: None },
            ],
            embedding: 16,
            prototypes_per_class: 5,
        }
    }

    /// Toy profile on a small grid, for bound checks that need thousands of
    /// forward passes.
    pub fn toy_small() -> BackboneConfig {
        BackboneConfig { input_shape: (32, 32, 24), ..BackboneConfig::toy() }
    }

    pub fn total_prototypes(&self) -> usize {
        2 * self.prototypes_per_class
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.out_channels)
    }

    /// Spatial shape of the feature grid: input / 8.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let (h, w, d) = self.input_shape;
        (h / 8, w / 8, d / 8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding == 0 || self.prototypes_per_class == 0 || self.stem_channels == 0 {
            return Err(Error::Config("zero width in backbone config".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        let (h, w, d) = self.input_shape;
        if h % 8 != 0 || w % 8 != 0 || d % 8 != 0 {
            return Err(Error::Config(format!(
                "input shape {:?} must be divisible by 8",
                self.input_shape
            )));
        }
        let stage_stride: usize = self.stages.iter().map(|s| s.stride).product();
        if 4 * stage_stride != 8 {
            return Err(Error::Config(format!(
                "stem(2) * pool(2) * stage strides ({stage_stride}) must total 8x downsampling"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Block {
    Basic {
        conv1: Conv3d,
        in1: InstanceNorm3d,
        conv2: Conv3d,
        in2: InstanceNorm3d,
        shortcut: Option<(Conv3d, InstanceNorm3d)>,
    },
    Bottleneck {
        conv1: Conv3d,
        in1: InstanceNorm3d,
        conv2: Conv3d,
        in2: InstanceNorm3d,
        conv3: Conv3d,
        in3: InstanceNorm3d,
        shortcut: Option<(Conv3d, InstanceNorm3d)>,
    },
}

struct BlockCache {
    convs: Vec<ConvCache>,
    norms: Vec<NormCache>,
    /// Post-ReLU activations inside the block, in order.
    relus: Vec<Array4<f32>>,
    shortcut: Option<(ConvCache, NormCache)>,
    /// Final output (post-ReLU over the residual sum).
    out: Array4<f32>,
}

impl Block {
    fn basic(name: &str, rng: &mut ChaCha20Rng, cin: usize, cout: usize, stride: usize) -> Block {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv3d::new(&format!("{name}.sc.conv"), rng, cin, cout, 1, stride, false),
                InstanceNorm3d::new(&format!("{name}.sc.norm"), cout),
            )
        });
        Block::Basic {
            conv1: Conv3d::new(&format!("{name}.conv1"), rng, cin, cout, 3, stride, false),
            in1: InstanceNorm3d::new(&format!("{name}.norm1"), cout),
            conv2: Conv3d::new(&format!("{name}.conv2"), rng, cout, cout, 3, 1, false),
            in2: InstanceNorm3d::new(&format!("{name}.norm2"), cout),
            shortcut,
        }
    }

    fn bottleneck(
        name: &str,
        rng: &mut ChaCha20Rng,
        cin: usize,
        inner: usize,
        cout: usize,
        stride: usize,
    ) -> Block {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv3d::new(&format!("{name}.sc.conv"), rng, cin, cout, 1, stride, false),
                InstanceNorm3d::new(&format!("{name}.sc.norm"), cout),
            )
        });
        Block::Bottleneck {
            conv1: Conv3d::new(&format!("{name}.conv1"), rng, cin, inner, 1, 1, false),
            in1: InstanceNorm3d::new(&format!("{name}.norm1"), inner),
            conv2: Conv3d::new(&format!("{name}.conv2"), rng, inner, inner, 3, stride, false),
            in2: InstanceNorm3d::new(&format!("{name}.norm2"), inner),
            conv3: Conv3d::new(&format!("{name}.conv3"), rng, inner, cout, 1, 1, false),
            in3: InstanceNorm3d::new(&format!("{name}.norm3"), cout),
            shortcut,
        }
    }

    fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        // Inference path without caches.
        match self {
            Block::Basic { conv1, in1, conv2, in2, shortcut } => {
                let y = relu(&in1.forward(&conv1.forward(x)));
                let y = in2.forward(&conv2.forward(&y));
                let sc = match shortcut {
                    Some((c, n)) => n.forward(&c.forward(x)),
                    None => x.clone(),
                };
                relu(&(y + sc))
            }
            Block::Bottleneck { conv1, in1, conv2, in2, conv3, in3, shortcut } => {
                let y = relu(&in1.forward(&conv1.forward(x)));
                let y = relu(&in2.forward(&conv2.forward(&y)));
                let y = in3.forward(&conv3.forward(&y));
                let sc = match shortcut {
                    Some((c, n)) => n.forward(&c.forward(x)),
                    None => x.clone(),
                };
                relu(&(y + sc))
            }
        }
    }

    fn forward_cached(&self, x: &Array4<f32>) -> (Array4<f32>, BlockCache) {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut relus = Vec::new();
        let (pre_sum, shortcut_cache, sc_out) = match self {
            Block::Basic { conv1, in1, conv2, in2, shortcut } => {
                let (c1, cc1) = conv1.forward_cached(x);
                let (n1, nc1) = in1.forward_cached(&c1);
                let r1 = relu(&n1);
                let (c2, cc2) = conv2.forward_cached(&r1);
                let (n2, nc2) = in2.forward_cached(&c2);
                convs.extend([cc1, cc2]);
                norms.extend([nc1, nc2]);
                relus.push(r1);
                let (sc_cache, sc_out) = match shortcut {
                    Some((c, n)) => {
                        let (s1, sc) = c.forward_cached(x);
                        let (s2, nc) = n.forward_cached(&s1);
                        (Some((sc, nc)), s2)
                    }
                    None => (None, x.clone()),
                };
                (n2, sc_cache, sc_out)
            }
            Block::Bottleneck { conv1, in1, conv2, in2, conv3, in3, shortcut } => {
                let (c1, cc1) = conv1.forward_cached(x);
                let (n1, nc1) = in1.forward_cached(&c1);
                let r1 = relu(&n1);
                let (c2, cc2) = conv2.forward_cached(&r1);
                let (n2, nc2) = in2.forward_cached(&c2);
                let r2 = relu(&n2);
                let (c3, cc3) = conv3.forward_cached(&r2);
                let (n3, nc3) = in3.forward_cached(&c3);
                convs.extend([cc1, cc2, cc3]);
                norms.extend([nc1, nc2, nc3]);
                relus.extend([r1, r2]);
                let (sc_cache, sc_out) = match shortcut {
                    Some((c, n)) => {
                        let (s1, sc) = c.forward_cached(x);
                        let (s2, nc) = n.forward_cached(&s1);
                        (Some((sc, nc)), s2)
                    }
                    None => (None, x.clone()),
                };
                (n3, sc_cache, sc_out)
            }
        };
        let out = relu(&(pre_sum + sc_out));
        let cache = BlockCache { convs, norms, relus, shortcut: shortcut_cache, out: out.clone() };
        (out, cache)
    }

    fn backward(
        &self,
        grad_out: &Array4<f32>,
        cache: &BlockCache,
        need_dx: bool,
        sink: &mut GradSink,
    ) -> Option<Array4<f32>> {
        let d_sum = relu_backward(grad_out, &cache.out);
        let (d_main, shortcut) = match self {
            Block::Basic { conv1, in1, conv2, in2, shortcut } => {
                let d = in2.backward(&d_sum, &cache.norms[1], sink);
                let d = conv2.backward(&d, &cache.convs[1], true, sink).unwrap();
                let d = relu_backward(&d, &cache.relus[0]);
                let d = in1.backward(&d, &cache.norms[0], sink);
                let d = conv1.backward(&d, &cache.convs[0], need_dx || shortcut.is_some() || true, sink);
                (d, shortcut)
            }
            Block::Bottleneck { conv1, in1, conv2, in2, conv3, in3, shortcut } => {
                let d = in3.backward(&d_sum, &cache.norms[2], sink);
                let d = conv3.backward(&d, &cache.convs[2], true, sink).unwrap();
                let d = relu_backward(&d, &cache.relus[1]);
                let d = in2.backward(&d, &cache.norms[1], sink);
                let d = conv2.backward(&d, &cache.convs[1], true, sink).unwrap();
                let d = relu_backward(&d, &cache.relus[0]);
                let d = in1.backward(&d, &cache.norms[0], sink);
                let d = conv1.backward(&d, &cache.convs[0], need_dx || shortcut.is_some() || true, sink);
                (d, shortcut)
            }
        };
        // Residual branch gradient.
        let d_res = match (shortcut, &cache.shortcut) {
            (Some((c, n)), Some((cc, nc))) => {
                let d = n.backward(&d_sum, nc, sink);
                c.backward(&d, cc, need_dx, sink)
            }
            _ => Some(d_sum),
        };
        match (d_main, d_res) {
            (Some(a), Some(b)) => Some(a + b),
            (a, None) => a,
            (None, b) => b,
        }
    }

    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        match self {
            Block::Basic { conv1, in1, conv2, in2, shortcut } => {
                conv1.collect_params(out);
                in1.collect_params(out);
                conv2.collect_params(out);
                in2.collect_params(out);
                if let Some((c, n)) = shortcut {
                    c.collect_params(out);
                    n.collect_params(out);
                }
            }
            Block::Bottleneck { conv1, in1, conv2, in2, conv3, in3, shortcut } => {
                conv1.collect_params(out);
                in1.collect_params(out);
                conv2.collect_params(out);
                in2.collect_params(out);
                conv3.collect_params(out);
                in3.collect_params(out);
                if let Some((c, n)) = shortcut {
                    c.collect_params(out);
                    n.collect_params(out);
                }
            }
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        match self {
            Block::Basic { conv1, in1, conv2, in2, shortcut } => {
                conv1.collect_params_mut(out);
                in1.collect_params_mut(out);
                conv2.collect_params_mut(out);
                in2.collect_params_mut(out);
                if let Some((c, n)) = shortcut {
                    c.collect_params_mut(out);
                    n.collect_params_mut(out);
                }
            }
            Block::Bottleneck { conv1, in1, conv2, in2, conv3, in3, shortcut } => {
                conv1.collect_params_mut(out);
                in1.collect_params_mut(out);
                conv2.collect_params_mut(out);
                in2.collect_params_mut(out);
                conv3.collect_params_mut(out);
                in3.collect_params_mut(out);
                if let Some((c, n)) = shortcut {
                    c.collect_params_mut(out);
                    n.collect_params_mut(out);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------

/// The feature layer: stem + pool + residual stages.
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    stem_conv: Conv3d,
    stem_norm: InstanceNorm3d,
    blocks: Vec<Block>,
}

pub struct BackboneCache {
    stem_conv: ConvCache,
    stem_norm: NormCache,
    stem_relu: Array4<f32>,
    pool: PoolCache,
    blocks: Vec<BlockCache>,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, rng: &mut ChaCha20Rng) -> Result<Backbone> {
        cfg.validate()?;
        let stem_conv = Conv3d::new("backbone.stem.conv", rng, 4, cfg.stem_channels, 3, 2, false);
        let stem_norm = InstanceNorm3d::new("backbone.stem.norm", cfg.stem_channels);
        let mut blocks = Vec::new();
        let mut cin = cfg.stem_channels;
        for (si, stage) in cfg.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let name = format!("backbone.stage{si}.block{bi}");
                let stride = if bi == 0 { stage.stride } else { 1 };
                let block = match stage.bottleneck_channels {
                    Some(inner) => {
                        Block::bottleneck(&name, rng, cin, inner, stage.out_channels, stride)
                    }
                    None => Block::basic(&name, rng, cin, stage.out_channels, stride),
                };
                blocks.push(block);
                cin = stage.out_channels;
            }
        }
        Ok(Backbone { cfg: cfg.clone(), stem_conv, stem_norm, blocks })
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (c, h, w, d) = x.dim();
        if c != 4 || (h, w, d) != self.cfg.input_shape {
            return Err(Error::ShapeMismatch {
                expected: format!("4x{:?}", self.cfg.input_shape),
                actual: format!("{c}x({h}, {w}, {d})"),
            });
        }
        Ok(())
    }

    /// Feature extraction without caches (inference).
    pub fn forward(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_input(x)?;
        let y = relu(&self.stem_norm.forward(&self.stem_conv.forward(x)));
        let mut y = MaxPool3d::forward(&y);
        for block in &self.blocks {
            y = block.forward(&y);
        }
        Ok(y)
    }

    /// Feature extraction keeping everything needed for backward.
    pub fn forward_cached(&self, x: &Array4<f32>) -> Result<(Array4<f32>, BackboneCache)> {
        self.check_input(x)?;
        let (c, cc) = self.stem_conv.forward_cached(x);
        let (n, nc) = self.stem_norm.forward_cached(&c);
        let r = relu(&n);
        let (mut y, pool) = MaxPool3d::forward_cached(&r);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward_cached(&y);
            blocks.push(cache);
            y = next;
        }
        Ok((y, BackboneCache { stem_conv: cc, stem_norm: nc, stem_relu: r, pool, blocks }))
    }

    /// Accumulate parameter gradients from `dL/dF`. The gradient with
    /// respect to the input volume is not materialized.
    pub fn backward(&self, grad_f: &Array4<f32>, cache: &BackboneCache, sink: &mut GradSink) {
        let mut d = grad_f.clone();
        for (block, bcache) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = block.backward(&d, bcache, true, sink).expect("block input grad");
        }
        let d = MaxPool3d::backward(&d, &cache.pool);
        let d = relu_backward(&d, &cache.stem_relu);
        let d = self.stem_norm.backward(&d, &cache.stem_norm, sink);
        self.stem_conv.backward(&d, &cache.stem_conv, false, sink);
    }

    pub fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.stem_conv.collect_params(out);
        self.stem_norm.collect_params(out);
        for block in &self.blocks {
            block.collect_params(out);
        }
    }

    pub fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.stem_conv.collect_params_mut(out);
        self.stem_norm.collect_params_mut(out);
        for block in &mut self.blocks {
            block.collect_params_mut(out);
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, Stream};
    use rand::Rng;

    #[test]
    fn toy_small_maps_to_one_eighth_grid() {
        let cfg = BackboneConfig::toy_small();
        let mut rng = rng_for(0, Stream::Init);
        let bb = Backbone::new(&cfg, &mut rng).unwrap();
        let x = Array4::from_shape_fn((4, 32, 32, 24), |_| rng.random_range(-1.0f32..1.0));
        let f = bb.forward(&x).unwrap();
        assert_eq!(f.dim(), (16, 4, 4, 3));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let cfg = BackboneConfig::toy_small();
        let mut rng = rng_for(0, Stream::Init);
        let bb = Backbone::new(&cfg, &mut rng).unwrap();
        let x = Array4::zeros((4, 16, 16, 12));
        assert!(matches!(bb.forward(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = BackboneConfig::toy_small();
        let mut rng = rng_for(1, Stream::Init);
        let bb = Backbone::new(&cfg, &mut rng).unwrap();
        let x = Array4::from_shape_fn((4, 32, 32, 24), |_| rng.random_range(-1.0f32..1.0));
        let a = bb.forward(&x).unwrap();
        let b = bb.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cached_forward_matches_plain_forward() {
        let cfg = BackboneConfig::toy_small();
        let mut rng = rng_for(2, Stream::Init);
        let bb = Backbone::new(&cfg, &mut rng).unwrap();
        let x = Array4::from_shape_fn((4, 32, 32, 24), |_| rng.random_range(-1.0f32..1.0));
        let a = bb.forward(&x).unwrap();
        let (b, _) = bb.forward_cached(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bottleneck_stage_has_expected_output_channels() {
        let cfg = BackboneConfig {
            input_shape: (32, 32, 24),
            stem_channels: 8,
            stages: vec![
                StageSpec { out_channels: 16, blocks: 2, stride: 1, bottleneck_channels: Some(4) },
                StageSpec { out_channels: 32, blocks: 2, stride: 2, bottleneck_channels: Some(8) },
            ],
            embedding: 16,
            prototypes_per_class: 5,
        };
        let mut rng = rng_for(3, Stream::Init);
        let bb = Backbone::new(&cfg, &mut rng).unwrap();
        let x = Array4::from_shape_fn((4, 32, 32, 24), |_| rng.random_range(-1.0f32..1.0));
        let f = bb.forward(&x).unwrap();
        assert_eq!(f.dim(), (32, 4, 4, 3));
    }

    #[test]
    fn backward_produces_gradients_for_every_parameter() {
        let cfg = BackboneConfig::toy_small();
        let mut rng = rng_for(4, Stream::Init);
        let bb = Backbone::new(&cfg, &mut rng).unwrap();
        let x = Array4::from_shape_fn((4, 32, 32, 24), |_| rng.random_range(-1.0f32..1.0));
        let (f, cache) = bb.forward_cached(&x).unwrap();
        let grad = Array4::from_elem(f.raw_dim(), 1.0f32);
        let mut sink = GradSink::default();
        bb.backward(&grad, &cache, &mut sink);
        let mut params = Vec::new();
        bb.collect_params(&mut params);
        for p in params {
            let g = sink.get(&p.name).unwrap_or_else(|| panic!("no grad for {}", p.name));
            assert_eq!(g.shape(), p.value.shape(), "{}", p.name);
        }
    }

    #[test]
    fn backbone_weight_gradient_matches_fd() {
        // Spot-check the composition through blocks and norms. Parameters
        // upstream of the max-pool are excluded: a +-eps nudge can flip
        // window argmaxes, making finite differences only piecewise-valid
        // (each layer's backward is FD-verified in isolation in nn.rs).
        let cfg = BackboneConfig::toy_small();
        let mut rng = rng_for(5, Stream::Init);
        let mut bb = Backbone::new(&cfg, &mut rng).unwrap();
        let x = Array4::from_shape_fn((4, 32, 32, 24), |_| rng.random_range(-1.0f32..1.0));
        let proj: Vec<f32> = {
            let f = bb.forward(&x).unwrap();
            (0..f.len()).map(|i| ((i % 11) as f32 - 5.0) / 11.0).collect()
        };
        let loss = |bb: &Backbone, x: &Array4<f32>| -> f64 {
            bb.forward(x)
                .unwrap()
                .iter()
                .zip(&proj)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        let (f, cache) = bb.forward_cached(&x).unwrap();
        let grad_out = Array4::from_shape_vec(f.raw_dim(), proj.clone()).unwrap();
        let mut sink = GradSink::default();
        bb.backward(&grad_out, &cache, &mut sink);

        fn set_param(bb: &mut Backbone, name: &str, idx: usize, value: f32) -> f32 {
            let mut ps = Vec::new();
            bb.collect_params_mut(&mut ps);
            let p = ps.iter_mut().find(|p| p.name == name).unwrap();
            let slot = &mut p.value.as_slice_mut().unwrap()[idx];
            let old = *slot;
            *slot = value;
            old
        }

        for (name, idx) in [
            ("backbone.stage0.block0.conv1.w", 7usize),
            ("backbone.stage1.block0.conv1.w", 3),
            ("backbone.stage0.block0.norm1.gamma", 2),
        ] {
            let analytic = sink.get(name).unwrap().as_slice().unwrap()[idx];
            let eps = 2e-3f32;
            let orig = set_param(&mut bb, name, idx, 0.0);
            set_param(&mut bb, name, idx, orig + eps);
            let lp = loss(&bb, &x);
            set_param(&mut bb, name, idx, orig - eps);
            let lm = loss(&bb, &x);
            set_param(&mut bb, name, idx, orig);
            let fd = ((lp - lm) / (2.0 * eps as f64)) as f32;
            assert!(
                (fd - analytic).abs() <= 5e-2 * (1.0 + fd.abs().max(analytic.abs())),
                "{name}[{idx}]: fd={fd} analytic={analytic}"
            );
        }
    }

}
