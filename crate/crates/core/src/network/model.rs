//! The four-layer prototype network (feature / localization / prototype /
//! classification) and its structural variants, with the full backward pass
//! used in stage-1 training.

use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig};
use super::nn::{
    global_avg_pool, global_avg_pool_backward, linear_init, relu, relu_backward, sigmoid,
    sigmoid_backward, uniform_init, Conv3d, ConvCache, GradSink, Param,
};
use super::ops;
use crate::error::{Error, Result};
use crate::objectives::{
    self, focal_grad_logits, focal_sample_loss, LossWeights, OnlineCamTrace,
};
use crate::rng::{rng_for, Stream};

/// Fraction of locations kept by the ProtoPNet top pooling.
pub const TOP_POOL_ALPHA: f64 = 0.01;

/// Structural family of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseMode {
    /// Plain CNN baseline: feature layer, add-on, global average pooling,
    /// linear classifier.
    Cnn,
    /// Location-wise prototype comparison with top-fraction pooling.
    ProtoPNet,
    /// Attention-map prototype comparison (XProtoNet / MProtoNet family).
    ProtoAm,
}

/// One row of the ablation matrix: base mode plus the soft-masking and
/// online-CAM switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVariant {
    pub mode: BaseMode,
    pub soft_masking: bool,
    pub online_cam: bool,
}

impl ModelVariant {
    pub fn cnn() -> ModelVariant {
        ModelVariant { mode: BaseMode::Cnn, soft_masking: false, online_cam: false }
    }

    pub fn protopnet() -> ModelVariant {
        ModelVariant { mode: BaseMode::ProtoPNet, soft_masking: false, online_cam: false }
    }

    pub fn xprotonet() -> ModelVariant {
        ModelVariant { mode: BaseMode::ProtoAm, soft_masking: false, online_cam: false }
    }

    pub fn mprotonet_a() -> ModelVariant {
        ModelVariant { mode: BaseMode::ProtoAm, soft_masking: true, online_cam: false }
    }

    pub fn mprotonet_b() -> ModelVariant {
        ModelVariant { mode: BaseMode::ProtoAm, soft_masking: false, online_cam: true }
    }

    pub fn mprotonet_c() -> ModelVariant {
        ModelVariant { mode: BaseMode::ProtoAm, soft_masking: true, online_cam: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode != BaseMode::ProtoAm && (self.soft_masking || self.online_cam) {
            return Err(Error::Config(
                "soft masking and online-CAM require the attention-map mode".into(),
            ));
        }
        Ok(())
    }

    pub fn uses_prototypes(&self) -> bool {
        self.mode != BaseMode::Cnn
    }

    pub fn name(&self) -> &'static str {
        match (self.mode, self.soft_masking, self.online_cam) {
            (BaseMode::Cnn, _, _) => "CNN",
            (BaseMode::ProtoPNet, _, _) => "ProtoPNet",
            (BaseMode::ProtoAm, false, false) => "XProtoNet",
            (BaseMode::ProtoAm, true, false) => "MProtoNet A",
            (BaseMode::ProtoAm, false, true) => "MProtoNet B",
            (BaseMode::ProtoAm, true, true) => "MProtoNet C",
        }
    }

    pub fn key(&self) -> &'static str {
        match (self.mode, self.soft_masking, self.online_cam) {
            (BaseMode::Cnn, _, _) => "cnn",
            (BaseMode::ProtoPNet, _, _) => "protopnet",
            (BaseMode::ProtoAm, false, false) => "xprotonet",
            (BaseMode::ProtoAm, true, false) => "mprotonet_a",
            (BaseMode::ProtoAm, false, true) => "mprotonet_b",
            (BaseMode::ProtoAm, true, true) => "mprotonet_c",
        }
    }

    pub fn from_key(key: &str) -> Result<ModelVariant> {
        match key {
            "cnn" => Ok(ModelVariant::cnn()),
            "protopnet" => Ok(ModelVariant::protopnet()),
            "xprotonet" => Ok(ModelVariant::xprotonet()),
            "mprotonet_a" => Ok(ModelVariant::mprotonet_a()),
            "mprotonet_b" => Ok(ModelVariant::mprotonet_b()),
            "mprotonet_c" => Ok(ModelVariant::mprotonet_c()),
            other => Err(Error::UnsupportedVariant(other.into())),
        }
    }
}

/// Where a prototype was anchored during reassignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub case_id: String,
    /// Attention snapshot at the feature grid: `M_k(x*)` for attention-map
    /// modes, the pre-pool similarity field for ProtoPNet.
    pub attention: Array3<f32>,
}

/// K learned prototype vectors with fixed class assignments.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    pub vectors: Param,
    pub class_of: Vec<usize>,
    pub provenance: Vec<Option<Provenance>>,
}

impl PrototypeBank {
    fn new(rng: &mut rand_chacha::ChaCha20Rng, per_class: usize, embedding: usize) -> PrototypeBank {
        let k = 2 * per_class;
        // Evenly assigned: the first K^c prototypes to class 0, the rest to
        // class 1.
        let class_of = (0..k).map(|i| i / per_class).collect();
        PrototypeBank {
            vectors: Param::new("prototypes.vectors", uniform_init(rng, &[k, embedding])),
            class_of,
            provenance: vec![None; k],
        }
    }

    pub fn matrix(&self) -> ndarray::ArrayView2<'_, f32> {
        self.vectors
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("prototype bank is 2-D")
    }

    pub fn count(&self) -> usize {
        self.class_of.len()
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.class_of
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Every intermediate product of one forward pass. Variant-specific fields
/// are `None` where the path does not produce them.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Backbone features `[C_F, h, w, d]`.
    pub f: Array4<f32>,
    /// High-level embedding `[E, h, w, d]`.
    pub g: Array4<f32>,
    /// Pre-mask attention maps `[K, h, w, d]`, attention-map modes only.
    pub m0: Option<Array4<f32>>,
    /// Attention maps after optional soft masking.
    pub m: Option<Array4<f32>>,
    /// Mapping-module features right before its final convolution.
    pub i: Option<Array4<f32>>,
    /// Pooled per-prototype embeddings `[K, E]`.
    pub h: Option<Array2<f32>>,
    /// Similarity scores `[K]`.
    pub s: Option<Array1<f32>>,
    /// Pre-pooling similarity field `[K, V]`, ProtoPNet only.
    pub protopnet_field: Option<Array2<f32>>,
    /// Classifier logits `[2]`.
    pub logits: Array1<f32>,
    /// Predicted probabilities `[2]`.
    pub p: Array1<f32>,
}

impl ForwardTrace {
    pub fn predicted_class(&self) -> usize {
        if self.p[0] >= self.p[1] {
            0
        } else {
            1
        }
    }
}

/// Unweighted per-sample loss terms produced alongside gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleTerms {
    pub cls: f64,
    pub clst: Option<f64>,
    pub sep: Option<f64>,
    /// Per-sample mean |M0|; the batch term is the mean of these.
    pub map_mean: Option<f64>,
    pub oc: Option<f64>,
}

// ---------------------------------------------------------------------------

/// The model: backbone plus add-on, mapping, prototype, and classification
/// layers, instantiated per variant.
#[derive(Debug, Clone)]
pub struct MProtoNet {
    variant: ModelVariant,
    cfg: BackboneConfig,
    backbone: Backbone,
    addon1: Conv3d,
    addon2: Conv3d,
    mapping1: Option<Conv3d>,
    conv_map: Option<Conv3d>,
    prototypes: Option<PrototypeBank>,
    w_cls: Param,
}

impl MProtoNet {
    pub fn new(variant: ModelVariant, cfg: &BackboneConfig, seed: u64) -> Result<MProtoNet> {
        variant.validate()?;
        cfg.validate()?;
        let mut rng = rng_for(seed, Stream::Init);
        let backbone = Backbone::new(cfg, &mut rng)?;
        let cf = cfg.out_channels();
        let e = cfg.embedding;
        let k = cfg.total_prototypes();

        let addon1 = Conv3d::new("addon.conv1", &mut rng, cf, e, 1, 1, true);
        let addon2 = Conv3d::new("addon.conv2", &mut rng, e, e, 1, 1, true);

        let (mapping1, conv_map, prototypes) = if variant.mode == BaseMode::ProtoAm {
            let m1 = Conv3d::new("mapping.conv1", &mut rng, cf, e, 1, 1, true);
            // Bias-free so the online-CAM product uses the exact live weight.
            let cm = Conv3d::new("mapping.conv_map", &mut rng, e, k, 1, 1, false);
            let bank = PrototypeBank::new(&mut rng, cfg.prototypes_per_class, e);
            (Some(m1), Some(cm), Some(bank))
        } else if variant.mode == BaseMode::ProtoPNet {
            let bank = PrototypeBank::new(&mut rng, cfg.prototypes_per_class, e);
            (None, None, Some(bank))
        } else {
            (None, None, None)
        };

        let w_cls = if variant.uses_prototypes() {
            // ProtoPNet-style init: 1 towards the prototype's class, -0.5
            // across.
            let bank = prototypes.as_ref().unwrap();
            let mut w = Array2::zeros((k, 2));
            for (ki, &c) in bank.class_of.iter().enumerate() {
                for ci in 0..2 {
                    w[[ki, ci]] = if ci == c { 1.0 } else { -0.5 };
                }
            }
            Param::new("cls.w", w.into_dyn())
        } else {
            Param::new("cls.w", linear_init(&mut rng, e, 2).into_dyn())
        };

        Ok(MProtoNet {
            variant,
            cfg: cfg.clone(),
            backbone,
            addon1,
            addon2,
            mapping1,
            conv_map,
            prototypes,
            w_cls,
        })
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn prototype_bank(&self) -> Option<&PrototypeBank> {
        self.prototypes.as_ref()
    }

    pub fn prototype_bank_mut(&mut self) -> Option<&mut PrototypeBank> {
        self.prototypes.as_mut()
    }

    pub fn w_cls_matrix(&self) -> ndarray::ArrayView2<'_, f32> {
        self.w_cls
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("classifier weight is 2-D")
    }

    /// Live weight of the mapping module's final convolution in `[K, E]`
    /// layout (a view, shared with the attention path).
    pub fn conv_map_matrix(&self) -> Option<ndarray::ArrayView2<'_, f32>> {
        self.conv_map.as_ref().map(|c| {
            c.w.value
                .view()
                .into_shape_with_order((self.cfg.total_prototypes(), self.cfg.embedding))
                .expect("conv_map weight reshapes to [K, E]")
        })
    }

    /// The feature layer alone (the spec's `feature_forward`).
    pub fn feature_forward(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.backbone.forward(x)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.backbone.collect_params(&mut out);
        self.addon1.collect_params(&mut out);
        self.addon2.collect_params(&mut out);
        if let Some(m) = &self.mapping1 {
            m.collect_params(&mut out);
        }
        if let Some(c) = &self.conv_map {
            c.collect_params(&mut out);
        }
        if let Some(p) = &self.prototypes {
            out.push(&p.vectors);
        }
        out.push(&self.w_cls);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.backbone.collect_params_mut(&mut out);
        self.addon1.collect_params_mut(&mut out);
        self.addon2.collect_params_mut(&mut out);
        if let Some(m) = &mut self.mapping1 {
            m.collect_params_mut(&mut out);
        }
        if let Some(c) = &mut self.conv_map {
            c.collect_params_mut(&mut out);
        }
        if let Some(p) = &mut self.prototypes {
            out.push(&mut p.vectors);
        }
        out.push(&mut self.w_cls);
        out
    }

    fn addon_forward(&self, f: &Array4<f32>) -> Array4<f32> {
        sigmoid(&self.addon2.forward(&relu(&self.addon1.forward(f))))
    }

    fn mapping_forward(&self, f: &Array4<f32>) -> (Array4<f32>, Array4<f32>) {
        let i = relu(&self.mapping1.as_ref().unwrap().forward(f));
        let m0 = sigmoid(&self.conv_map.as_ref().unwrap().forward(&i));
        (i, m0)
    }

    /// Full inference pass producing all intermediate products the variant
    /// defines.
    pub fn forward_trace(&self, x: &Array4<f32>) -> Result<ForwardTrace> {
        let f = self.backbone.forward(x)?;
        let g = self.addon_forward(&f);
        let (e, gh, gw, gd) = g.dim();
        let v = gh * gw * gd;

        match self.variant.mode {
            BaseMode::Cnn => {
                let pooled = global_avg_pool(&g);
                let (logits, p) = ops::classify(&pooled.view(), &self.w_cls_matrix());
                Ok(ForwardTrace {
                    f,
                    g,
                    m0: None,
                    m: None,
                    i: None,
                    h: None,
                    s: None,
                    protopnet_field: None,
                    logits,
                    p,
                })
            }
            BaseMode::ProtoPNet => {
                let bank = self.prototypes.as_ref().unwrap();
                let g2 = g.view().into_shape_with_order((e, v)).unwrap();
                let sim = ops::protopnet_similarity(&g2, &bank.matrix(), TOP_POOL_ALPHA);
                let (logits, p) = ops::classify(&sim.s.view(), &self.w_cls_matrix());
                Ok(ForwardTrace {
                    f,
                    g,
                    m0: None,
                    m: None,
                    i: None,
                    h: None,
                    s: Some(sim.s),
                    protopnet_field: Some(sim.field),
                    logits,
                    p,
                })
            }
            BaseMode::ProtoAm => {
                let bank = self.prototypes.as_ref().unwrap();
                let (i, m0) = self.mapping_forward(&f);
                let m = if self.variant.soft_masking { ops::soft_mask(&m0) } else { m0.clone() };
                let k = bank.count();
                let g2 = g.view().into_shape_with_order((e, v)).unwrap();
                let m2 = m.view().into_shape_with_order((k, v)).unwrap();
                let h = ops::pool_features(&g2, &m2);
                let s = ops::similarity_vector(&h.view(), &bank.matrix());
                let (logits, p) = ops::classify(&s.view(), &self.w_cls_matrix());
                Ok(ForwardTrace {
                    f,
                    g,
                    m0: Some(m0),
                    m: Some(m),
                    i: Some(i),
                    h: Some(h),
                    s: Some(s),
                    protopnet_field: None,
                    logits,
                    p,
                })
            }
        }
    }

    /// Stage-1 gradients and loss terms for one sample. `batch_size` scales
    /// the batch-mean mapping term; `class_counts` are training-set totals.
    pub fn sample_gradients(
        &self,
        x: &Array4<f32>,
        label: usize,
        class_counts: &[usize; 2],
        weights: &LossWeights,
        batch_size: usize,
    ) -> Result<(GradSink, SampleTerms)> {
        let mut sink = GradSink::default();
        let mut terms = SampleTerms::default();
        let n_c = class_counts[label];
        if n_c == 0 {
            return Err(Error::Config(format!("class {label} has zero training samples")));
        }

        let (f, bb_cache) = self.backbone.forward_cached(x)?;
        let (a1, a1c) = self.addon1.forward_cached(&f);
        let r1 = relu(&a1);
        let (a2, a2c) = self.addon2.forward_cached(&r1);
        let g = sigmoid(&a2);
        let (e, gh, gw, gd) = g.dim();
        let v = gh * gw * gd;
        let g2 = g.view().into_shape_with_order((e, v)).unwrap();

        let df = match self.variant.mode {
            BaseMode::Cnn => {
                let pooled = global_avg_pool(&g);
                let (_, p) = ops::classify(&pooled.view(), &self.w_cls_matrix());
                terms.cls = (focal_sample_loss(p[label], weights.gamma) / n_c as f32) as f64;
                let dlogits = focal_grad_logits(&p.view(), label, n_c, weights.gamma)
                    .mapv(|gv| gv * weights.lambda_cls as f32);
                let (dpooled, dw_cls) = ops::classify_backward_from_logits(
                    &pooled.view(),
                    &self.w_cls_matrix(),
                    &dlogits.view(),
                );
                sink.push(&self.w_cls.name, dw_cls.into_dyn());
                let dg = global_avg_pool_backward(&dpooled, g.dim());
                self.addon_backward(&dg, &g, &a2c, &r1, &a1c, &mut sink)
            }
            BaseMode::ProtoPNet => {
                let bank = self.prototypes.as_ref().unwrap();
                let sim = ops::protopnet_similarity(&g2, &bank.matrix(), TOP_POOL_ALPHA);
                let (_, p) = ops::classify(&sim.s.view(), &self.w_cls_matrix());
                terms.cls = (focal_sample_loss(p[label], weights.gamma) / n_c as f32) as f64;
                let ds = self.similarity_loss_grads(
                    &sim.s, &p, label, n_c, class_counts, weights, &mut terms, &mut sink,
                )?;
                let (dg2, dprotos) = ops::protopnet_similarity_backward(
                    &g2,
                    &bank.matrix(),
                    &sim,
                    &ds.view(),
                );
                sink.push(&bank.vectors.name, dprotos.into_dyn());
                let dg = dg2.into_shape_with_order(g.raw_dim()).unwrap();
                self.addon_backward(&dg, &g, &a2c, &r1, &a1c, &mut sink)
            }
            BaseMode::ProtoAm => {
                let bank = self.prototypes.as_ref().unwrap();
                let k = bank.count();
                let (m1, m1c) = self.mapping1.as_ref().unwrap().forward_cached(&f);
                let i = relu(&m1);
                let (mraw, mrawc) = self.conv_map.as_ref().unwrap().forward_cached(&i);
                let m0 = sigmoid(&mraw);
                let m = if self.variant.soft_masking { ops::soft_mask(&m0) } else { m0.clone() };
                let m2 = m.view().into_shape_with_order((k, v)).unwrap();
                let h = ops::pool_features(&g2, &m2);
                let s = ops::similarity_vector(&h.view(), &bank.matrix());
                let (_, p) = ops::classify(&s.view(), &self.w_cls_matrix());
                terms.cls = (focal_sample_loss(p[label], weights.gamma) / n_c as f32) as f64;

                let ds = self.similarity_loss_grads(
                    &s, &p, label, n_c, class_counts, weights, &mut terms, &mut sink,
                )?;
                let (dh, dprotos) =
                    ops::similarity_vector_backward(&h.view(), &bank.matrix(), &ds.view());
                sink.push(&bank.vectors.name, dprotos.into_dyn());
                let (dg2, dm2) = ops::pool_features_backward(&dh.view(), &g2, &m2);
                let dm = dm2.into_shape_with_order(m.raw_dim()).unwrap();

                // Mapping sparsity term, scaled as a batch mean.
                terms.map_mean = Some(objectives::mapping_loss(&[&m0]) as f64);
                let map_scale = (weights.lambda_map / batch_size as f64) as f32;
                let mut dm0 = if self.variant.soft_masking {
                    ops::soft_mask_backward(&dm, &m)
                } else {
                    dm
                };
                dm0.zip_mut_with(
                    &objectives::mapping_loss_backward(&m0, m0.len()),
                    |a, &b| *a += map_scale * b,
                );

                let dmraw = sigmoid_backward(&dm0, &m0);
                let mut di = self
                    .conv_map
                    .as_ref()
                    .unwrap()
                    .backward(&dmraw, &mrawc, true, &mut sink)
                    .unwrap();

                // Online-CAM auxiliary head, sharing conv_map and W_cls.
                if self.variant.online_cam {
                    let w_map = self.conv_map_matrix().unwrap().to_owned();
                    let oc: OnlineCamTrace<f32> = objectives::online_cam_probability(
                        &i,
                        &w_map.view(),
                        &self.w_cls_matrix(),
                        weights.r,
                    );
                    terms.oc =
                        Some((focal_sample_loss(oc.p_oc[label], weights.gamma) / n_c as f32) as f64);
                    let mut dp_oc = Array1::<f32>::zeros(2);
                    dp_oc[label] = (weights.lambda_oc / n_c as f64) as f32
                        * focal_grad(oc.p_oc[label], weights.gamma);
                    let (di_oc, dw_map, dw_cls) = objectives::online_cam_probability_backward(
                        &i,
                        &w_map.view(),
                        &self.w_cls_matrix(),
                        weights.r,
                        &oc,
                        &dp_oc.view(),
                    );
                    di += &di_oc;
                    let k_total = self.cfg.total_prototypes();
                    sink.push(
                        &self.conv_map.as_ref().unwrap().w.name,
                        dw_map
                            .into_shape_with_order(ndarray::IxDyn(&[k_total, e, 1, 1, 1]))
                            .unwrap(),
                    );
                    sink.push(&self.w_cls.name, dw_cls.into_dyn());
                }

                let di = relu_backward(&di, &i);
                let df_map = self
                    .mapping1
                    .as_ref()
                    .unwrap()
                    .backward(&di, &m1c, true, &mut sink)
                    .unwrap();

                let dg = dg2.into_shape_with_order(g.raw_dim()).unwrap();
                let df_addon = self.addon_backward(&dg, &g, &a2c, &r1, &a1c, &mut sink);
                df_addon + df_map
            }
        };

        self.backbone.backward(&df, &bb_cache, &mut sink);
        Ok((sink, terms))
    }

    /// Shared similarity-head gradients: classification (through the frozen
    /// classifier), cluster, and separation terms. Returns `dL/dS`.
    #[allow(clippy::too_many_arguments)]
    fn similarity_loss_grads(
        &self,
        s: &Array1<f32>,
        p: &Array1<f32>,
        label: usize,
        n_c: usize,
        class_counts: &[usize; 2],
        weights: &LossWeights,
        terms: &mut SampleTerms,
        sink: &mut GradSink,
    ) -> Result<Array1<f32>> {
        let bank = self.prototypes.as_ref().unwrap();
        let dlogits = focal_grad_logits(&p.view(), label, n_c, weights.gamma)
            .mapv(|gv| gv * weights.lambda_cls as f32);
        let (mut ds, dw_cls) =
            ops::classify_backward_from_logits(&s.view(), &self.w_cls_matrix(), &dlogits.view());
        sink.push(&self.w_cls.name, dw_cls.into_dyn());

        let s_row = s.view().insert_axis(ndarray::Axis(0));
        let labels = [label];
        let counts = [class_counts[0], class_counts[1]];
        let (clst, sep) = objectives::cluster_and_separation_loss(
            &s_row, &labels, &bank.class_of, &counts,
        )?;
        terms.clst = Some(clst as f64);
        terms.sep = Some(sep as f64);
        let (d_clst, d_sep) =
            objectives::cluster_separation_backward(&s_row, &labels, &bank.class_of, &counts)?;
        for ki in 0..ds.len() {
            ds[ki] += weights.lambda_clst as f32 * d_clst[[0, ki]]
                + weights.lambda_sep as f32 * d_sep[[0, ki]];
        }
        Ok(ds)
    }

    fn addon_backward(
        &self,
        dg: &Array4<f32>,
        g: &Array4<f32>,
        a2c: &ConvCache,
        r1: &Array4<f32>,
        a1c: &ConvCache,
        sink: &mut GradSink,
    ) -> Array4<f32> {
        let da2 = sigmoid_backward(dg, g);
        let dr1 = self.addon2.backward(&da2, a2c, true, sink).unwrap();
        let da1 = relu_backward(&dr1, r1);
        self.addon1.backward(&da1, a1c, true, sink).unwrap()
    }

    /// Replace a prototype vector in place (stage-2 reassignment).
    pub fn set_prototype(&mut self, k: usize, vector: &Array1<f32>, provenance: Provenance) {
        let bank = self.prototypes.as_mut().expect("variant has prototypes");
        let mut m = bank
            .vectors
            .value
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        m.row_mut(k).assign(vector);
        bank.provenance[k] = Some(provenance);
    }
}

fn focal_grad(p_true: f32, gamma: f64) -> f32 {
    let eps = objectives::PROB_EPS as f32;
    if p_true < eps || p_true > 1.0 - eps {
        return 0.0;
    }
    let g = gamma as f32;
    let one_m = 1.0 - p_true;
    g * one_m.powf(g - 1.0) * p_true.ln() - one_m.powf(g) / p_true
}
