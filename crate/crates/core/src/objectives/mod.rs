//! Training losses and the stage-level weighted sums.

mod losses;
mod pooling;

pub use losses::{
    classification_loss, classification_loss_backward, cluster_and_separation_loss,
    cluster_separation_backward, focal_grad_logits, focal_sample_loss, l1_loss, l1_loss_backward,
    mapping_consistency_loss, mapping_loss, mapping_loss_backward, PROB_EPS,
};
pub use pooling::{
    lse_pool, lse_pool_backward, lse_vector, lse_vector_backward, online_cam_probability,
    online_cam_probability_backward, OnlineCamTrace,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BaseMode, ModelVariant};

/// Loss coefficients plus the focal exponent and LSE sharpness.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_clst: f64,
    pub lambda_sep: f64,
    pub lambda_map: f64,
    pub lambda_oc: f64,
    pub lambda_l1: f64,
    /// Focal exponent.
    pub gamma: f64,
    /// LSE pooling sharpness.
    pub r: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            lambda_cls: 1.0,
            lambda_clst: 0.8,
            lambda_sep: 0.08,
            lambda_map: 0.5,
            lambda_oc: 0.05,
            lambda_l1: 0.01,
            gamma: 2.0,
            r: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_clst", self.lambda_clst),
            ("lambda_sep", self.lambda_sep),
            ("lambda_map", self.lambda_map),
            ("lambda_oc", self.lambda_oc),
            ("lambda_l1", self.lambda_l1),
            ("gamma", self.gamma),
            ("r", self.r),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which training stage a weighted sum belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Stage1,
    Stage3,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage3 => 3,
        }
    }
}

/// Raw (unweighted) term values available for a stage sum. Terms that a
/// variant does not produce stay `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageLossInputs {
    pub cls: Option<f64>,
    pub clst: Option<f64>,
    pub sep: Option<f64>,
    pub map: Option<f64>,
    pub oc: Option<f64>,
    pub l1: Option<f64>,
}

/// Named unweighted term values plus the weighted total. Inactive terms are
/// absent, not zero-filled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stage: u8,
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
}

/// Combine term values into the stage objective. Stage 1 requires the terms
/// the variant produces (cluster/separation for prototype modes, the mapping
/// term for attention-map modes, online-CAM when enabled); stage 3 requires
/// classification and L1.
pub fn stage_loss(
    inputs: &StageLossInputs,
    stage: Stage,
    variant: &ModelVariant,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let mut terms = BTreeMap::new();
    let mut total = 0.0;
    let mut take = |name: &str, value: Option<f64>, lambda: f64| -> Result<()> {
        let v = value.ok_or_else(|| {
            Error::Config(format!("stage {} requires loss term '{name}'", stage.number()))
        })?;
        terms.insert(name.to_string(), v);
        total += lambda * v;
        Ok(())
    };
    match stage {
        Stage::Stage1 => {
            take("cls", inputs.cls, weights.lambda_cls)?;
            if variant.mode != BaseMode::Cnn {
                take("clst", inputs.clst, weights.lambda_clst)?;
                take("sep", inputs.sep, weights.lambda_sep)?;
            }
            if variant.mode == BaseMode::ProtoAm {
                take("map", inputs.map, weights.lambda_map)?;
                if variant.online_cam {
                    take("oc", inputs.oc, weights.lambda_oc)?;
                }
            }
        }
        Stage::Stage3 => {
            take("cls", inputs.cls, weights.lambda_cls)?;
            take("l1", inputs.l1, weights.lambda_l1)?;
        }
    }
    Ok(LossBreakdown { stage: stage.number(), terms, total })
}
