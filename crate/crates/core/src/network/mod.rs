//! The four-layer prototype network: hand-rolled 3D layers, the residual
//! feature extractor, forward-path operations, and the model variants of
//! the ablation matrix.

pub mod backbone;
pub mod checkpoint;
pub mod model;
pub mod nn;
pub mod ops;

pub use backbone::{Backbone, BackboneConfig, StageSpec};
pub use model::{
    BaseMode, ForwardTrace, MProtoNet, ModelVariant, PrototypeBank, Provenance, SampleTerms,
    TOP_POOL_ALPHA,
};
pub use nn::{GradSink, Param};
