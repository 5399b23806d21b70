//! Case-based interpretable prototype network for 3D multi-parametric MRI
//! classification, with its CNN/ProtoPNet/XProtoNet baselines, three-stage
//! training, and quantitative interpretability evaluation (incremental
//! deletion score, activation precision) under stratified cross-validation.

pub mod error;
pub mod rng;
pub mod volume_io;

pub use error::{Error, Result};
pub mod network;
pub mod real;
pub mod objectives;
