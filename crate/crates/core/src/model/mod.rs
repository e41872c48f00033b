//! Encoders, heads and classifiers.

pub mod checkpoint;
mod encoder;
mod heads;
pub mod nn;
mod resnet;

use serde::{Deserialize, Serialize};

pub use encoder::{
    attach_classifier, momentum_update, Architecture, Classifier, EncoderPair, MomentumEncoder,
    QueryEncoder,
};
pub use heads::{build_heads, build_projection, HeadConfig, Mlp, PROJECTION_WIDTHS};
pub use nn::{xavier_bound, xavier_init, ParamBuilder, ParamStore, TensorMap};
pub use resnet::{Backbone, BackboneConfig, BackboneVariant};

/// Trainable parameter count and floating-point operations (2 per
/// multiply-accumulate, conv and linear layers only) for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    pub params: usize,
    pub flops: u64,
}
