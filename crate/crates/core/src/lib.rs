//! Contrastive self-supervised pretraining and fine-tuning for
//! radio-frequency modulation classification on raw I/Q frames.

pub mod augment;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod model;
pub mod ssl;

pub use augment::AugmentationConfig;
pub use candle_core::{Device, Tensor};
pub use dataio::{Dataset, IqFrame, ModulationClass, SignalExample, SplitIds, SplitSpec};
pub use error::{Error, ErrorCategory, Result};
pub use eval::EvalReport;
pub use finetune::{FinetuneConfig, InitSource, TrainMode};
pub use model::{Architecture, BackboneConfig, Classifier, EncoderPair, HeadConfig, ModelStats};
pub use ssl::PretrainConfig;
