use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::heads::{build_heads, build_projection, HeadConfig, Mlp};
use super::nn::{Linear, ParamBuilder, ParamStore, TensorMap};
use super::resnet::{Backbone, BackboneConfig};
use super::ModelStats;
use crate::error::{Error, Result};

/// Everything needed to rebuild a network's parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    /// Present for classifiers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

/// Backbone, projection and prediction; trained by gradient descent.
#[derive(Debug, Clone)]
pub struct QueryEncoder {
    pub backbone: Backbone,
    pub projection: Mlp,
    pub prediction: Mlp,
    pub store: ParamStore,
}

impl QueryEncoder {
    pub fn new(backbone: BackboneConfig, heads: &HeadConfig, seed: u64) -> Result<Self> {
        let mut b = ParamBuilder::new(seed);
        let bb = Backbone::new(&mut b, backbone)?;
        let (projection, prediction) = build_heads(&mut b, heads, bb.feature_dim())?;
        Ok(QueryEncoder {
            backbone: bb,
            projection,
            prediction,
            store: b.finish(),
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.backbone.forward(x, train)?;
        let z = self.projection.forward(&h, train)?;
        self.prediction.forward(&z, train)
    }
}

/// Backbone and projection only; follows the query encoder by moving average.
#[derive(Debug, Clone)]
pub struct MomentumEncoder {
    pub backbone: Backbone,
    pub projection: Mlp,
    pub store: ParamStore,
}

impl MomentumEncoder {
    /// Exact copy of the query encoder's backbone and projection.
    pub fn from_query(query: &QueryEncoder, heads: &HeadConfig) -> Result<Self> {
        let source: TensorMap = query
            .store
            .snapshot()?
            .into_iter()
            .filter(|(k, _)| k.starts_with("backbone.") || k.starts_with("projection."))
            .collect();
        let mut b = ParamBuilder::new(0).with_source(&source, Some(""));
        let backbone = Backbone::new(&mut b, query.backbone.config)?;
        let projection = build_projection(&mut b, heads, backbone.feature_dim())?;
        Ok(MomentumEncoder {
            backbone,
            projection,
            store: b.finish(),
        })
    }

    /// Keys carry no autograd history.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = x.detach();
        let h = self.backbone.forward(&x, train)?;
        Ok(self.projection.forward(&h, train)?.detach())
    }
}

/// `p_k <- alpha * p_k + (1 - alpha) * p_q` for every trainable parameter of
/// `momentum`, matched by name in `query`. Buffers are left alone.
pub fn momentum_update(momentum: &ParamStore, query: &ParamStore, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("momentum coefficient {alpha} outside [0, 1]")));
    }
    for (name, pk) in momentum.params() {
        let pq = query
            .param(name)
            .ok_or_else(|| Error::Contract(format!("query encoder has no parameter {name}")))?;
        if pq.dims() != pk.dims() {
            return Err(Error::Contract(format!(
                "{name}: momentum shape {:?} vs query shape {:?}",
                pk.dims(),
                pq.dims()
            )));
        }
        let next = (pk.as_tensor().affine(alpha, 0.0)? + pq.as_detached_tensor().affine(1.0 - alpha, 0.0)?)?;
        pk.set(&next)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EncoderPair {
    pub arch: Architecture,
    pub query: QueryEncoder,
    pub momentum: MomentumEncoder,
    pub alpha: f64,
    pub tau: f64,
}

impl EncoderPair {
    pub fn new(backbone: BackboneConfig, heads: HeadConfig, seed: u64, alpha: f64, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("tau {tau} must be positive")));
        }
        let query = QueryEncoder::new(backbone, &heads, seed)?;
        let momentum = MomentumEncoder::from_query(&query, &heads)?;
        Ok(EncoderPair {
            arch: Architecture {
                backbone,
                heads,
                num_classes: None,
            },
            query,
            momentum,
            alpha,
            tau,
        })
    }

    pub fn momentum_step(&self) -> Result<()> {
        momentum_update(&self.momentum.store, &self.query.store, self.alpha)
    }
}

/// Backbone features followed by one linear layer (`classifier.`) with one
/// output per class. Softmax is left to the loss and to evaluation.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub arch: Architecture,
    pub backbone: Backbone,
    pub head: Linear,
    pub store: ParamStore,
}

impl Classifier {
    /// Fresh Xavier initialization everywhere, or backbone weights
    /// (parameters and running statistics) copied from `pretrained`.
    pub fn new(
        backbone: BackboneConfig,
        heads: HeadConfig,
        num_classes: usize,
        seed: u64,
        pretrained: Option<&TensorMap>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("a classifier needs at least 2 classes, got {num_classes}")));
        }
        let backbone_only: Option<TensorMap> = pretrained.map(|src| {
            src.iter()
                .filter(|(k, _)| k.starts_with("backbone."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        });
        let mut b = ParamBuilder::new(seed);
        if let Some(src) = backbone_only.as_ref() {
            b = b.with_source(src, Some("backbone."));
        }
        let bb = Backbone::new(&mut b, backbone)?;
        let head = Linear::new(&mut b, "classifier", bb.feature_dim(), num_classes, true)?;
        Ok(Classifier {
            arch: Architecture {
                backbone,
                heads,
                num_classes: Some(num_classes),
            },
            backbone: bb,
            head,
            store: b.finish(),
        })
    }

    /// Rebuilds a classifier saved with `checkpoint::save`.
    pub fn from_weights(arch: Architecture, weights: &TensorMap) -> Result<Self> {
        let num_classes = arch
            .num_classes
            .ok_or_else(|| Error::Checkpoint("architecture has no classifier head".into()))?;
        let mut b = ParamBuilder::new(0).with_source(weights, Some(""));
        let bb = Backbone::new(&mut b, arch.backbone)?;
        let head = Linear::new(&mut b, "classifier", bb.feature_dim(), num_classes, true)?;
        Ok(Classifier {
            arch,
            backbone: bb,
            head,
            store: b.finish(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_features
    }

    /// `backbone_train` selects batch statistics in the backbone; a frozen
    /// backbone runs in evaluation mode.
    pub fn forward(&self, x: &Tensor, backbone_train: bool) -> Result<Tensor> {
        let h = self.backbone.forward(x, backbone_train)?;
        self.head.forward(&h)
    }

    pub fn stats(&self) -> ModelStats {
        let macs = self.backbone.macs() + self.head.macs();
        ModelStats {
            params: self.store.num_params(""),
            flops: 2 * macs,
        }
    }
}

/// Convenience wrapper: a backbone with an attached `c`-way linear head.
pub fn attach_classifier(backbone: BackboneConfig, num_classes: usize, seed: u64) -> Result<Classifier> {
    Classifier::new(backbone, HeadConfig::default(), num_classes, seed, None)
}
