use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::nn::{relu, BatchNorm, Linear, ParamBuilder};
use crate::error::{Error, Result};

pub const PROJECTION_WIDTHS: [usize; 5] = [256, 512, 1024, 2048, 4096];

/// Hidden width `projection_width` is shared by both heads; both emit
/// `embedding_dim` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub projection_width: usize,
    pub embedding_dim: usize,
    pub projection_layers: usize,
    pub prediction_layers: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            projection_width: 512,
            embedding_dim: 256,
            projection_layers: 3,
            prediction_layers: 2,
        }
    }
}

impl HeadConfig {
    pub fn with_width(projection_width: usize) -> Self {
        HeadConfig {
            projection_width,
            ..Self::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !PROJECTION_WIDTHS.contains(&self.projection_width) {
            v.push(format!(
                "model.heads.projection_width {} not in {PROJECTION_WIDTHS:?}",
                self.projection_width
            ));
        }
        if self.embedding_dim != 256 {
            v.push(format!("model.heads.embedding_dim must be 256, got {}", self.embedding_dim));
        }
        if self.projection_layers != 3 || self.prediction_layers != 2 {
            v.push("model.heads: projection has 3 layers and prediction 2".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// Linear layers with batch norm and ReLU after all but the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    linears: Vec<Linear>,
    norms: Vec<BatchNorm>,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder, name: &str, widths: &[usize]) -> Result<Self> {
        let n = widths.len() - 1;
        let mut linears = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n - 1);
        for i in 0..n {
            let last = i + 1 == n;
            linears.push(Linear::new(b, &format!("{name}.{i}.linear"), widths[i], widths[i + 1], last)?);
            if !last {
                norms.push(BatchNorm::new(b, &format!("{name}.{i}.bn"), widths[i + 1])?);
            }
        }
        Ok(Mlp { linears, norms })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        for (i, lin) in self.linears.iter().enumerate() {
            y = lin.forward(&y)?;
            if let Some(bn) = self.norms.get(i) {
                y = relu(&bn.forward(&y, train)?)?;
            }
        }
        Ok(y)
    }

    pub fn widths(&self) -> Vec<(usize, usize)> {
        self.linears.iter().map(|l| (l.in_features, l.out_features)).collect()
    }

    pub fn macs(&self) -> u64 {
        self.linears.iter().map(Linear::macs).sum()
    }
}

/// Projection `feature_dim -> P -> P -> 256` under `projection.` and
/// prediction `256 -> P -> 256` under `prediction.`.
pub fn build_heads(b: &mut ParamBuilder, config: &HeadConfig, feature_dim: usize) -> Result<(Mlp, Mlp)> {
    config.validate()?;
    let p = config.projection_width;
    let e = config.embedding_dim;
    let projection = Mlp::new(b, "projection", &[feature_dim, p, p, e])?;
    let prediction = Mlp::new(b, "prediction", &[e, p, e])?;
    Ok((projection, prediction))
}

pub fn build_projection(b: &mut ParamBuilder, config: &HeadConfig, feature_dim: usize) -> Result<Mlp> {
    config.validate()?;
    let p = config.projection_width;
    Mlp::new(b, "projection", &[feature_dim, p, p, config.embedding_dim])
}
