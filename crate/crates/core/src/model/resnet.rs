//! Bottleneck residual backbone adapted to single-channel 2x128 I/Q input.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::nn::{global_avg_pool, max_pool_3x3_s2, max_pool_output_hw, relu, BatchNorm, Conv2d, ParamBuilder};
use crate::dataio::FRAME_LEN;
use crate::error::{Error, Result};

const EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    /// ResNet-50 layout: [3, 4, 6, 3] bottlenecks, widths 64..512.
    FullResnet50,
    /// Same topology with widths divided by 8 and one block per stage.
    ReducedDeskScale,
}

impl BackboneVariant {
    fn stem_width(self) -> usize {
        match self {
            BackboneVariant::FullResnet50 => 64,
            BackboneVariant::ReducedDeskScale => 8,
        }
    }

    fn stage_widths(self) -> [usize; 4] {
        match self {
            BackboneVariant::FullResnet50 => [64, 128, 256, 512],
            BackboneVariant::ReducedDeskScale => [8, 16, 32, 64],
        }
    }

    fn blocks(self) -> [usize; 4] {
        match self {
            BackboneVariant::FullResnet50 => [3, 4, 6, 3],
            BackboneVariant::ReducedDeskScale => [1, 1, 1, 1],
        }
    }

    pub fn feature_dim(self) -> usize {
        self.stage_widths()[3] * EXPANSION
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub in_channels: usize,
    pub input_shape: [usize; 3],
    pub first_conv_kernel: [usize; 2],
    pub first_conv_stride: [usize; 2],
    pub feature_dim: usize,
}

impl BackboneConfig {
    pub fn new(variant: BackboneVariant) -> Self {
        BackboneConfig {
            variant,
            in_channels: 1,
            input_shape: [1, 2, FRAME_LEN],
            first_conv_kernel: [7, 7],
            first_conv_stride: [2, 2],
            feature_dim: variant.feature_dim(),
        }
    }

    pub fn full() -> Self {
        Self::new(BackboneVariant::FullResnet50)
    }

    pub fn desk() -> Self {
        Self::new(BackboneVariant::ReducedDeskScale)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.in_channels != 1 {
            v.push(format!("model.backbone.in_channels must be 1, got {}", self.in_channels));
        }
        if self.input_shape != [1, 2, FRAME_LEN] {
            v.push(format!("model.backbone.input_shape must be [1, 2, {FRAME_LEN}]"));
        }
        if self.first_conv_kernel[0] != self.first_conv_kernel[1]
            || self.first_conv_kernel[0] % 2 == 0
        {
            v.push("model.backbone.first_conv_kernel must be square and odd".into());
        }
        if self.first_conv_stride[0] != self.first_conv_stride[1] || self.first_conv_stride[0] == 0 {
            v.push("model.backbone.first_conv_stride must be square and positive".into());
        }
        if self.feature_dim != self.variant.feature_dim() {
            v.push(format!(
                "model.backbone.feature_dim {} does not match variant ({})",
                self.feature_dim,
                self.variant.feature_dim()
            ));
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

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    fn new(b: &mut ParamBuilder, name: &str, in_ch: usize, width: usize, stride: usize) -> Result<Self> {
        let out_ch = width * EXPANSION;
        let downsample = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(b, &format!("{name}.downsample.0"), in_ch, out_ch, 1, stride, 0, false)?,
                BatchNorm::new(b, &format!("{name}.downsample.1"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(Bottleneck {
            conv1: Conv2d::new(b, &format!("{name}.conv1"), in_ch, width, 1, 1, 0, false)?,
            bn1: BatchNorm::new(b, &format!("{name}.bn1"), width)?,
            conv2: Conv2d::new(b, &format!("{name}.conv2"), width, width, 3, stride, 1, false)?,
            bn2: BatchNorm::new(b, &format!("{name}.bn2"), width)?,
            conv3: Conv2d::new(b, &format!("{name}.conv3"), width, out_ch, 1, 1, 0, false)?,
            bn3: BatchNorm::new(b, &format!("{name}.bn3"), out_ch)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = relu(&self.bn1.forward(&self.conv1.forward(x)?, train)?)?;
        let y = relu(&self.bn2.forward(&self.conv2.forward(&y)?, train)?)?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, train)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        relu(&(y + shortcut)?)
    }

    fn macs(&self, hw: (usize, usize)) -> (u64, (usize, usize)) {
        let mid = self.conv2.output_hw(hw);
        let mut total = self.conv1.macs(hw) + self.conv2.macs(hw) + self.conv3.macs(mid);
        if let Some((conv, _)) = &self.downsample {
            total += conv.macs(hw);
        }
        (total, mid)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<Bottleneck>,
}

impl Backbone {
    /// Parameters are registered under `backbone.`.
    pub fn new(b: &mut ParamBuilder, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let v = config.variant;
        let k = config.first_conv_kernel[0];
        let stem = Conv2d::new(
            b,
            "backbone.conv1",
            config.in_channels,
            v.stem_width(),
            k,
            config.first_conv_stride[0],
            k / 2,
            false,
        )?;
        let stem_bn = BatchNorm::new(b, "backbone.bn1", v.stem_width())?;
        let mut blocks = Vec::new();
        let mut in_ch = v.stem_width();
        for (stage, (&width, &count)) in v.stage_widths().iter().zip(v.blocks().iter()).enumerate() {
            for i in 0..count {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let name = format!("backbone.layer{}.{i}", stage + 1);
                blocks.push(Bottleneck::new(b, &name, in_ch, width, stride)?);
                in_ch = width * EXPANSION;
            }
        }
        Ok(Backbone {
            config,
            stem,
            stem_bn,
            blocks,
        })
    }

    /// [B, 1, 2, 128] -> [B, feature_dim]
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if [c, h, w] != self.config.input_shape {
            return Err(Error::Contract(format!(
                "backbone expects [B, {:?}], got {:?}",
                self.config.input_shape,
                x.dims()
            )));
        }
        let x = x.permute((0, 2, 3, 1))?.contiguous()?;
        let mut y = relu(&self.stem_bn.forward(&self.stem.forward(&x)?, train)?)?;
        y = max_pool_3x3_s2(&y)?;
        for block in &self.blocks {
            y = block.forward(&y, train)?;
        }
        global_avg_pool(&y)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Multiply-accumulates for one forward pass of a single example.
    pub fn macs(&self) -> u64 {
        let hw = (self.config.input_shape[1], self.config.input_shape[2]);
        let mut total = self.stem.macs(hw);
        let mut hw = max_pool_output_hw(self.stem.output_hw(hw));
        for block in &self.blocks {
            let (m, next) = block.macs(hw);
            total += m;
            hw = next;
        }
        total
    }
}
