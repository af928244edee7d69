use rand::Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{BottleneckBlock, ResidualBlock};
use super::layers::{BatchNorm2d, Conv2d};
use super::Module;
use crate::error::{Error, Result};
use crate::tensor::{conv2d_output_dim, maxpool2d, relu, Buffer, Float, Mode, Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 / 3×3 / 1×1 with a 4× channel expansion.
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConfig {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// 2×2 stride-2 max pooling after the stem convolution.
    pub maxpool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub block: BlockKind,
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
}

impl BackboneConfig {
    /// Desk-scale residual network: stride-1 stem and three stride-2 stages.
    pub fn tiny() -> Self {
        BackboneConfig {
            block: BlockKind::Basic,
            stem: StemConfig { channels: 32, kernel: 3, stride: 1, maxpool: false },
            stages: vec![
                StageConfig { channels: 64, blocks: 2, stride: 2 },
                StageConfig { channels: 128, blocks: 2, stride: 2 },
                StageConfig { channels: 128, blocks: 2, stride: 2 },
            ],
        }
    }

    /// ResNet-101 layout with the last two stages kept at stride 1 so the
    /// output stride is 8.
    pub fn full() -> Self {
        BackboneConfig {
            block: BlockKind::Bottleneck,
            stem: StemConfig { channels: 64, kernel: 7, stride: 2, maxpool: true },
            stages: vec![
                StageConfig { channels: 256, blocks: 3, stride: 1 },
                StageConfig { channels: 512, blocks: 4, stride: 2 },
                StageConfig { channels: 1024, blocks: 23, stride: 1 },
                StageConfig { channels: 2048, blocks: 3, stride: 1 },
            ],
        }
    }

    pub fn output_stride(&self) -> usize {
        let pool = if self.stem.maxpool { 2 } else { 1 };
        self.stem.stride * pool * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.stem.channels, |s| s.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("backbone needs at least one stage".into()));
        }
        if self.stem.channels == 0 || self.stem.kernel % 2 == 0 || self.stem.stride == 0 {
            return Err(Error::InvalidArgument(
                "stem needs positive width, an odd kernel and a positive stride".into(),
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.blocks == 0 || !(s.stride == 1 || s.stride == 2) {
                return Err(Error::InvalidArgument(format!(
                    "stage {i}: width and block count must be positive and stride 1 or 2"
                )));
            }
            if self.block == BlockKind::Bottleneck && s.channels % 4 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "stage {i}: bottleneck width {} is not divisible by 4",
                    s.channels
                )));
            }
        }
        if self.output_stride() != 8 {
            return Err(Error::InvalidArgument(format!(
                "backbone output stride is {}, expected 8",
                self.output_stride()
            )));
        }
        Ok(())
    }

    /// Spatial size after the backbone, following the exact conv/pool formulas.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dim = |n: usize, k: usize, s: usize, p: usize| {
            conv2d_output_dim(n, k, s, p)
                .ok_or_else(|| Error::shape("backbone", format!("input of size {n} is too small")))
        };
        let k = self.stem.kernel;
        let mut h = dim(h, k, self.stem.stride, k / 2)?;
        let mut w = dim(w, k, self.stem.stride, k / 2)?;
        if self.stem.maxpool {
            h /= 2;
            w /= 2;
        }
        for s in &self.stages {
            h = dim(h, 3, s.stride, 1)?;
            w = dim(w, 3, s.stride, 1)?;
        }
        Ok((h, w))
    }

    pub fn param_count(&self, in_channels: usize) -> usize {
        let k = self.stem.kernel;
        let mut total = k * k * in_channels * self.stem.channels + 3 * self.stem.channels;
        let mut cin = self.stem.channels;
        for s in &self.stages {
            for b in 0..s.blocks {
                let stride = if b == 0 { s.stride } else { 1 };
                total += match self.block {
                    BlockKind::Basic => ResidualBlock::<f32>::analytic_param_count(cin, s.channels, stride),
                    BlockKind::Bottleneck => {
                        BottleneckBlock::<f32>::analytic_param_count(cin, s.channels, stride)
                    }
                };
                cin = s.channels;
            }
        }
        total
    }
}

#[derive(Debug)]
pub enum BackboneBlock<T: Float = f32> {
    Basic(ResidualBlock<T>),
    Bottleneck(BottleneckBlock<T>),
}

impl<T: Float> BackboneBlock<T> {
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            BackboneBlock::Basic(b) => b.forward(x, mode),
            BackboneBlock::Bottleneck(b) => b.forward(x, mode),
        }
    }
}

impl<T: Float> Module<T> for BackboneBlock<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        match self {
            BackboneBlock::Basic(b) => b.parameters(),
            BackboneBlock::Bottleneck(b) => b.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            BackboneBlock::Basic(b) => b.parameters_mut(),
            BackboneBlock::Bottleneck(b) => b.parameters_mut(),
        }
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        match self {
            BackboneBlock::Basic(b) => b.buffers(),
            BackboneBlock::Bottleneck(b) => b.buffers(),
        }
    }
}

#[derive(Debug)]
pub struct Backbone<T: Float = f32> {
    pub config: BackboneConfig,
    pub stem_conv: Conv2d<T>,
    pub stem_bn: BatchNorm2d<T>,
    pub blocks: Vec<BackboneBlock<T>>,
}

impl<T: Float> Backbone<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        config: &BackboneConfig,
        in_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.stem.kernel;
        let stem_conv = Conv2d::new(
            &format!("{name}.stem.conv"),
            in_channels,
            config.stem.channels,
            k,
            config.stem.stride,
            k / 2,
            rng,
        );
        let stem_bn = BatchNorm2d::new(&format!("{name}.stem.bn"), config.stem.channels);
        let mut blocks = Vec::new();
        let mut cin = config.stem.channels;
        for (i, s) in config.stages.iter().enumerate() {
            for b in 0..s.blocks {
                let stride = if b == 0 { s.stride } else { 1 };
                let bname = format!("{name}.layer{}.{b}", i + 1);
                blocks.push(match config.block {
                    BlockKind::Basic => {
                        BackboneBlock::Basic(ResidualBlock::new(&bname, cin, s.channels, stride, rng))
                    }
                    BlockKind::Bottleneck => BackboneBlock::Bottleneck(BottleneckBlock::new(
                        &bname, cin, s.channels, stride, rng,
                    )),
                });
                cin = s.channels;
            }
        }
        Ok(Backbone { config: config.clone(), stem_conv, stem_bn, blocks })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = relu(&self.stem_bn.forward(&self.stem_conv.forward(x)?, mode)?);
        if self.config.stem.maxpool {
            y = maxpool2d(&y, 2, 2)?;
        }
        for b in &self.blocks {
            y = b.forward(&y, mode)?;
        }
        Ok(y)
    }
}

impl<T: Float> Module<T> for Backbone<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = self.stem_conv.parameters();
        out.extend(self.stem_bn.parameters());
        out.extend(self.blocks.parameters());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.stem_conv.parameters_mut();
        out.extend(self.stem_bn.parameters_mut());
        out.extend(self.blocks.parameters_mut());
        out
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut out = self.stem_bn.buffers();
        out.extend(self.blocks.buffers());
        out
    }
}
