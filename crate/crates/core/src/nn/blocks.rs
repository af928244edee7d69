use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Conv2d, Linear};
use super::{delegate_module, Module};
use crate::error::{Error, Result};
use crate::tensor::{
    add, adaptive_avgpool, bilinear_upsample, concat, global_avgpool, maxpool2d, mul, relu,
    reshape, sigmoid, Buffer, Float, Mode, Parameter, Tensor,
};

/// Parameters of a `k×k` convolution with bias.
fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    k * k * cin * cout + cout
}

/// 7×7 stride-2 convolution, batch norm, ReLU and 2×2 stride-2 max pooling:
/// `(N, C, H, W) -> (N, out, H/4, W/4)`.
#[derive(Debug)]
pub struct InitBlock<T: Float = f32> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

delegate_module!(InitBlock, [conv, bn]);

impl<T: Float> InitBlock<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        InitBlock {
            conv: Conv2d::new(&format!("{name}.conv"), in_channels, out_channels, 7, 2, 3, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_channels),
        }
    }

    pub fn analytic_param_count(in_channels: usize, out_channels: usize) -> usize {
        conv_params(in_channels, out_channels, 7) + 2 * out_channels
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (_, _, h, w) = x.dims4("init_block")?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(
                "init_block",
                format!("spatial size {h}x{w} is not divisible by 4"),
            ));
        }
        let y = relu(&self.bn.forward(&self.conv.forward(x)?, mode)?);
        maxpool2d(&y, 2, 2)
    }
}

/// Two 3×3 conv + batch-norm stages with an identity (or 1×1 projection)
/// shortcut, followed by ReLU.
#[derive(Debug)]
pub struct ResidualBlock<T: Float = f32> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub projection: Option<(Conv2d<T>, BatchNorm2d<T>)>,
}

delegate_module!(ResidualBlock, [conv1, bn1, conv2, bn2], opt [projection]);

impl<T: Float> ResidualBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let projection = (stride != 1 || in_channels != out_channels).then(|| {
            (
                Conv2d::new(&format!("{name}.proj"), in_channels, out_channels, 1, stride, 0, rng),
                BatchNorm2d::new(&format!("{name}.proj_bn"), out_channels),
            )
        });
        ResidualBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), in_channels, out_channels, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), out_channels),
            conv2: Conv2d::new(&format!("{name}.conv2"), out_channels, out_channels, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_channels),
            projection,
        }
    }

    pub fn analytic_param_count(in_channels: usize, out_channels: usize, stride: usize) -> usize {
        let main = conv_params(in_channels, out_channels, 3)
            + conv_params(out_channels, out_channels, 3)
            + 4 * out_channels;
        let projection = if stride != 1 || in_channels != out_channels {
            conv_params(in_channels, out_channels, 1) + 2 * out_channels
        } else {
            0
        };
        main + projection
    }

    /// Residual branch before the shortcut is added.
    pub fn branch(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = relu(&self.bn1.forward(&self.conv1.forward(x)?, mode)?);
        self.bn2.forward(&self.conv2.forward(&y)?, mode)
    }

    pub fn shortcut(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match &self.projection {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode),
            None => {
                let c = x.dims4("residual_block")?.1;
                if c != self.conv2.out_channels() {
                    return Err(Error::shape(
                        "residual_block",
                        format!(
                            "identity shortcut needs {} channels, got {c}",
                            self.conv2.out_channels()
                        ),
                    ));
                }
                Ok(x.clone())
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(relu(&add(&self.branch(x, mode)?, &self.shortcut(x, mode)?)?))
    }
}

/// ResNet bottleneck: 1×1 reduce to `out/4`, 3×3 (strided), 1×1 expand.
#[derive(Debug)]
pub struct BottleneckBlock<T: Float = f32> {
    pub reduce: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub expand: Conv2d<T>,
    pub bn3: BatchNorm2d<T>,
    pub projection: Option<(Conv2d<T>, BatchNorm2d<T>)>,
}

delegate_module!(BottleneckBlock, [reduce, bn1, conv, bn2, expand, bn3], opt [projection]);

impl<T: Float> BottleneckBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let mid = out_channels / 4;
        let projection = (stride != 1 || in_channels != out_channels).then(|| {
            (
                Conv2d::new(&format!("{name}.proj"), in_channels, out_channels, 1, stride, 0, rng),
                BatchNorm2d::new(&format!("{name}.proj_bn"), out_channels),
            )
        });
        BottleneckBlock {
            reduce: Conv2d::new(&format!("{name}.reduce"), in_channels, mid, 1, 1, 0, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), mid),
            conv: Conv2d::new(&format!("{name}.conv"), mid, mid, 3, stride, 1, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), mid),
            expand: Conv2d::new(&format!("{name}.expand"), mid, out_channels, 1, 1, 0, rng),
            bn3: BatchNorm2d::new(&format!("{name}.bn3"), out_channels),
            projection,
        }
    }

    pub fn analytic_param_count(in_channels: usize, out_channels: usize, stride: usize) -> usize {
        let mid = out_channels / 4;
        let main = conv_params(in_channels, mid, 1)
            + conv_params(mid, mid, 3)
            + conv_params(mid, out_channels, 1)
            + 4 * mid
            + 2 * out_channels;
        let projection = if stride != 1 || in_channels != out_channels {
            conv_params(in_channels, out_channels, 1) + 2 * out_channels
        } else {
            0
        };
        main + projection
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = relu(&self.bn1.forward(&self.reduce.forward(x)?, mode)?);
        let y = relu(&self.bn2.forward(&self.conv.forward(&y)?, mode)?);
        let y = self.bn3.forward(&self.expand.forward(&y)?, mode)?;
        let skip = match &self.projection {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok(relu(&add(&y, &skip)?))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeResNetConfig {
    pub channels: usize,
    /// Bottleneck ratio `r` of the excitation MLP.
    pub reduction: usize,
    /// Stride-2 first convolution with a projection shortcut.
    pub downsample: bool,
}

impl SeResNetConfig {
    pub fn new(channels: usize, reduction: usize, downsample: bool) -> Self {
        SeResNetConfig { channels, reduction, downsample }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || self.channels == 0 || self.channels % self.reduction != 0 {
            return Err(Error::InvalidArgument(format!(
                "SE channels {} must be a positive multiple of the reduction ratio {}",
                self.channels, self.reduction
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        if self.downsample {
            2
        } else {
            1
        }
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let hidden = c / self.reduction;
        ResidualBlock::<f32>::analytic_param_count(c, c, self.stride())
            + (c * hidden + hidden)
            + (hidden * c + c)
    }
}

/// Residual block whose branch output is rescaled per channel by a
/// squeeze-and-excitation gate before the shortcut is added.
#[derive(Debug)]
pub struct SeResNetBlock<T: Float = f32> {
    pub residual: ResidualBlock<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    /// Forces the gate to 1, reducing the block to a plain residual block.
    pub bypass_excitation: bool,
}

delegate_module!(SeResNetBlock, [residual, fc1, fc2]);

impl<T: Float> SeResNetBlock<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: &SeResNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let hidden = c / cfg.reduction;
        Ok(SeResNetBlock {
            residual: ResidualBlock::new(name, c, c, cfg.stride(), rng),
            fc1: Linear::new(&format!("{name}.se_fc1"), c, hidden, rng),
            fc2: Linear::new(&format!("{name}.se_fc2"), hidden, c, rng),
            bypass_excitation: false,
        })
    }

    /// Per-channel gate `sigmoid(fc2(relu(fc1(mean_hw(u)))))`, shaped `(N, C, 1, 1)`.
    pub fn excitation(&self, u: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, _, _) = u.dims4("se_resnet_block")?;
        let squeezed = reshape(&global_avgpool(u)?, &[n, c])?;
        let hidden = relu(&self.fc1.forward(&squeezed)?);
        let gate = sigmoid(&self.fc2.forward(&hidden)?);
        reshape(&gate, &[n, c, 1, 1])
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let u = self.residual.branch(x, mode)?;
        let scaled = if self.bypass_excitation { u } else { mul(&u, &self.excitation(&u)?)? };
        Ok(relu(&add(&scaled, &self.residual.shortcut(x, mode)?)?))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PspConfig {
    pub grid_scales: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PspConfig {
    pub fn branch_channels(&self) -> usize {
        self.in_channels / self.grid_scales.len().max(1)
    }

    /// Channels entering the final 3×3 convolution.
    pub fn concat_channels(&self) -> usize {
        self.in_channels + self.grid_scales.len() * self.branch_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_scales.is_empty() || self.grid_scales.contains(&0) {
            return Err(Error::InvalidArgument("PSP needs positive grid scales".into()));
        }
        if self.in_channels % self.grid_scales.len() != 0 {
            return Err(Error::InvalidArgument(format!(
                "PSP input width {} is not divisible by {} pyramid levels",
                self.in_channels,
                self.grid_scales.len()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let b = self.branch_channels();
        let branches = self.grid_scales.len() * (conv_params(self.in_channels, b, 1) + 2 * b);
        branches + conv_params(self.concat_channels(), self.out_channels, 3) + 2 * self.out_channels
    }
}

#[derive(Debug)]
pub struct PspBranch<T: Float = f32> {
    pub grid: usize,
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

delegate_module!(PspBranch, [conv, bn]);

/// Pyramid pooling head: pooled context at several grid sizes, upsampled,
/// concatenated with the input and fused by a 3×3 convolution.
#[derive(Debug)]
pub struct PspHead<T: Float = f32> {
    pub branches: Vec<PspBranch<T>>,
    pub fuse: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

delegate_module!(PspHead, [branches, fuse, bn]);

impl<T: Float> PspHead<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: &PspConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.branch_channels();
        let branches = cfg
            .grid_scales
            .iter()
            .enumerate()
            .map(|(i, &grid)| PspBranch {
                grid,
                conv: Conv2d::new(&format!("{name}.pool{i}.conv"), cfg.in_channels, b, 1, 1, 0, rng),
                bn: BatchNorm2d::new(&format!("{name}.pool{i}.bn"), b),
            })
            .collect();
        Ok(PspHead {
            branches,
            fuse: Conv2d::new(&format!("{name}.fuse"), cfg.concat_channels(), cfg.out_channels, 3, 1, 1, rng),
            bn: BatchNorm2d::new(&format!("{name}.fuse_bn"), cfg.out_channels),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (_, _, h, w) = x.dims4("psp_head")?;
        let mut parts = vec![x.clone()];
        for b in &self.branches {
            if b.grid > h || b.grid > w {
                return Err(Error::shape(
                    "psp_head",
                    format!("grid scale {} exceeds the {h}x{w} feature map", b.grid),
                ));
            }
            let pooled = adaptive_avgpool(x, b.grid, b.grid)?;
            let y = relu(&b.bn.forward(&b.conv.forward(&pooled)?, mode)?);
            parts.push(bilinear_upsample(&y, h, w)?);
        }
        let cat = concat(&parts, 1)?;
        Ok(relu(&self.bn.forward(&self.fuse.forward(&cat)?, mode)?))
    }
}

/// 1×1 convolution to one channel, bilinear resize to the input size, sigmoid.
/// Resizing the logits rather than the probabilities keeps boundaries sharp
/// between the coarse feature cells.
#[derive(Debug)]
pub struct ClassifierHead<T: Float = f32> {
    pub conv: Conv2d<T>,
}

delegate_module!(ClassifierHead, [conv]);

impl<T: Float> ClassifierHead<T> {
    /// Zero-initialized, so an untrained head predicts 0.5 everywhere.
    pub fn new(name: &str, in_channels: usize) -> Self {
        ClassifierHead { conv: Conv2d::zeroed(&format!("{name}.conv"), in_channels, 1, 1, 1, 0) }
    }

    pub fn analytic_param_count(in_channels: usize) -> usize {
        conv_params(in_channels, 1, 1)
    }

    pub fn forward(&self, x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let logits = bilinear_upsample(&self.conv.forward(x)?, out_h, out_w)?;
        Ok(sigmoid(&logits))
    }
}
