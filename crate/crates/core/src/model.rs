//! Network variants: `baseline` (RGB only), `early` (guidance appended to the
//! input) and `multi` (early fusion plus a late SE-ResNet fusion path whose
//! features join the backbone output before the pyramid pooling head).

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    Backbone, BackboneConfig, ClassifierHead, InitBlock, Module, PspConfig,
    PspHead, SeResNetBlock, SeResNetConfig,
};
use crate::tensor::{concat, Buffer, Float, Mode, Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Early,
    Multi,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Early, Variant::Multi];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Early => "early",
            Variant::Multi => "multi",
        }
    }

    pub fn input_channels(&self) -> usize {
        match self {
            Variant::Baseline => 3,
            Variant::Early | Variant::Multi => 4,
        }
    }

    pub fn uses_guidance(&self) -> bool {
        *self != Variant::Baseline
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Variant::Baseline),
            "early" => Ok(Variant::Early),
            "multi" => Ok(Variant::Multi),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant `{other}` (expected baseline, early or multi)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Tiny,
    Full,
}

/// Disjoint parameter groups used by staged training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    /// Backbone, pyramid head and classifier.
    Early,
    /// Init block and SE-ResNet blocks of the late fusion path.
    Fusion,
}

impl Partition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::Early => "early",
            Partition::Fusion => "fusion",
        }
    }

    pub fn of(name: &str) -> Partition {
        if name.starts_with("fusion.") {
            Partition::Fusion
        } else {
            Partition::Early
        }
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(Partition::Early),
            "fusion" => Ok(Partition::Fusion),
            other => Err(Error::UnknownPartition(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub scale: Scale,
    /// `(height, width)` the network runs at.
    pub input_size: (usize, usize),
    pub backbone: BackboneConfig,
    /// The three SE-ResNet blocks of the fusion path; the last one downsamples.
    pub fusion: Vec<SeResNetConfig>,
    pub psp_scales: Vec<usize>,
    pub psp_out_channels: usize,
}

impl ModelConfig {
    pub fn tiny(variant: Variant) -> Self {
        ModelConfig {
            variant,
            scale: Scale::Tiny,
            input_size: (64, 64),
            backbone: BackboneConfig::tiny(),
            fusion: default_fusion(),
            psp_scales: vec![1, 2, 3, 6],
            psp_out_channels: 128,
        }
    }

    pub fn full(variant: Variant) -> Self {
        ModelConfig {
            variant,
            scale: Scale::Full,
            input_size: (512, 512),
            backbone: BackboneConfig::full(),
            fusion: default_fusion(),
            psp_scales: vec![1, 2, 3, 6],
            psp_out_channels: 512,
        }
    }

    pub fn for_scale(scale: Scale, variant: Variant) -> Self {
        match scale {
            Scale::Tiny => Self::tiny(variant),
            Scale::Full => Self::full(variant),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.variant.input_channels()
    }

    /// Width of the fusion features joining the backbone output (0 unless `multi`).
    pub fn fusion_channels(&self) -> usize {
        match self.variant {
            Variant::Multi => self.fusion.first().map_or(0, |c| c.channels),
            _ => 0,
        }
    }

    pub fn psp(&self) -> PspConfig {
        PspConfig {
            grid_scales: self.psp_scales.clone(),
            in_channels: self.backbone.out_channels() + self.fusion_channels(),
            out_channels: self.psp_out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {h}x{w} must be a positive multiple of 8"
            )));
        }
        if self.variant == Variant::Multi {
            if self.fusion.len() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "the fusion path needs 3 SE-ResNet blocks, got {}",
                    self.fusion.len()
                )));
            }
            let c = self.fusion[0].channels;
            for (i, f) in self.fusion.iter().enumerate() {
                f.validate()?;
                if f.channels != c {
                    return Err(Error::InvalidArgument(format!(
                        "fusion block {i} has {} channels, expected {c}",
                        f.channels
                    )));
                }
            }
            if self.fusion.iter().filter(|f| f.downsample).count() != 1 {
                return Err(Error::InvalidArgument(
                    "exactly one fusion block must downsample".into(),
                ));
            }
        }
        if self.psp_out_channels == 0 {
            return Err(Error::InvalidArgument("PSP output width must be positive".into()));
        }
        let psp = self.psp();
        psp.validate()?;
        let (fh, fw) = self.backbone.output_size(h, w)?;
        if let Some(&g) = psp.grid_scales.iter().find(|&&g| g > fh || g > fw) {
            return Err(Error::InvalidArgument(format!(
                "PSP grid scale {g} exceeds the {fh}x{fw} feature map"
            )));
        }
        Ok(())
    }

    /// Shape of every stage for a batch of `n`, computed without allocating
    /// any weights.
    pub fn infer_shapes(&self, n: usize) -> Result<ShapeTrace> {
        self.validate()?;
        let (h, w) = self.input_size;
        let mut trace = ShapeTrace::default();
        trace.push("input", [n, self.input_channels(), h, w]);
        let (bh, bw) = self.backbone.output_size(h, w)?;
        let backbone_c = self.backbone.out_channels();
        if self.variant == Variant::Multi {
            let c = self.fusion[0].channels;
            // 7x7 stride-2 pad-3 conv then 2x2 pooling.
            let (ih, iw) = (((h - 1) / 2 + 1) / 2, ((w - 1) / 2 + 1) / 2);
            trace.push("init", [n, c, ih, iw]);
            let (mut fh, mut fw) = (ih, iw);
            for f in &self.fusion {
                if f.downsample {
                    fh = (fh - 1) / 2 + 1;
                    fw = (fw - 1) / 2 + 1;
                }
            }
            trace.push("fusion", [n, c, fh, fw]);
            trace.push("backbone", [n, backbone_c, bh, bw]);
            if (fh, fw) != (bh, bw) {
                return Err(Error::shape(
                    "infer_shapes",
                    format!("fusion output {fh}x{fw} does not match backbone output {bh}x{bw}"),
                ));
            }
            trace.push("concat", [n, backbone_c + c, bh, bw]);
        } else {
            trace.push("backbone", [n, backbone_c, bh, bw]);
        }
        trace.push("psp", [n, self.psp_out_channels, bh, bw]);
        trace.push("output", [n, 1, h, w]);
        Ok(trace)
    }

    /// Closed-form parameter count, optionally restricted to one partition.
    pub fn analytic_param_count(&self, partition: Option<Partition>) -> usize {
        let early = self.backbone.param_count(self.input_channels())
            + self.psp().param_count()
            + ClassifierHead::<f32>::analytic_param_count(self.psp_out_channels);
        let fusion = if self.variant == Variant::Multi {
            InitBlock::<f32>::analytic_param_count(self.input_channels(), self.fusion[0].channels)
                + self.fusion.iter().map(|f| f.param_count()).sum::<usize>()
        } else {
            0
        };
        match partition {
            None => early + fusion,
            Some(Partition::Early) => early,
            Some(Partition::Fusion) => fusion,
        }
    }
}

fn default_fusion() -> Vec<SeResNetConfig> {
    vec![
        SeResNetConfig::new(256, 16, false),
        SeResNetConfig::new(256, 16, false),
        SeResNetConfig::new(256, 16, true),
    ]
}

/// Named NCHW shapes in network order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShapeTrace {
    pub stages: Vec<(&'static str, [usize; 4])>,
}

impl ShapeTrace {
    fn push(&mut self, name: &'static str, shape: [usize; 4]) {
        self.stages.push((name, shape));
    }

    pub fn get(&self, name: &str) -> Option<[usize; 4]> {
        self.stages.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
    }
}

impl fmt::Display for ShapeTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, [n, c, h, w]) in &self.stages {
            writeln!(f, "{name:<9} ({n}, {c}, {h}, {w})")?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct FusionPath<T: Float = f32> {
    pub init: InitBlock<T>,
    pub blocks: Vec<SeResNetBlock<T>>,
}

impl<T: Float> FusionPath<T> {
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = self.init.forward(x, mode)?;
        for b in &self.blocks {
            y = b.forward(&y, mode)?;
        }
        Ok(y)
    }
}

impl<T: Float> Module<T> for FusionPath<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = self.init.parameters();
        out.extend(self.blocks.parameters());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.init.parameters_mut();
        out.extend(self.blocks.parameters_mut());
        out
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut out = self.init.buffers();
        out.extend(self.blocks.buffers());
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Replace the fusion features at the concat with zeros (the early
    /// skeleton of a `multi` model).
    pub ablate_fusion: bool,
    /// Batch-norm mode for the early partition when it differs from `mode`
    /// (a frozen skeleton keeps its running statistics).
    pub skeleton_mode: Option<Mode>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions { mode: Mode::Eval, ..Default::default() }
    }

    pub fn train() -> Self {
        ForwardOptions { mode: Mode::Train, ..Default::default() }
    }
}

#[derive(Debug)]
pub struct SegModel<T: Float = f32> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub fusion: Option<FusionPath<T>>,
    pub psp: PspHead<T>,
    pub classifier: ClassifierHead<T>,
}

/// Builds a freshly initialized model; weights are a pure function of `seed`.
pub fn build_model<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<SegModel<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cin = cfg.input_channels();
    let backbone = Backbone::new("backbone", &cfg.backbone, cin, &mut rng)?;
    let fusion = if cfg.variant == Variant::Multi {
        let init = InitBlock::new("fusion.init", cin, cfg.fusion[0].channels, &mut rng);
        let blocks = cfg
            .fusion
            .iter()
            .enumerate()
            .map(|(i, f)| SeResNetBlock::new(&format!("fusion.se{}", i + 1), f, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Some(FusionPath { init, blocks })
    } else {
        None
    };
    let psp = PspHead::new("psp", &cfg.psp(), &mut rng)?;
    let classifier = ClassifierHead::new("classifier", cfg.psp_out_channels);
    Ok(SegModel { config: cfg.clone(), backbone, fusion, psp, classifier })
}

impl<T: Float> SegModel<T> {
    /// Per-pixel foreground probability `(N, 1, H, W)`. `image` is `(N, 3, H, W)`
    /// and `guidance` `(N, 1, H, W)`; guidance is required unless the variant
    /// is `baseline`, which rejects it.
    pub fn forward(
        &self,
        image: &Tensor<T>,
        guidance: Option<&Tensor<T>>,
        opts: ForwardOptions,
    ) -> Result<Tensor<T>> {
        let (n, c, h, w) = image.dims4("forward")?;
        if c != 3 {
            return Err(Error::shape("forward", format!("expected a 3-channel image, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape("forward", format!("input {h}x{w} is not divisible by 8")));
        }
        let input = match (self.config.variant.uses_guidance(), guidance) {
            (false, None) => image.clone(),
            (false, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "the baseline variant takes no guidance channel".into(),
                ))
            }
            (true, None) => {
                return Err(Error::InvalidArgument(format!(
                    "the {} variant needs a guidance channel",
                    self.config.variant
                )))
            }
            (true, Some(g)) => {
                if g.shape() != [n, 1, h, w] {
                    return Err(Error::shape(
                        "forward",
                        format!("guidance shape {:?} does not match image ({n}, 1, {h}, {w})", g.shape()),
                    ));
                }
                concat(&[image.clone(), g.clone()], 1)?
            }
        };
        let skeleton = opts.skeleton_mode.unwrap_or(opts.mode);
        let features = self.backbone.forward(&input, skeleton)?;
        let features = match &self.fusion {
            Some(fusion) => {
                let late = if opts.ablate_fusion {
                    let (_, _, fh, fw) = features.dims4("forward")?;
                    Tensor::zeros(&[n, self.config.fusion_channels(), fh, fw])
                } else {
                    fusion.forward(&input, opts.mode)?
                };
                concat(&[features, late], 1)?
            }
            None => features,
        };
        let context = self.psp.forward(&features, skeleton)?;
        self.classifier.forward(&context, h, w)
    }

    pub fn named_parameters(&self) -> Vec<&Parameter<T>> {
        self.parameters()
    }

    pub fn partition_parameters(&self, partition: Partition) -> Vec<&Parameter<T>> {
        self.parameters().into_iter().filter(|p| Partition::of(p.name()) == partition).collect()
    }

    /// Scalar count over all parameters, or over one partition.
    pub fn param_count(&self, partition: Option<Partition>) -> usize {
        self.parameters()
            .iter()
            .filter(|p| partition.map_or(true, |part| Partition::of(p.name()) == part))
            .map(|p| p.numel())
            .sum()
    }

    pub fn has_partition(&self, partition: Partition) -> bool {
        match partition {
            Partition::Early => true,
            Partition::Fusion => self.fusion.is_some(),
        }
    }

    pub fn freeze_partition(&mut self, partition: Partition) -> Result<()> {
        if !self.has_partition(partition) {
            return Err(Error::UnknownPartition(format!(
                "{} (not present in the {} variant)",
                partition.as_str(),
                self.config.variant
            )));
        }
        for p in self.parameters_mut() {
            if Partition::of(p.name()) == partition {
                p.set_frozen(true);
            }
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        for p in self.parameters_mut() {
            p.set_frozen(false);
        }
    }

    /// Freezes everything outside `partition` (or nothing when `None`).
    pub fn train_only(&mut self, partition: Option<Partition>) -> Result<()> {
        if let Some(part) = partition {
            if !self.has_partition(part) {
                return Err(Error::UnknownPartition(part.as_str().to_string()));
            }
        }
        for p in self.parameters_mut() {
            let keep = partition.map_or(true, |part| Partition::of(p.name()) == part);
            p.set_frozen(!keep);
        }
        Ok(())
    }
}

impl<T: Float> Module<T> for SegModel<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = self.backbone.parameters();
        if let Some(f) = &self.fusion {
            out.extend(f.parameters());
        }
        out.extend(self.psp.parameters());
        out.extend(self.classifier.parameters());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.backbone.parameters_mut();
        if let Some(f) = &mut self.fusion {
            out.extend(f.parameters_mut());
        }
        out.extend(self.psp.parameters_mut());
        out.extend(self.classifier.parameters_mut());
        out
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut out = self.backbone.buffers();
        if let Some(f) = &self.fusion {
            out.extend(f.buffers());
        }
        out.extend(self.psp.buffers());
        out
    }
}
