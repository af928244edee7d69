//! Staged training: the early skeleton first (fusion features zeroed), then
//! the fusion path alone with the skeleton frozen, then everything jointly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::clicks::ClickSampler;
use crate::data::{Dataset, InstanceSample};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceKind};
use crate::loss::{class_balanced_bce, LossConfig};
use crate::metrics::{evaluate_single_click, EvalResult};
use crate::model::{build_model, ForwardOptions, ModelConfig, Partition, Scale, SegModel, Variant};
use crate::nn::Module;
use crate::optim::{Sgd, SgdConfig};
use crate::tensor::{Mode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    /// Backbone and head; the fusion path is frozen and its features zeroed.
    Early,
    /// Fusion path only.
    Fusion,
    /// All parameters.
    Joint,
}

impl StageKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageKind::Early => "early",
            StageKind::Fusion => "fusion",
            StageKind::Joint => "joint",
        }
    }

    fn partition(&self) -> Option<Partition> {
        match self {
            StageKind::Early => Some(Partition::Early),
            StageKind::Fusion => Some(Partition::Fusion),
            StageKind::Joint => None,
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub kind: StageKind,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub stages: Vec<Stage>,
    pub seed: u64,
    pub loss: LossConfig,
    pub guidance: GuidanceConfig,
    pub clicks: ClickSampler,
    /// Random horizontal flips.
    pub flip: bool,
    /// Binarization threshold for validation mIoU.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl TrainConfig {
    /// Desk-scale schedule (10, 5, 5) at learning rate 1e-2.
    pub fn tiny() -> Self {
        TrainConfig {
            sgd: SgdConfig { lr: 1e-2, momentum: 0.9, weight_decay: 5e-4 },
            batch_size: 5,
            stages: vec![
                Stage { kind: StageKind::Early, epochs: 10 },
                Stage { kind: StageKind::Fusion, epochs: 5 },
                Stage { kind: StageKind::Joint, epochs: 5 },
            ],
            seed: 0,
            loss: LossConfig::default(),
            guidance: GuidanceConfig::default(),
            clicks: ClickSampler::default(),
            flip: true,
            threshold: 0.5,
        }
    }

    /// Settings for a pretrained full-scale network.
    pub fn full() -> Self {
        TrainConfig {
            sgd: SgdConfig { lr: 1e-8, momentum: 0.9, weight_decay: 5e-4 },
            stages: vec![
                Stage { kind: StageKind::Early, epochs: 32 },
                Stage { kind: StageKind::Fusion, epochs: 8 },
                Stage { kind: StageKind::Joint, epochs: 5 },
            ],
            ..Self::tiny()
        }
    }

    /// The stages that apply to `variant`: models without a fusion path only
    /// train the early skeleton.
    pub fn stages_for(&self, variant: Variant) -> Vec<Stage> {
        match variant {
            Variant::Multi => self.stages.clone(),
            _ => self.stages.iter().filter(|s| s.kind == StageKind::Early).copied().collect(),
        }
    }

    /// This config with its schedule trimmed to [`TrainConfig::stages_for`],
    /// so one schedule can drive every variant.
    pub fn for_variant(&self, variant: Variant) -> TrainConfig {
        TrainConfig { stages: self.stages_for(variant), ..self.clone() }
    }

    pub fn validate(&self, scale: Scale) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch size must be at least 2 for batch norm".into()));
        }
        if !(self.sgd.lr >= 0.0 && self.sgd.momentum >= 0.0 && self.sgd.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("lr, momentum and weight decay must be non-negative".into()));
        }
        if scale == Scale::Full {
            let ranges = [(StageKind::Early, 30, 35), (StageKind::Fusion, 5, 10), (StageKind::Joint, 5, 5)];
            for s in &self.stages {
                let (_, lo, hi) = ranges.iter().find(|(k, _, _)| *k == s.kind).unwrap();
                if s.epochs < *lo || s.epochs > *hi {
                    return Err(Error::InvalidArgument(format!(
                        "full-scale {} stage needs {lo}..={hi} epochs, got {}",
                        s.kind, s.epochs
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: StageKind,
    pub stage_epoch: usize,
    pub loss: f64,
    pub val_miou: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    /// Everything except wall-clock times.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                (a.epoch, a.stage, a.stage_epoch) == (b.epoch, b.stage, b.stage_epoch)
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.val_miou.map(f64::to_bits) == b.val_miou.map(f64::to_bits)
            })
    }
}

/// Network input, guidance and target tensors for a training batch.
pub fn make_batch<R: Rng>(
    model: &SegModel<f32>,
    samples: &[&InstanceSample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Tensor<f32>, Option<Tensor<f32>>, Tensor<f32>)> {
    let (h, w) = model.config.input_size;
    let n = samples.len();
    let mut pixels = Vec::with_capacity(n * 3 * h * w);
    let mut guidance = Vec::with_capacity(n * h * w);
    let mut target = Vec::with_capacity(n * h * w);
    for s in samples {
        let (mut image, mut mask) = (s.image.resized(h, w), s.mask.resized(h, w));
        if cfg.flip && rng.gen_bool(0.5) {
            image = image.flipped();
            mask = mask.flipped();
        }
        if mask.is_empty() {
            return Err(Error::Dataset(format!("`{}`: target vanishes at {h}x{w}", s.id)));
        }
        let click = cfg.clicks.sample(&mask, rng)?;
        if model.config.variant.uses_guidance() {
            guidance.extend(cfg.guidance.encode(&[click], h, w)?.values);
        }
        pixels.extend(image.data);
        target.extend(mask.data.iter().map(|&b| b as u8 as f32));
    }
    let g = if model.config.variant.uses_guidance() {
        Some(Tensor::new(guidance, &[n, 1, h, w])?)
    } else {
        None
    };
    Ok((Tensor::new(pixels, &[n, 3, h, w])?, g, Tensor::new(target, &[n, 1, h, w])?))
}

/// Loss of one optimizer step on `samples`.
pub fn train_step<R: Rng>(
    model: &mut SegModel<f32>,
    opt: &mut Sgd<f32>,
    samples: &[&InstanceSample],
    cfg: &TrainConfig,
    stage: StageKind,
    rng: &mut R,
) -> Result<f64> {
    let (image, guidance, target) = make_batch(model, samples, cfg, rng)?;
    let opts = ForwardOptions {
        mode: Mode::Train,
        ablate_fusion: stage == StageKind::Early && model.fusion.is_some(),
        skeleton_mode: (stage == StageKind::Fusion).then_some(Mode::Eval),
    };
    let pred = model.forward(&image, guidance.as_ref(), opts)?;
    let report = class_balanced_bce(&pred, &target, &cfg.loss)?;
    report.loss.backward()?;
    opt.step(model.parameters_mut())?;
    Ok(report.total())
}

/// Runs every stage that applies to the model's variant. Validation mIoU is
/// computed after each epoch when `val` is given; checkpoints are written
/// to `checkpoint_dir` at each stage boundary. `on_epoch` sees each record
/// as it is produced.
pub fn staged_train(
    model: &mut SegModel<f32>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    if train.len() < 2 {
        return Err(Error::Dataset("training needs at least two samples".into()));
    }
    cfg.validate(model.config.scale)?;
    if model.fusion.is_none() {
        if let Some(s) = cfg.stages.iter().find(|s| s.kind == StageKind::Fusion) {
            return Err(Error::UnknownPartition(format!(
                "{} stage on a {} model without a fusion path",
                s.kind, model.config.variant
            )));
        }
    }
    let stages = cfg.stages_for(model.config.variant);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let start = Instant::now();
    let mut epoch = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for (si, stage) in stages.iter().enumerate() {
        model.train_only(stage.kind.partition())?;
        let mut opt = Sgd::new(cfg.sgd);
        for stage_epoch in 0..stage.epochs {
            order.shuffle(&mut rng);
            let (mut total, mut steps) = (0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                // A single-image batch would leave batch norm without statistics
                // on the 1×1 pyramid level.
                if chunk.len() < 2 {
                    continue;
                }
                let batch: Vec<&InstanceSample> = chunk.iter().map(|&i| &train.samples[i]).collect();
                total += train_step(model, &mut opt, &batch, cfg, stage.kind, &mut rng)?;
                steps += 1;
            }
            let val_miou = match val {
                Some(v) if !v.is_empty() => {
                    Some(evaluate_single_click(&*model, v, &cfg.guidance, cfg.threshold)?.mean_iou)
                }
                _ => None,
            };
            let record = EpochRecord {
                epoch,
                stage: stage.kind,
                stage_epoch,
                loss: total / steps.max(1) as f64,
                val_miou,
                wall_time: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {epoch} ({} {stage_epoch}): loss {:.5} val mIoU {}",
                stage.kind,
                record.loss,
                val_miou.map_or("-".to_string(), |v| format!("{v:.4}"))
            );
            on_epoch(&record);
            log.records.push(record);
            epoch += 1;
        }
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("stage{}-{}.ckpt", si + 1, stage.kind));
            save_checkpoint(model, &path)?;
            log.checkpoints.push(path);
        }
    }
    model.unfreeze_all();
    Ok(log)
}

/// Trains one model per variant and encoder (a single one for `baseline`,
/// which takes no guidance) and scores each on `test` with one click per
/// instance. Rows come out in the order of `variants`, then `kinds`.
pub fn ablation_grid(
    variants: &[Variant],
    kinds: &[GuidanceKind],
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    scale: Scale,
    model_seed: u64,
) -> Result<Vec<EvalResult>> {
    let mut results = Vec::new();
    for &variant in variants {
        let kinds: Vec<GuidanceKind> = if variant.uses_guidance() { kinds.to_vec() } else { vec![cfg.guidance.kind] };
        for kind in kinds {
            let mut run = cfg.for_variant(variant);
            run.guidance.kind = kind;
            let mut model = build_model::<f32>(&ModelConfig::for_scale(scale, variant), model_seed)?;
            staged_train(&mut model, train, None, &run, None, |_| {})?;
            results.push(evaluate_single_click(&model, test, &run.guidance, run.threshold)?);
        }
    }
    Ok(results)
}
