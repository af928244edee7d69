//! The `tapseg` command line: synthetic data, staged training, evaluation,
//! ablation tables, single-image inference and the HTTP service.
//!
//! Every command that writes artifacts also writes the fully resolved
//! configuration next to them.

pub mod config;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tapseg::checkpoint::{model_id, save_checkpoint};
use tapseg::data::{generate, load_split, ColorImage, Dataset, Split};
use tapseg::guidance::{Click, GuidanceKind};
use tapseg::inference::Predictor;
use tapseg::metrics::{binarize, evaluate_single_click, AblationReport};
use tapseg::model::{build_model, Variant};
use tapseg::train::{ablation_grid, staged_train};

pub use config::RunConfig;

/// Relative `--out` paths are resolved against this directory when set.
pub const OUT_ROOT_ENV: &str = "TAPSEG_OUT_ROOT";
pub const RESOLVED_CONFIG: &str = "resolved-config.toml";

#[derive(Debug, Parser)]
#[command(name = "tapseg", version, about = "One-click interactive segmentation")]
pub struct Cli {
    /// Sectioned TOML configuration file.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// Override a configuration value, e.g. `--set train.sgd.lr=0.02`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic corpus to a folder.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Staged training; writes stage checkpoints, `model.ckpt` and a log.
    Train {
        /// Folder-format corpus; defaults to the synthetic corpus in memory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Single-click mIoU of one checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        guidance: Option<GuidanceKind>,
    },
    /// Variant × guidance table. Each `--ckpt` is `path` (swept over
    /// `eval.kinds`) or `kind=path` (evaluated with that encoder only).
    /// Without checkpoints, one model per variant and encoder is trained
    /// with the `train` settings first.
    Ablate {
        #[arg(long = "ckpt")]
        ckpts: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one image from a click given in its pixel coordinates.
    Infer {
        #[arg(long)]
        image: PathBuf,
        /// `x,y`; only the first click is used.
        #[arg(long, required = true)]
        click: Vec<Click>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        guidance: Option<GuidanceKind>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = "TAPSEG_PORT")]
        port: Option<u16>,
        #[arg(long)]
        host: Option<String>,
    },
}

fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

/// Writes through a temporary sibling so a failed run never leaves a
/// truncated artifact behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_config(path: &Path, cfg: &RunConfig, note: Option<String>) -> Result<()> {
    let mut text = String::new();
    if let Some(n) = note {
        for line in n.lines() {
            text.push_str("# ");
            text.push_str(line);
            text.push('\n');
        }
    }
    text.push_str(&cfg.to_toml()?);
    write_atomic(path, text.as_bytes())
}

fn dataset(cfg: &RunConfig, dir: Option<&Path>, split: Split) -> Result<Dataset> {
    match dir {
        Some(d) => load_split(d, split).with_context(|| format!("loading {split} split from {}", d.display())),
        None => Ok(cfg.data.split(split)?),
    }
}

fn load_model(path: &Path) -> Result<(tapseg::model::SegModel<f32>, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let model = tapseg::checkpoint::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok((model, model_id(&bytes)))
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::GenData { out, seed } => {
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let out = out_path(&out);
            generate(&cfg.data, &out)?;
            write_config(&out.join(RESOLVED_CONFIG), &cfg, None)?;
            println!("wrote {} samples to {}", cfg.data.n_train + cfg.data.n_val + cfg.data.n_test, out.display());
        }
        Command::Train { data, out } => {
            let out = out_path(&out);
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let train = dataset(&cfg, data.as_deref(), Split::Train)?;
            let val = dataset(&cfg, data.as_deref(), Split::Val)?;
            let mut model = build_model::<f32>(&cfg.model.model_config(), cfg.model.seed)?;
            let schedule = cfg.train.for_variant(cfg.model.variant);
            let log = staged_train(&mut model, &train, Some(&val), &schedule, Some(&out), |r| {
                println!(
                    "epoch {:>3} {:<6} loss {:.5} val mIoU {} ({:.1}s)",
                    r.epoch,
                    r.stage.as_str(),
                    r.loss,
                    r.val_miou.map_or("-".into(), |v| format!("{v:.4}")),
                    r.wall_time
                )
            })?;
            write_atomic(&out.join("train_log.jsonl"), log.to_json_lines().as_bytes())?;
            let id = save_checkpoint(&model, out.join("model.ckpt"))?;
            write_config(&out.join(RESOLVED_CONFIG), &cfg, Some(format!("model id {id}")))?;
            println!("model {id} written to {}", out.join("model.ckpt").display());
        }
        Command::Eval { ckpt, data, out, guidance } => {
            let (model, id) = load_model(&ckpt)?;
            if let Some(k) = guidance {
                cfg.eval.guidance.kind = k;
            }
            let set = dataset(&cfg, data.as_deref(), cfg.eval.split)?;
            let res = evaluate_single_click(&model, &set, &cfg.eval.guidance, cfg.eval.threshold)?;
            let out = out_path(&out);
            write_atomic(&out.join("eval.json"), serde_json::to_string_pretty(&res)?.as_bytes())?;
            write_config(
                &out.join(RESOLVED_CONFIG),
                &cfg,
                Some(format!("checkpoint {} (model id {id})", ckpt.display())),
            )?;
            println!("mIoU {:.4} over {} instances", res.mean_iou, res.per_instance_iou.len());
        }
        Command::Ablate { ckpts, data, out } => {
            let set = dataset(&cfg, data.as_deref(), cfg.eval.split)?;
            let mut results = Vec::new();
            let mut notes = Vec::new();
            if ckpts.is_empty() {
                let train = dataset(&cfg, data.as_deref(), Split::Train)?;
                let mut run = cfg.train.clone();
                run.threshold = cfg.eval.threshold;
                results = ablation_grid(
                    &Variant::ALL,
                    &cfg.eval.kinds,
                    &train,
                    &set,
                    &run,
                    cfg.model.scale,
                    cfg.model.seed,
                )?;
                notes.push("trained grid over all variants".to_string());
            }
            for entry in &ckpts {
                let (kinds, path) = match entry.split_once('=') {
                    Some((k, p)) => (vec![k.parse::<GuidanceKind>()?], PathBuf::from(p)),
                    None => (cfg.eval.kinds.clone(), PathBuf::from(entry)),
                };
                let (model, id) = load_model(&path)?;
                notes.push(format!("checkpoint {} (model id {id})", path.display()));
                let kinds = if model.variant().uses_guidance() { kinds } else { vec![cfg.eval.guidance.kind] };
                for kind in kinds {
                    let mut g = cfg.eval.guidance;
                    g.kind = kind;
                    results.push(evaluate_single_click(&model, &set, &g, cfg.eval.threshold)?);
                }
            }
            let report = AblationReport::from_results(&results);
            let out = out_path(&out);
            write_atomic(&out.join("ablation.tsv"), report.to_tsv().as_bytes())?;
            write_atomic(&out.join("ablation.txt"), report.to_text().as_bytes())?;
            write_config(&out.join(RESOLVED_CONFIG), &cfg, Some(notes.join("\n")))?;
            print!("{}", report.to_text());
        }
        Command::Infer { image, click, ckpt, out, guidance, threshold } => {
            let (model, id) = load_model(&ckpt)?;
            if let Some(k) = guidance {
                cfg.eval.guidance.kind = k;
            }
            if let Some(t) = threshold {
                cfg.eval.threshold = t;
            }
            let img = ColorImage::load(&image).with_context(|| format!("reading image {}", image.display()))?;
            let prob = model.predict(&img, &click[..1], &cfg.eval.guidance)?;
            let mask = binarize(&prob, cfg.eval.threshold)?;
            let png = mask.to_png()?;
            let out = out_path(&out);
            write_atomic(&out, &png)?;
            let mut cfg_path = out.as_os_str().to_owned();
            cfg_path.push(".config.toml");
            write_config(
                Path::new(&cfg_path),
                &cfg,
                Some(format!("checkpoint {} (model id {id})\nimage {} click {}", ckpt.display(), image.display(), click[0])),
            )?;
            let (min, max, mean) = prob.stats();
            println!(
                "mask {}x{} ({} foreground pixels, p min {min:.3} max {max:.3} mean {mean:.3}) written to {}",
                mask.width,
                mask.height,
                mask.count(),
                out.display()
            );
        }
        Command::Serve { ckpt, port, host } => {
            if !ckpt.is_file() {
                bail!("checkpoint {} does not exist", ckpt.display());
            }
            let host = host.unwrap_or_else(|| cfg.serve.host.clone());
            let port = port.unwrap_or(cfg.serve.port);
            let addr: SocketAddr =
                format!("{host}:{port}").parse().with_context(|| format!("invalid address {host}:{port}"))?;
            let mut service = tapseg_service::ServiceConfig {
                max_pixels: cfg.serve.max_pixels,
                guidance: cfg.eval.guidance,
                cors_origin: cfg.serve.cors_origin.clone(),
                ..Default::default()
            };
            if cfg.serve.workers > 0 {
                service.workers = cfg.serve.workers;
            }
            log::info!("resolved configuration:\n{}", cfg.to_toml()?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(tapseg_service::serve(addr, ckpt, service))?;
        }
    }
    Ok(())
}
