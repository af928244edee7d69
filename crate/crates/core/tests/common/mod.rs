//! Oracles shared by the integration suites and the acceptance runner.
//! Everything here is written independently of the library's own helpers:
//! brute-force loops and closed-form counts.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapseg::clicks::{center_of_mass, ClickSampler};
use tapseg::guidance::{Click, GuidanceConfig, GuidanceKind};
use tapseg::loss::{class_balanced_bce, LossConfig, WeightScheme};
use tapseg::mask::Mask;
use tapseg::model::{ModelConfig, Partition, SegModel, Variant};
use tapseg::nn::{
    BackboneBlock, BatchNorm2d, BottleneckBlock, ClassifierHead, InitBlock, Linear, Module, PspConfig, PspHead,
    ResidualBlock, SeResNetBlock, SeResNetConfig,
};
use tapseg::tensor::{
    adaptive_avgpool, add, batch_norm2d, bilinear_upsample, concat, conv2d, global_avgpool, grad_check, matmul,
    maxpool2d, mean, mul, no_grad, relu, reshape, scale, sigmoid, sub, sum, BatchNormOptions, Mode, RunningStats,
    Tensor,
};
use tapseg::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- gradients

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;
const EPS: f64 = 1e-6;
/// Parameter coordinates probed per tensor in composite checks.
const PARAM_PROBES: usize = 12;

pub struct GradOutcome {
    pub name: &'static str,
    pub composite: bool,
    pub max_rel_error: f64,
}

impl GradOutcome {
    pub fn tol(&self) -> f64 {
        if self.composite {
            COMPOSITE_TOL
        } else {
            PRIMITIVE_TOL
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol()
    }
}

fn leaf(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r).requires_grad_(true)
}

fn positive(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, r).requires_grad_(true)
}

fn check(f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>, inputs: &[Tensor<f64>]) -> f64 {
    grad_check(f, inputs, EPS).expect("gradient check ran").max_relative_error
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Randomizes every parameter of `m` so zero-initialized layers (biases,
/// the classifier) are exercised away from zero.
fn randomize<M: Module<f64>>(m: &mut M, r: &mut ChaCha8Rng) {
    for p in m.parameters_mut() {
        let n = p.numel();
        let scale = 0.4;
        let data: Vec<f64> = if p.name().ends_with(".weight") && p.shape().len() == 1 {
            (0..n).map(|_| 1.0 + r.gen_range(-scale..scale)).collect()
        } else {
            (0..n).map(|_| r.gen_range(-scale..scale)).collect()
        };
        p.assign(data).unwrap();
    }
}

/// Input gradient via `grad_check`, then parameter gradients by central
/// differences on a deterministic subset of coordinates of every tensor.
fn module_check<M: Module<f64>>(
    m: &mut M,
    x: Tensor<f64>,
    f: impl Fn(&M, &Tensor<f64>) -> Result<Tensor<f64>>,
    r: &mut ChaCha8Rng,
) -> f64 {
    let worst_input = check(|xs| f(m, &xs[0]), &[x.clone()]);
    let x = x.detach();
    let out_shape = no_grad(|| f(m, &x)).unwrap().shape().to_vec();
    let w = Tensor::<f64>::uniform(&out_shape, 0.5, 1.5, r);
    let objective = |m: &M| -> f64 {
        let y = no_grad(|| f(m, &x)).unwrap();
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    // Round-off in the central difference. A conv bias feeding train-mode
    // batch norm has an exactly zero gradient, and its numeric estimate is
    // this noise alone.
    let magnitude: f64 = {
        let y = no_grad(|| f(m, &x)).unwrap();
        y.data().iter().zip(w.data()).map(|(a, b)| (a * b).abs()).sum()
    };
    let noise = 16.0 * f64::EPSILON * magnitude.max(1.0) / EPS;
    for p in m.parameters() {
        p.zero_grad();
    }
    sum(&mul(&f(m, &x).unwrap(), &w).unwrap()).backward().unwrap();
    let grads: Vec<Vec<f64>> =
        m.parameters().iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect();
    let mut worst = worst_input;
    let count = grads.len();
    for pi in 0..count {
        let numel = grads[pi].len();
        let coords: Vec<usize> = if numel <= PARAM_PROBES {
            (0..numel).collect()
        } else {
            (0..PARAM_PROBES).map(|_| r.gen_range(0..numel)).collect()
        };
        for i in coords {
            let original = m.parameters()[pi].tensor().to_vec();
            let mut shifted = |delta: f64| {
                let mut d = original.clone();
                d[i] += delta;
                m.parameters_mut()[pi].assign(d).unwrap();
                objective(m)
            };
            let numeric = (shifted(EPS) - shifted(-EPS)) / (2.0 * EPS);
            m.parameters_mut()[pi].assign(original).unwrap();
            let diff = (grads[pi][i] - numeric).abs();
            worst = worst.max(if diff <= noise { 0.0 } else { rel(grads[pi][i], numeric) });
        }
    }
    worst
}

type Case = (&'static str, bool, fn(&mut ChaCha8Rng) -> f64);

pub fn gradient_cases() -> Vec<Case> {
    vec![
        ("add (broadcast)", false, |r| check(|x| add(&x[0], &x[1]), &[leaf(&[2, 3, 4], r), leaf(&[4], r)])),
        ("sub", false, |r| check(|x| sub(&x[0], &x[1]), &[leaf(&[3, 5], r), leaf(&[3, 5], r)])),
        ("mul (broadcast)", false, |r| check(|x| mul(&x[0], &x[1]), &[leaf(&[2, 3, 2, 2], r), leaf(&[2, 2], r)])),
        ("scale", false, |r| check(|x| Ok(scale(&x[0], -1.7)), &[leaf(&[4, 4], r)])),
        ("relu", false, |r| check(|x| Ok(relu(&x[0])), &[leaf(&[2, 3, 5], r)])),
        ("sigmoid", false, |r| check(|x| Ok(sigmoid(&x[0])), &[leaf(&[2, 3, 5], r)])),
        ("sum", false, |r| check(|x| Ok(sum(&x[0])), &[leaf(&[3, 4], r)])),
        ("mean", false, |r| check(|x| Ok(mean(&x[0])), &[leaf(&[3, 4], r)])),
        ("reshape", false, |r| {
            check(|x| mul(&reshape(&x[0], &[6, 2])?, &reshape(&x[1], &[6, 2])?), &[leaf(&[3, 4], r), leaf(&[2, 6], r)])
        }),
        ("concat", false, |r| {
            check(|x| concat(&[x[0].clone(), x[1].clone()], 1), &[leaf(&[2, 3, 2, 2], r), leaf(&[2, 1, 2, 2], r)])
        }),
        ("matmul", false, |r| check(|x| matmul(&x[0], &x[1]), &[leaf(&[3, 5], r), leaf(&[5, 4], r)])),
        ("conv2d 3x3 stride 1 pad 1", false, |r| {
            check(
                |x| conv2d(&x[0], &x[1], Some(&x[2]), 1, 1),
                &[leaf(&[2, 3, 5, 5], r), leaf(&[4, 3, 3, 3], r), leaf(&[4], r)],
            )
        }),
        ("conv2d 3x3 stride 2 pad 1", false, |r| {
            check(
                |x| conv2d(&x[0], &x[1], Some(&x[2]), 2, 1),
                &[leaf(&[2, 2, 7, 6], r), leaf(&[3, 2, 3, 3], r), leaf(&[3], r)],
            )
        }),
        ("conv2d 1x1 no bias", false, |r| {
            check(|x| conv2d(&x[0], &x[1], None, 1, 0), &[leaf(&[2, 4, 3, 3], r), leaf(&[2, 4, 1, 1], r)])
        }),
        ("maxpool2d", false, |r| check(|x| maxpool2d(&x[0], 2, 2), &[leaf(&[2, 3, 6, 6], r)])),
        ("batch_norm2d train", false, |r| {
            let stats = RunningStats::new("bn", 3);
            let inputs = [leaf(&[2, 3, 3, 4], r), positive(&[3], 0.5, 1.5, r), leaf(&[3], r)];
            check(
                move |x| batch_norm2d(&x[0], &x[1], &x[2], &stats, Mode::Train, BatchNormOptions::default()),
                &inputs,
            )
        }),
        ("batch_norm2d eval", false, |r| {
            let stats = RunningStats::new("bn", 3);
            stats.mean.set(vec![0.1, -0.2, 0.3]).unwrap();
            stats.var.set(vec![0.5, 1.5, 2.0]).unwrap();
            let inputs = [leaf(&[2, 3, 3, 4], r), positive(&[3], 0.5, 1.5, r), leaf(&[3], r)];
            check(
                move |x| batch_norm2d(&x[0], &x[1], &x[2], &stats, Mode::Eval, BatchNormOptions::default()),
                &inputs,
            )
        }),
        ("global_avgpool", false, |r| check(|x| global_avgpool(&x[0]), &[leaf(&[2, 3, 4, 5], r)])),
        ("adaptive_avgpool 7->3", false, |r| check(|x| adaptive_avgpool(&x[0], 3, 2), &[leaf(&[2, 2, 7, 5], r)])),
        ("bilinear_upsample 3->8", false, |r| check(|x| bilinear_upsample(&x[0], 8, 7), &[leaf(&[1, 2, 3, 4], r)])),
        ("bilinear resize 8->3", false, |r| check(|x| bilinear_upsample(&x[0], 3, 5), &[leaf(&[1, 2, 8, 7], r)])),
        ("class_balanced_bce", false, |r| {
            let target: Vec<f64> = (0..24).map(|i| (i % 3 == 0) as u8 as f64).collect();
            let t = Tensor::new(target, &[2, 1, 3, 4]).unwrap();
            check(
                move |x| Ok(class_balanced_bce(&x[0], &t, &LossConfig::default())?.loss),
                &[positive(&[2, 1, 3, 4], 0.05, 0.95, r)],
            )
        }),
        ("linear", true, |r| {
            let mut m = Linear::<f64>::new("fc", 5, 3, r);
            randomize(&mut m, r);
            module_check(&mut m, leaf(&[4, 5], r), |m, x| m.forward(x), r)
        }),
        ("batch norm layer", true, |r| {
            let mut m = BatchNorm2d::<f64>::new("bn", 3);
            randomize(&mut m, r);
            module_check(&mut m, leaf(&[2, 3, 2, 3], r), |m, x| m.forward(x, Mode::Train), r)
        }),
        ("init block", true, |r| {
            let mut m = InitBlock::<f64>::new("init", 4, 6, r);
            randomize(&mut m, r);
            module_check(&mut m, leaf(&[2, 4, 8, 8], r), |m, x| m.forward(x, Mode::Train), r)
        }),
        ("residual block (identity)", true, |r| {
            let mut m = ResidualBlock::<f64>::new("res", 4, 4, 1, r);
            randomize(&mut m, r);
            module_check(&mut m, leaf(&[2, 4, 5, 5], r), |m, x| m.forward(x, Mode::Train), r)
        }),
        ("residual block (projection, stride 2)", true, |r| {
            let mut m = ResidualBlock::<f64>::new("res", 3, 5, 2, r);
            randomize(&mut m, r);
            module_check(&mut m, leaf(&[2, 3, 6, 6], r), |m, x| m.forward(x, Mode::Train), r)
        }),
        ("bottleneck block", true, |r| {
            let mut m = BottleneckBlock::<f64>::new("bneck", 4, 8, 2, r);
            randomize(&mut m, r);
            module_check(&mut m, leaf(&[2, 4, 6, 6], r), |m, x| m.forward(x, Mode::Train), r)
        }),
        ("SE-ResNet block", true, |r| {
            let mut m = SeResNetBlock::<f64>::new("se", &SeResNetConfig::new(8, 4, false), r).unwrap();
            randomize(&mut m, r);
            module_check(&mut m, leaf(&[2, 8, 4, 4], r), |m, x| m.forward(x, Mode::Train), r)
        }),
        ("SE-ResNet block (downsample)", true, |r| {
            let mut m = SeResNetBlock::<f64>::new("se", &SeResNetConfig::new(8, 2, true), r).unwrap();
            randomize(&mut m, r);
            module_check(&mut m, leaf(&[2, 8, 5, 5], r), |m, x| m.forward(x, Mode::Train), r)
        }),
        ("PSP head", true, |r| {
            let cfg = PspConfig { grid_scales: vec![1, 2, 3, 6], in_channels: 8, out_channels: 4 };
            let mut m = PspHead::<f64>::new("psp", &cfg, r).unwrap();
            randomize(&mut m, r);
            module_check(&mut m, leaf(&[2, 8, 6, 7], r), |m, x| m.forward(x, Mode::Train), r)
        }),
        ("PSP head (eval)", true, |r| {
            let cfg = PspConfig { grid_scales: vec![1, 2], in_channels: 4, out_channels: 3 };
            let mut m = PspHead::<f64>::new("psp", &cfg, r).unwrap();
            randomize(&mut m, r);
            module_check(&mut m, leaf(&[1, 4, 4, 4], r), |m, x| m.forward(x, Mode::Eval), r)
        }),
        ("classifier head", true, |r| {
            let mut m = ClassifierHead::<f64>::new("cls", 5);
            randomize(&mut m, r);
            module_check(&mut m, leaf(&[2, 5, 3, 3], r), |m, x| m.forward(x, 8, 8), r)
        }),
    ]
}

pub fn run_gradient_suite(seed: u64) -> Vec<GradOutcome> {
    gradient_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, composite, f))| GradOutcome {
            name,
            composite,
            max_rel_error: f(&mut rng(seed + i as u64)),
        })
        .collect()
}

// ----------------------------------------------------------------- guidance

pub struct GuidanceCase {
    pub height: usize,
    pub width: usize,
    pub clicks: Vec<Click>,
    pub config: GuidanceConfig,
}

pub fn random_guidance_case(r: &mut ChaCha8Rng) -> GuidanceCase {
    let height = r.gen_range(1..=64);
    let width = r.gen_range(1..=64);
    let n = r.gen_range(1..=5);
    let clicks = (0..n).map(|_| Click::new(r.gen_range(0..width), r.gen_range(0..height))).collect();
    let config = GuidanceConfig {
        kind: GuidanceKind::Gaussian,
        sigma: r.gen_range(1.0..20.0),
        radius: r.gen_range(0.5..12.0),
        clamp: r.gen_range(10.0..300.0),
    };
    GuidanceCase { height, width, clicks, config }
}

/// Per-pixel loop over clicks.
pub fn brute_force_guidance(case: &GuidanceCase, kind: GuidanceKind) -> Vec<f64> {
    let mut out = Vec::with_capacity(case.height * case.width);
    for y in 0..case.height {
        for x in 0..case.width {
            let d2 = case
                .clicks
                .iter()
                .map(|c| {
                    let (dx, dy) = (x as f64 - c.x as f64, y as f64 - c.y as f64);
                    dx * dx + dy * dy
                })
                .fold(f64::INFINITY, f64::min);
            let cfg = &case.config;
            out.push(match kind {
                GuidanceKind::Euclidean => d2.sqrt().min(cfg.clamp) / cfg.clamp,
                GuidanceKind::Gaussian => case
                    .clicks
                    .iter()
                    .map(|c| {
                        let (dx, dy) = (x as f64 - c.x as f64, y as f64 - c.y as f64);
                        (-(dx * dx + dy * dy) / (2.0 * cfg.sigma * cfg.sigma)).exp()
                    })
                    .fold(0.0, f64::max),
                GuidanceKind::Disk => {
                    let hit = case.clicks.iter().any(|c| {
                        let (dx, dy) = (x as f64 - c.x as f64, y as f64 - c.y as f64);
                        (dx * dx + dy * dy).sqrt() <= cfg.radius
                    });
                    hit as u8 as f64
                }
            });
        }
    }
    out
}

/// Largest deviation between encoder and oracle over `cases` random cases,
/// per kind `(euclidean, gaussian, disk mismatches)`.
pub fn guidance_oracle(cases: usize, seed: u64) -> (f64, f64, usize) {
    let mut r = rng(seed);
    let (mut e, mut g, mut d) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..cases {
        let case = random_guidance_case(&mut r);
        for kind in GuidanceKind::ALL {
            let cfg = GuidanceConfig { kind, ..case.config };
            let map = cfg.encode(&case.clicks, case.height, case.width).unwrap();
            let want = brute_force_guidance(&case, kind);
            assert_eq!(map.values.len(), want.len());
            for (a, b) in map.values.iter().zip(&want) {
                let diff = (*a as f64 - b).abs();
                match kind {
                    GuidanceKind::Euclidean => e = e.max(diff),
                    GuidanceKind::Gaussian => g = g.max(diff),
                    GuidanceKind::Disk => d += (diff != 0.0) as usize,
                }
            }
        }
    }
    (e, g, d)
}

// --------------------------------------------------------------------- loss

/// Hand loop over pixels in f64.
pub fn loss_oracle_value(pred: &[f64], target: &[f64], scheme: WeightScheme, clamp: f64) -> (f64, f64, f64) {
    let m = pred.len() as f64;
    let fg = target.iter().filter(|&&t| t == 1.0).count() as f64;
    let bg = m - fg;
    let weight = |count: f64| match scheme {
        _ if count == 0.0 => 0.0,
        WeightScheme::InverseFrequency => m / (2.0 * count),
        WeightScheme::Complement => 1.0 - count / m,
    };
    let (w0, w1) = (weight(bg), weight(fg));
    let mut total = 0.0;
    for (&p, &y) in pred.iter().zip(target) {
        let term = if y == 1.0 { -w1 * p.max(clamp).ln() } else { -w0 * (1.0 - p).max(clamp).ln() };
        total += term;
    }
    (total / m, w0, w1)
}

/// Worst absolute loss deviation over `batches` random batches of at most
/// 2×1×4×4, every 10th batch all-foreground and every 10th (offset 5)
/// all-background.
pub fn loss_oracle(batches: usize, seed: u64) -> (f64, usize) {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut degenerate = 0;
    for b in 0..batches {
        let shape = [r.gen_range(1..=2), 1, r.gen_range(1..=4), r.gen_range(1..=4)];
        let n: usize = shape.iter().product();
        let pred: Vec<f64> = (0..n)
            .map(|_| if r.gen_bool(0.1) { [0.0, 1.0][r.gen_range(0..2)] } else { r.gen_range(0.0..1.0) })
            .collect();
        let target: Vec<f64> = match b % 10 {
            0 => vec![1.0; n],
            5 => vec![0.0; n],
            _ => (0..n).map(|_| r.gen_bool(0.3) as u8 as f64).collect(),
        };
        if b % 5 == 0 {
            degenerate += 1;
        }
        let scheme = if b % 2 == 0 { WeightScheme::InverseFrequency } else { WeightScheme::Complement };
        let (want, w0, w1) = loss_oracle_value(&pred, &target, scheme, 1e-7);
        let p = Tensor::new(pred, &shape).unwrap();
        let t = Tensor::new(target, &shape).unwrap();
        let got = class_balanced_bce(&p, &t, &LossConfig { scheme, clamp: Some(1e-7) }).unwrap();
        worst = worst.max((got.total() - want).abs()).max((got.weights.0 - w0).abs()).max((got.weights.1 - w1).abs());
    }
    (worst, degenerate)
}

// ------------------------------------------------------------------- clicks

pub struct ClickStats {
    pub inside: usize,
    pub samples: usize,
    pub max_abs_offset: i64,
    pub mean_abs_offset: f64,
    pub clicks: Vec<Click>,
}

/// Training clicks on a 200×200 square placed inside a larger canvas.
pub fn click_statistics(samples: usize, seed: u64) -> ClickStats {
    let mask = Mask::from_fn(320, 320, |x, y| (60..260).contains(&x) && (60..260).contains(&y));
    let com = center_of_mass(&mask).unwrap();
    let sampler = ClickSampler::default();
    let mut r = rng(seed);
    let mut clicks = Vec::with_capacity(samples);
    let (mut inside, mut max_abs, mut total) = (0, 0i64, 0i64);
    for _ in 0..samples {
        let c = sampler.sample(&mask, &mut r).unwrap();
        inside += mask.get(c.x, c.y) as usize;
        let (dx, dy) = (c.x as i64 - com.x as i64, c.y as i64 - com.y as i64);
        max_abs = max_abs.max(dx.abs()).max(dy.abs());
        total += dx.abs() + dy.abs();
        clicks.push(c);
    }
    ClickStats { inside, samples, max_abs_offset: max_abs, mean_abs_offset: total as f64 / (2 * samples) as f64, clicks }
}

// --------------------------------------------------------- parameter counts

pub fn conv(cin: usize, cout: usize, k: usize) -> usize {
    k * k * cin * cout + cout
}

pub fn bn(c: usize) -> usize {
    2 * c
}

pub fn residual_count(cin: usize, cout: usize, stride: usize) -> usize {
    let proj = if stride != 1 || cin != cout { conv(cin, cout, 1) + bn(cout) } else { 0 };
    conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout) + proj
}

pub fn bottleneck_count(cin: usize, cout: usize, stride: usize) -> usize {
    let mid = cout / 4;
    let proj = if stride != 1 || cin != cout { conv(cin, cout, 1) + bn(cout) } else { 0 };
    conv(cin, mid, 1) + bn(mid) + conv(mid, mid, 3) + bn(mid) + conv(mid, cout, 1) + bn(cout) + proj
}

pub fn se_count(c: usize, r: usize, downsample: bool) -> usize {
    let h = c / r;
    residual_count(c, c, if downsample { 2 } else { 1 }) + (c * h + h) + (h * c + c)
}

pub fn psp_count(cin: usize, scales: usize, out: usize) -> usize {
    let b = cin / scales;
    scales * (conv(cin, b, 1) + bn(b)) + conv(cin + scales * b, out, 3) + bn(out)
}

/// `(block name, actual, closed form)` for every block of `model`.
pub fn block_counts(model: &SegModel<f32>) -> Vec<(String, usize, usize)> {
    let cfg = &model.config;
    let mut rows = Vec::new();
    let bb = &model.backbone;
    let stem = &cfg.backbone.stem;
    rows.push((
        "backbone.stem".to_string(),
        bb.stem_conv.parameter_count() + bb.stem_bn.parameter_count(),
        conv(cfg.input_channels(), stem.channels, stem.kernel) + bn(stem.channels),
    ));
    let mut cin = stem.channels;
    let mut i = 0;
    for (si, s) in cfg.backbone.stages.iter().enumerate() {
        for b in 0..s.blocks {
            let stride = if b == 0 { s.stride } else { 1 };
            let (actual, want) = match &bb.blocks[i] {
                BackboneBlock::Basic(blk) => (blk.parameter_count(), residual_count(cin, s.channels, stride)),
                BackboneBlock::Bottleneck(blk) => (blk.parameter_count(), bottleneck_count(cin, s.channels, stride)),
            };
            rows.push((format!("backbone.layer{}.{b}", si + 1), actual, want));
            cin = s.channels;
            i += 1;
        }
    }
    if let Some(f) = &model.fusion {
        let c = cfg.fusion[0].channels;
        rows.push(("fusion.init".into(), f.init.parameter_count(), conv(cfg.input_channels(), c, 7) + bn(c)));
        for (k, (blk, fc)) in f.blocks.iter().zip(&cfg.fusion).enumerate() {
            rows.push((format!("fusion.se{}", k + 1), blk.parameter_count(), se_count(fc.channels, fc.reduction, fc.downsample)));
        }
    }
    let psp_in = cin + cfg.fusion_channels();
    rows.push(("psp".into(), model.psp.parameter_count(), psp_count(psp_in, cfg.psp_scales.len(), cfg.psp_out_channels)));
    rows.push(("classifier".into(), model.classifier.parameter_count(), conv(cfg.psp_out_channels, 1, 1)));
    rows
}

/// Checks block rows, the partition split and the library's own closed form.
pub fn param_accounting(model: &SegModel<f32>) -> std::result::Result<(usize, usize), String> {
    let rows = block_counts(model);
    for (name, actual, want) in &rows {
        if actual != want {
            return Err(format!("{name}: counted {actual}, closed form {want}"));
        }
    }
    let total: usize = rows.iter().map(|r| r.2).sum();
    let fusion: usize = rows.iter().filter(|r| r.0.starts_with("fusion.")).map(|r| r.2).sum();
    let cfg = &model.config;
    let checks = [
        ("total", model.param_count(None), total),
        ("early", model.param_count(Some(Partition::Early)), total - fusion),
        ("fusion", model.param_count(Some(Partition::Fusion)), fusion),
        ("analytic total", cfg.analytic_param_count(None), total),
        ("analytic fusion", cfg.analytic_param_count(Some(Partition::Fusion)), fusion),
        ("module trait", model.parameter_count(), total),
    ];
    for (what, got, want) in checks {
        if got != want {
            return Err(format!("{what}: {got} vs closed form {want}"));
        }
    }
    Ok((total, fusion))
}

pub fn accounting_configs() -> Vec<ModelConfig> {
    vec![ModelConfig::tiny(Variant::Multi), ModelConfig::tiny(Variant::Baseline), ModelConfig::full(Variant::Multi)]
}

pub fn bitwise_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
