//! Intersection over union, single-click evaluation and ablation tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::clicks::{center_of_mass, eval_click};
use crate::data::{Dataset, InstanceSample};
use crate::error::{Error, Result};
use crate::guidance::{Click, GuidanceConfig, GuidanceKind};
use crate::inference::{Predictor, ProbabilityMap};
use crate::mask::Mask;
use crate::model::Variant;

/// `|a ∧ b| / |a ∨ b|`; 1 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "iou",
            format!("{}x{} vs {}x{}", pred.width, pred.height, gt.width, gt.height),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground where the probability is at least `threshold`.
pub fn binarize(prob: &ProbabilityMap, threshold: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} is outside [0, 1]")));
    }
    Mask::new(
        prob.height,
        prob.width,
        prob.values.iter().map(|&p| p as f64 >= threshold).collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub variant: Variant,
    /// `None` for models that take no guidance.
    pub guidance: Option<GuidanceKind>,
    pub threshold: f64,
    pub per_instance_iou: Vec<(String, f64)>,
    pub mean_iou: f64,
}

const EVAL_BATCH: usize = 20;

/// Mean IoU over `dataset` with one canonical click per instance.
pub fn evaluate_single_click<P: Predictor + ?Sized>(
    model: &P,
    dataset: &Dataset,
    guidance: &GuidanceConfig,
    threshold: f64,
) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let mut per_instance = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(EVAL_BATCH) {
        let inputs = chunk
            .iter()
            .map(|s| Ok((&s.image, vec![eval_click(&s.mask)?])))
            .collect::<Result<Vec<_>>>()?;
        let probs = model.predict_many(&inputs, guidance)?;
        for (s, p) in chunk.iter().zip(&probs) {
            per_instance.push((s.id.clone(), iou(&binarize(p, threshold)?, &s.mask)?));
        }
    }
    let mean_iou = per_instance.iter().map(|(_, v)| v).sum::<f64>() / per_instance.len() as f64;
    let variant = model.variant();
    Ok(EvalResult {
        variant,
        guidance: variant.uses_guidance().then_some(guidance.kind),
        threshold,
        per_instance_iou: per_instance,
        mean_iou,
    })
}

/// Largest 4-connected component of `mask` (ties: first found in scan order).
fn largest_component(mask: &Mask) -> Option<Mask> {
    let (h, w) = (mask.height, mask.width);
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None;
    let mut next = 0;
    for start in 0..h * w {
        if !mask.data[start] || label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        label[start] = next;
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut push = |j: usize| {
                if mask.data[j] && label[j] == usize::MAX {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        if best.map_or(true, |(_, s)| size > s) {
            best = Some((next, size));
        }
        next += 1;
    }
    best.map(|(l, _)| Mask { height: h, width: w, data: label.iter().map(|&v| v == l).collect() })
}

/// Next positive click: the snapped center of the largest missed region.
pub fn next_click(pred: &Mask, gt: &Mask) -> Option<Click> {
    let missed = Mask {
        height: gt.height,
        width: gt.width,
        data: gt.data.iter().zip(&pred.data).map(|(&g, &p)| g && !p).collect(),
    };
    largest_component(&missed).and_then(|c| center_of_mass(&c).ok())
}

/// Mean IoU after 1..=`max_clicks` positive clicks, each new click placed at
/// the center of the largest false-negative region. Once nothing is missed
/// the last prediction is carried forward.
pub fn evaluate_multi_click<P: Predictor + ?Sized>(
    model: &P,
    dataset: &Dataset,
    guidance: &GuidanceConfig,
    threshold: f64,
    max_clicks: usize,
) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; max_clicks];
    for s in &dataset.samples {
        let curve = click_curve(model, s, guidance, threshold, max_clicks)?;
        for (acc, v) in sums.iter_mut().zip(curve) {
            *acc += v;
        }
    }
    Ok(sums.into_iter().map(|v| v / dataset.len().max(1) as f64).collect())
}

fn click_curve<P: Predictor + ?Sized>(
    model: &P,
    s: &InstanceSample,
    guidance: &GuidanceConfig,
    threshold: f64,
    max_clicks: usize,
) -> Result<Vec<f64>> {
    let mut clicks = vec![eval_click(&s.mask)?];
    let mut curve = Vec::with_capacity(max_clicks);
    while curve.len() < max_clicks {
        let pred = binarize(&model.predict(&s.image, &clicks, guidance)?, threshold)?;
        curve.push(iou(&pred, &s.mask)?);
        match next_click(&pred, &s.mask) {
            Some(c) if model.variant().uses_guidance() => clicks.push(c),
            _ => {
                let last = *curve.last().unwrap();
                curve.resize(max_clicks, last);
            }
        }
    }
    Ok(curve)
}

/// Rows of (variant, guidance, mean IoU) rendered as an aligned table or as
/// tab-separated values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub guidance: Option<GuidanceKind>,
    pub mean_iou: f64,
    pub instances: usize,
}

impl AblationReport {
    pub fn from_results(results: &[EvalResult]) -> Self {
        AblationReport {
            rows: results
                .iter()
                .map(|r| AblationRow {
                    variant: r.variant,
                    guidance: r.guidance,
                    mean_iou: r.mean_iou,
                    instances: r.per_instance_iou.len(),
                })
                .collect(),
        }
    }

    fn cells(row: &AblationRow) -> [String; 5] {
        [
            row.variant.as_str().to_string(),
            if row.guidance.is_some() { "✓" } else { "✗" }.to_string(),
            row.guidance.map_or("-".to_string(), |g| g.to_string()),
            format!("{:.4}", row.mean_iou),
            row.instances.to_string(),
        ]
    }

    const HEADER: [&'static str; 5] = ["variant", "G", "guidance", "mIoU", "n"];

    pub fn to_text(&self) -> String {
        let body: Vec<[String; 5]> = self.rows.iter().map(Self::cells).collect();
        let mut widths = Self::HEADER.map(|h| h.chars().count());
        for r in &body {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                let pad = w - c.chars().count();
                if i >= 3 {
                    s.push_str(&" ".repeat(pad));
                    s.push_str(c);
                } else {
                    s.push_str(c);
                    s.push_str(&" ".repeat(pad));
                }
            }
            s.trim_end().to_string()
        };
        let mut out = String::new();
        let header: Vec<String> = Self::HEADER.iter().map(|s| s.to_string()).collect();
        writeln!(out, "{}", line(&header)).unwrap();
        let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
        writeln!(out, "{}", "-".repeat(total)).unwrap();
        for r in &body {
            writeln!(out, "{}", line(r)).unwrap();
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = Self::HEADER.join("\t");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&Self::cells(r).join("\t"));
            out.push('\n');
        }
        out
    }
}
