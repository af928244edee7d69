//! Class-balanced binary cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// `w_c = M / (2 M_c)`: both weights are 1 on a balanced batch.
    #[default]
    InverseFrequency,
    /// `w_c = 1 - M_c / M`.
    Complement,
}

impl WeightScheme {
    /// Per-class weights `(w0, w1)` for `fg` foreground pixels out of `total`.
    /// A class that does not occur gets weight 0.
    pub fn weights(&self, fg: usize, total: usize) -> (f64, f64) {
        let m = total as f64;
        let w = |count: usize| {
            if count == 0 {
                0.0
            } else {
                match self {
                    WeightScheme::InverseFrequency => m / (2.0 * count as f64),
                    WeightScheme::Complement => 1.0 - count as f64 / m,
                }
            }
        };
        (w(total - fg), w(fg))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub scheme: WeightScheme,
    /// Lower bound on the arguments of both logarithms; `None` disables
    /// clamping, in which case predictions of exactly 0 or 1 are rejected.
    pub clamp: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { scheme: WeightScheme::InverseFrequency, clamp: Some(1e-7) }
    }
}

#[derive(Clone, Debug)]
pub struct LossReport<T: Float = f32> {
    /// Scalar loss, differentiable w.r.t. the prediction.
    pub loss: Tensor<T>,
    /// `(background, foreground)` weights.
    pub weights: (f64, f64),
    pub fg_fraction: f64,
}

impl<T: Float> LossReport<T> {
    pub fn total(&self) -> f64 {
        self.loss.item().as_f64()
    }
}

/// Mean over pixels of `w_y · BCE(y, ŷ)`, with class weights computed from
/// the whole batch. `pred` holds probabilities and `target` values in {0, 1}.
pub fn class_balanced_bce<T: Float>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossReport<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "class_balanced_bce",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let m = pred.numel();
    if m == 0 {
        return Err(Error::shape("class_balanced_bce", "empty batch"));
    }
    let mut labels = Vec::with_capacity(m);
    for &t in target.data() {
        let t = t.as_f64();
        if t != 0.0 && t != 1.0 {
            return Err(Error::InvalidArgument(format!("target value {t} is not binary")));
        }
        labels.push(t == 1.0);
    }
    for &p in pred.data() {
        let p = p.as_f64();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("prediction {p} is not a probability")));
        }
        if cfg.clamp.is_none() && (p == 0.0 || p == 1.0) {
            return Err(Error::InvalidArgument(
                "prediction of exactly 0 or 1 with log clamping disabled".into(),
            ));
        }
    }
    let fg = labels.iter().filter(|&&y| y).count();
    let (w0, w1) = cfg.scheme.weights(fg, m);
    let eps = cfg.clamp.unwrap_or(0.0);
    let inv_m = 1.0 / m as f64;

    let mut total = 0.0f64;
    for (&p, &y) in pred.data().iter().zip(&labels) {
        let p = p.as_f64();
        total += if y { -w1 * p.max(eps).ln() } else { -w0 * (1.0 - p).max(eps).ln() };
    }
    let value = total * inv_m;

    let loss = Tensor::from_op(
        "class_balanced_bce",
        vec![],
        vec![T::lit(value)],
        vec![pred.clone()],
        Box::new(move |inputs, g| {
            let g = g[0].as_f64() * inv_m;
            let grad = inputs[0]
                .data()
                .iter()
                .zip(&labels)
                .map(|(&p, &y)| {
                    let p = p.as_f64();
                    let d = if y {
                        if p > eps { -w1 / p } else { 0.0 }
                    } else if 1.0 - p > eps {
                        w0 / (1.0 - p)
                    } else {
                        0.0
                    };
                    T::lit(g * d)
                })
                .collect();
            vec![Some(grad)]
        }),
    );
    Ok(LossReport { loss, weights: (w0, w1), fg_fraction: fg as f64 / m as f64 })
}
