use serde::{Deserialize, Serialize};

use super::{Buffer, Float, Tensor};
use crate::error::{Error, Result};

/// Whether normalization layers use batch statistics (and update their
/// running estimates) or the stored running estimates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormOptions {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormOptions {
    fn default() -> Self {
        BatchNormOptions { eps: 1e-5, momentum: 0.1 }
    }
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Debug)]
pub struct RunningStats<T: Float = f32> {
    pub mean: Buffer<T>,
    pub var: Buffer<T>,
}

impl<T: Float> RunningStats<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        RunningStats {
            mean: Buffer::new(format!("{prefix}.running_mean"), &[channels], vec![T::zero(); channels]),
            var: Buffer::new(format!("{prefix}.running_var"), &[channels], vec![T::one(); channels]),
        }
    }
}

/// Batch normalization over the N, H and W axes of an NCHW tensor.
pub fn batch_norm2d<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    mode: Mode,
    opts: BatchNormOptions,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("batch_norm2d")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batch_norm2d",
            format!("gamma {:?} / beta {:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    let hw = h * w;
    let m = n * hw;
    let eps = T::lit(opts.eps);
    let xd = x.data();

    let (mean, var) = match mode {
        Mode::Train => {
            if m < 2 {
                return Err(Error::DegenerateVariance(m));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let plane = |ni: usize| &xd[(ni * c + ch) * hw..(ni * c + ch + 1) * hw];
                let s: T = (0..n).map(|ni| plane(ni).iter().copied().sum::<T>()).sum();
                let mu = s / T::lit(m as f64);
                let ss: T = (0..n)
                    .map(|ni| plane(ni).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>())
                    .sum();
                mean[ch] = mu;
                var[ch] = ss / T::lit(m as f64);
            }
            let mom = T::lit(opts.momentum);
            let unbias = T::lit(m as f64 / (m as f64 - 1.0));
            stats.mean.update(|rm| {
                for (r, &b) in rm.iter_mut().zip(&mean) {
                    *r = (T::one() - mom) * *r + mom * b;
                }
            });
            stats.var.update(|rv| {
                for (r, &b) in rv.iter_mut().zip(&var) {
                    *r = (T::one() - mom) * *r + mom * b * unbias;
                }
            });
            (mean, var)
        }
        Mode::Eval => (stats.mean.get(), stats.var.get()),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for ni in 0..n {
        for ch in 0..c {
            let off = (ni * c + ch) * hw;
            for i in off..off + hw {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gd[ch] * xh + bd[ch];
            }
        }
    }

    Ok(Tensor::from_op(
        "batch_norm2d",
        vec![n, c, h, w],
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |inputs, g| {
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for ni in 0..n {
                for ch in 0..c {
                    let off = (ni * c + ch) * hw;
                    for i in off..off + hw {
                        sum_dy[ch] += g[i];
                        sum_dy_xhat[ch] += g[i] * xhat[i];
                    }
                }
            }
            let gamma = inputs[1].data();
            let gx = inputs[0].requires_grad().then(|| {
                let mut gx = vec![T::zero(); g.len()];
                let mf = T::lit(m as f64);
                for ni in 0..n {
                    for ch in 0..c {
                        let off = (ni * c + ch) * hw;
                        let k = gamma[ch] * inv_std[ch];
                        for i in off..off + hw {
                            gx[i] = match mode {
                                Mode::Train => {
                                    k / mf * (mf * g[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch])
                                }
                                Mode::Eval => k * g[i],
                            };
                        }
                    }
                }
                gx
            });
            vec![
                gx,
                inputs[1].requires_grad().then(|| sum_dy_xhat.clone()),
                inputs[2].requires_grad().then(|| sum_dy.clone()),
            ]
        }),
    ))
}
