//! Mini-batch SGD with Nesterov momentum and L2 weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Parameter};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 1e-2, momentum: 0.9, weight_decay: 5e-4 }
    }
}

/// Per-parameter velocity, keyed by parameter name and zero-initialized.
#[derive(Debug)]
pub struct Sgd<T: Float = f32> {
    pub config: SgdConfig,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd { config, velocity: HashMap::new() }
    }

    pub fn velocity(&self, name: &str) -> Option<&[T]> {
        self.velocity.get(name).map(|v| v.as_slice())
    }

    /// One update of every non-frozen parameter that holds a gradient:
    ///
    /// ```text
    /// g' = g + wd·θ
    /// v  = μ·v − lr·g'
    /// θ  = θ + μ·v − lr·g'
    /// ```
    ///
    /// Gradients are validated first, so a non-finite value aborts the step
    /// before anything is modified. Gradients are cleared afterwards.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter<T>>) -> Result<()>
    where
        T: 'a,
    {
        let mut work = Vec::new();
        for p in params {
            if p.frozen() {
                continue;
            }
            if let Some(g) = p.grad() {
                if let Some(i) = g.iter().position(|v| !v.as_f64().is_finite()) {
                    return Err(Error::NonFiniteGradient(format!(
                        "{} (element {i} is {})",
                        p.name(),
                        g[i].as_f64()
                    )));
                }
                work.push((p, g));
            }
        }
        let SgdConfig { lr, momentum: mu, weight_decay: wd } = self.config;
        for (p, g) in work {
            let v = self
                .velocity
                .entry(p.name().to_string())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            let theta: Vec<T> = p
                .tensor()
                .data()
                .iter()
                .zip(&g)
                .zip(v.iter_mut())
                .map(|((&th, &gi), vi)| {
                    let (th64, g64) = (th.as_f64(), gi.as_f64() + wd * th.as_f64());
                    let nv = mu * vi.as_f64() - lr * g64;
                    *vi = T::lit(nv);
                    T::lit(th64 + mu * nv - lr * g64)
                })
                .collect();
            p.assign(theta)?;
        }
        Ok(())
    }
}
