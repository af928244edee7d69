//! Simulated user clicks: a canonical evaluation click at the mask's center of
//! mass and jittered training clicks constrained to the object.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::Click;
use crate::mask::Mask;

/// Foreground pixel closest to `(x, y)`; ties go to the first pixel in scan order.
pub fn nearest_foreground(mask: &Mask, x: f64, y: f64) -> Result<Click> {
    let mut best: Option<(f64, usize, usize)> = None;
    for (px, py) in mask.foreground() {
        let d = (px as f64 - x).powi(2) + (py as f64 - y).powi(2);
        if best.map_or(true, |(bd, _, _)| d < bd) {
            best = Some((d, px, py));
        }
    }
    best.map(|(_, px, py)| Click::new(px, py)).ok_or(Error::EmptyMask)
}

/// Rounds half-way values down, so a mean of 4.5 maps to pixel 4.
fn round_half_down(v: f64) -> i64 {
    (v - 0.5).ceil() as i64
}

/// Rounded mean foreground coordinate, snapped to the nearest foreground
/// pixel when the mean falls on background (non-convex objects).
pub fn center_of_mass(mask: &Mask) -> Result<Click> {
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    for (x, y) in mask.foreground() {
        sx += x as f64;
        sy += y as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let cx = round_half_down(sx / n as f64) as usize;
    let cy = round_half_down(sy / n as f64) as usize;
    if mask.get(cx, cy) {
        Ok(Click::new(cx, cy))
    } else {
        nearest_foreground(mask, cx as f64, cy as f64)
    }
}

/// Deterministic evaluation click.
pub fn eval_click(mask: &Mask) -> Result<Click> {
    center_of_mass(mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClickSampler {
    /// Offsets are drawn uniformly from `[-jitter, jitter]` per axis.
    pub jitter: i64,
    pub max_attempts: usize,
}

impl Default for ClickSampler {
    fn default() -> Self {
        ClickSampler { jitter: 50, max_attempts: 100 }
    }
}

impl ClickSampler {
    /// Center of mass plus uniform integer jitter, resampled until it lands on
    /// the object; after `max_attempts` misses, the foreground pixel nearest
    /// the last candidate.
    pub fn sample<R: Rng + ?Sized>(&self, mask: &Mask, rng: &mut R) -> Result<Click> {
        let com = center_of_mass(mask)?;
        if self.jitter == 0 {
            return Ok(com);
        }
        let mut last = (com.x as i64, com.y as i64);
        for _ in 0..self.max_attempts.max(1) {
            let x = com.x as i64 + rng.gen_range(-self.jitter..=self.jitter);
            let y = com.y as i64 + rng.gen_range(-self.jitter..=self.jitter);
            last = (x, y);
            let inside = x >= 0 && y >= 0 && (x as usize) < mask.width && (y as usize) < mask.height;
            if inside && mask.get(x as usize, y as usize) {
                return Ok(Click::new(x as usize, y as usize));
            }
        }
        nearest_foreground(mask, last.0 as f64, last.1 as f64)
    }
}

/// Training click with the default ±50 px jitter.
pub fn sample_training_click<R: Rng + ?Sized>(mask: &Mask, rng: &mut R) -> Result<Click> {
    ClickSampler::default().sample(mask, rng)
}
