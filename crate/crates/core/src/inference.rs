//! Running a model on images of arbitrary size with clicks given in image
//! coordinates.

use crate::data::ColorImage;
use crate::error::{Error, Result};
use crate::guidance::{Click, GuidanceConfig};
use crate::model::{ForwardOptions, SegModel, Variant};
use crate::tensor::{no_grad, resize_bilinear, Tensor};

/// Probability field at the resolution of the image it was computed for.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl ProbabilityMap {
    pub fn stats(&self) -> (f32, f32, f32) {
        let min = self.values.iter().copied().fold(f32::INFINITY, f32::min);
        let max = self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mean = (self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len().max(1) as f64) as f32;
        (min, max, mean)
    }
}

/// Maps a click from an `h × w` grid onto an `out_h × out_w` grid
/// (pixel centers are preserved).
pub fn rescale_click(c: Click, h: usize, w: usize, out_h: usize, out_w: usize) -> Click {
    let map = |v: usize, from: usize, to: usize| {
        (((v as f64 + 0.5) * to as f64 / from as f64) as usize).min(to - 1)
    };
    Click { x: map(c.x, w, out_w), y: map(c.y, h, out_h), polarity: c.polarity }
}

/// Anything that turns an image plus clicks into a probability map.
pub trait Predictor: Sync {
    fn variant(&self) -> Variant;

    fn predict(&self, image: &ColorImage, clicks: &[Click], guidance: &GuidanceConfig) -> Result<ProbabilityMap>;

    /// Predictions for several images; the default runs them one at a time.
    fn predict_many(
        &self,
        inputs: &[(&ColorImage, Vec<Click>)],
        guidance: &GuidanceConfig,
    ) -> Result<Vec<ProbabilityMap>> {
        inputs.iter().map(|(img, clicks)| self.predict(img, clicks, guidance)).collect()
    }
}

impl SegModel<f32> {
    /// Network input tensors for a batch; images are resized to the model's
    /// input size and guidance maps are encoded at that size from rescaled
    /// clicks.
    pub fn prepare_inputs(
        &self,
        inputs: &[(&ColorImage, Vec<Click>)],
        guidance: &GuidanceConfig,
    ) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
        let (h, w) = self.config.input_size;
        let mut pixels = Vec::with_capacity(inputs.len() * 3 * h * w);
        let mut maps = Vec::with_capacity(inputs.len() * h * w);
        for (img, clicks) in inputs {
            if clicks.is_empty() {
                return Err(Error::NoClicks);
            }
            for c in clicks {
                c.check_bounds(img.height, img.width)?;
            }
            pixels.extend(img.resized(h, w).data);
            if self.config.variant.uses_guidance() {
                let scaled: Vec<Click> =
                    clicks.iter().map(|&c| rescale_click(c, img.height, img.width, h, w)).collect();
                maps.extend(guidance.encode(&scaled, h, w)?.values);
            }
        }
        let n = inputs.len();
        let image = Tensor::new(pixels, &[n, 3, h, w])?;
        let g = if self.config.variant.uses_guidance() {
            Some(Tensor::new(maps, &[n, 1, h, w])?)
        } else {
            None
        };
        Ok((image, g))
    }
}

impl Predictor for SegModel<f32> {
    fn variant(&self) -> Variant {
        self.config.variant
    }

    fn predict(&self, image: &ColorImage, clicks: &[Click], guidance: &GuidanceConfig) -> Result<ProbabilityMap> {
        let mut out = self.predict_many(&[(image, clicks.to_vec())], guidance)?;
        Ok(out.remove(0))
    }

    fn predict_many(
        &self,
        inputs: &[(&ColorImage, Vec<Click>)],
        guidance: &GuidanceConfig,
    ) -> Result<Vec<ProbabilityMap>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let (image, g) = self.prepare_inputs(inputs, guidance)?;
        let prob = no_grad(|| self.forward(&image, g.as_ref(), ForwardOptions::eval()))?;
        let (h, w) = self.config.input_size;
        Ok(prob
            .data()
            .chunks(h * w)
            .zip(inputs)
            .map(|(plane, (img, _))| ProbabilityMap {
                height: img.height,
                width: img.width,
                values: resize_bilinear(plane, 1, h, w, img.height, img.width),
            })
            .collect())
    }
}
