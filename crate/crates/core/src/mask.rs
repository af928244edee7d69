use image::{GrayImage, Luma};

use crate::error::{Error, Result};

/// Row-major binary mask; `true` is foreground.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{height}x{width} mask given {} values", data.len()),
            ));
        }
        Ok(Mask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i % width, i / width)).collect();
        Mask { height, width, data }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Foreground share of all pixels.
    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    /// Foreground pixel positions `(x, y)` in scan order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i % self.width, i / self.width))
    }

    /// Grayscale image with 255 for foreground, 0 for background.
    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    /// 8-bit single-channel PNG of [`Mask::to_image`].
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.to_image().write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
        Ok(out)
    }

    /// Nearest-neighbour resampling with half-pixel centers.
    pub fn resized(&self, height: usize, width: usize) -> Mask {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        Mask::from_fn(height, width, |x, y| {
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            self.get(sx.min(self.width - 1), sy.min(self.height - 1))
        })
    }

    /// Horizontal mirror image.
    pub fn flipped(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |x, y| self.get(self.width - 1 - x, y))
    }

    /// Any nonzero pixel is foreground.
    pub fn from_image(img: &GrayImage) -> Self {
        Mask {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.pixels().map(|p| p.0[0] != 0).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_thresholds_nonzero() {
        let img = GrayImage::from_fn(3, 2, |x, _| Luma([[0, 255, 7][x as usize]]));
        let m = Mask::from_image(&img);
        assert_eq!(m.data, vec![false, true, true, false, true, true]);
        assert_eq!(Mask::from_image(&m.to_image()), m);
    }
}
