//! Click encoders: turn positive clicks into an image-sized guidance channel.
//!
//! All three encoders are functions of the distance from each pixel to its
//! nearest click, so they share one exact squared Euclidean distance
//! transform (lower envelope of parabolas, separable over rows and columns).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    #[default]
    Positive,
    /// Reserved. Encoders ignore negative clicks.
    Negative,
}

/// A pixel position: `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub x: usize,
    pub y: usize,
    #[serde(default)]
    pub polarity: Polarity,
}

impl Click {
    pub fn new(x: usize, y: usize) -> Self {
        Click { x, y, polarity: Polarity::Positive }
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.x < width && self.y < height {
            Ok(())
        } else {
            Err(Error::ClickOutOfBounds {
                x: self.x as i64,
                y: self.y as i64,
                width,
                height,
            })
        }
    }
}

impl fmt::Display for Click {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.x, self.y)
    }
}

/// Parses the `x,y` command-line form.
impl FromStr for Click {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (x, y) = s
            .split_once(',')
            .ok_or_else(|| Error::InvalidArgument(format!("click `{s}` is not of the form x,y")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("click coordinate `{v}` is not a pixel index")))
        };
        Ok(Click::new(parse(x)?, parse(y)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceKind {
    Euclidean,
    Gaussian,
    Disk,
}

impl GuidanceKind {
    pub const ALL: [GuidanceKind; 3] = [GuidanceKind::Euclidean, GuidanceKind::Disk, GuidanceKind::Gaussian];

    pub fn as_str(&self) -> &'static str {
        match self {
            GuidanceKind::Euclidean => "euclidean",
            GuidanceKind::Gaussian => "gaussian",
            GuidanceKind::Disk => "disk",
        }
    }
}

impl fmt::Display for GuidanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuidanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(GuidanceKind::Euclidean),
            "gaussian" => Ok(GuidanceKind::Gaussian),
            "disk" => Ok(GuidanceKind::Disk),
            other => Err(Error::InvalidArgument(format!(
                "unknown guidance kind `{other}` (expected euclidean, gaussian or disk)"
            ))),
        }
    }
}

/// Encoder settings. Defaults: σ = 10 px, disk radius 5 px, Euclidean
/// distances clamped at 255 before scaling to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub kind: GuidanceKind,
    pub sigma: f64,
    pub radius: f64,
    pub clamp: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { kind: GuidanceKind::Gaussian, sigma: 10.0, radius: 5.0, clamp: 255.0 }
    }
}

impl GuidanceConfig {
    pub fn with_kind(kind: GuidanceKind) -> Self {
        GuidanceConfig { kind, ..Self::default() }
    }

    pub fn encode(&self, clicks: &[Click], height: usize, width: usize) -> Result<GuidanceMap> {
        match self.kind {
            GuidanceKind::Euclidean => euclidean_map_clamped(clicks, height, width, self.clamp),
            GuidanceKind::Gaussian => gaussian_map(clicks, height, width, self.sigma),
            GuidanceKind::Disk => disk_map(clicks, height, width, self.radius),
        }
    }
}

/// Row-major `height × width` scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub kind: GuidanceKind,
    /// Clamp value, σ or radius depending on `kind`.
    pub param: f64,
}

impl GuidanceMap {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// 8-bit grayscale rendering (`value · 255`, rounded).
    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(x as usize, y as usize).clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray_image().save(path.as_ref())?;
        Ok(())
    }

    /// Resamples to a new grid: nearest neighbour for disks, bilinear otherwise.
    pub fn resized(&self, height: usize, width: usize) -> GuidanceMap {
        let values = match self.kind {
            GuidanceKind::Disk => {
                let mut out = Vec::with_capacity(height * width);
                for i in 0..height {
                    let sy = ((i as f64 + 0.5) * self.height as f64 / height as f64) as usize;
                    for j in 0..width {
                        let sx = ((j as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                        out.push(self.get(sx.min(self.width - 1), sy.min(self.height - 1)));
                    }
                }
                out
            }
            _ => crate::tensor::resize_bilinear(&self.values, 1, self.height, self.width, height, width),
        };
        GuidanceMap { height, width, values, ..self.clone() }
    }
}

fn positive_clicks(clicks: &[Click], height: usize, width: usize) -> Result<Vec<Click>> {
    let positive: Vec<Click> =
        clicks.iter().copied().filter(|c| c.polarity == Polarity::Positive).collect();
    if positive.is_empty() {
        return Err(Error::NoClicks);
    }
    for c in &positive {
        c.check_bounds(height, width)?;
    }
    Ok(positive)
}

/// Squared distance transform of a 1-D sampled function, considering only
/// finite samples as parabola sites. At least one sample must be finite.
fn lower_envelope(f: &[f64], out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let Some(&v) = sites.last() else { break };
            let vf = v as f64;
            let s = ((f[q] + qf * qf) - (f[v] + vf * vf)) / (2.0 * (qf - vf));
            if s <= *bounds.last().expect("bounds track sites") {
                sites.pop();
                bounds.pop();
            } else {
                sites.push(q);
                bounds.push(s);
                break;
            }
        }
        if sites.is_empty() {
            sites.push(q);
            bounds.push(f64::NEG_INFINITY);
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < sites.len() && bounds[k + 1] < qf {
            k += 1;
        }
        let d = qf - sites[k] as f64;
        *o = d * d + f[sites[k]];
    }
}

/// Exact squared Euclidean distance from every pixel center to the nearest
/// positive click.
pub fn squared_distance_field(clicks: &[Click], height: usize, width: usize) -> Result<Vec<f64>> {
    let clicks = positive_clicks(clicks, height, width)?;
    let mut grid = vec![f64::INFINITY; height * width];
    for c in &clicks {
        grid[c.y * width + c.x] = 0.0;
    }
    let (mut sites, mut bounds) = (Vec::new(), Vec::new());

    let mut column = vec![0.0; height];
    let mut column_out = vec![0.0; height];
    for x in 0..width {
        if !clicks.iter().any(|c| c.x == x) {
            continue;
        }
        for y in 0..height {
            column[y] = grid[y * width + x];
        }
        lower_envelope(&column, &mut column_out, &mut sites, &mut bounds);
        for y in 0..height {
            grid[y * width + x] = column_out[y];
        }
    }

    let mut row_out = vec![0.0; width];
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        lower_envelope(row, &mut row_out, &mut sites, &mut bounds);
        row.copy_from_slice(&row_out);
    }
    Ok(grid)
}

/// Distance to the nearest click, clamped at 255 and divided by 255.
pub fn euclidean_map(clicks: &[Click], height: usize, width: usize) -> Result<GuidanceMap> {
    euclidean_map_clamped(clicks, height, width, 255.0)
}

pub fn euclidean_map_clamped(
    clicks: &[Click],
    height: usize,
    width: usize,
    clamp: f64,
) -> Result<GuidanceMap> {
    if !(clamp > 0.0) {
        return Err(Error::InvalidArgument(format!("clamp must be positive, got {clamp}")));
    }
    let d2 = squared_distance_field(clicks, height, width)?;
    Ok(GuidanceMap {
        height,
        width,
        values: d2.iter().map(|&d| (d.sqrt().min(clamp) / clamp) as f32).collect(),
        kind: GuidanceKind::Euclidean,
        param: clamp,
    })
}

/// Max over clicks of `exp(−‖p − c‖² / 2σ²)`.
pub fn gaussian_map(clicks: &[Click], height: usize, width: usize, sigma: f64) -> Result<GuidanceMap> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let d2 = squared_distance_field(clicks, height, width)?;
    let denom = 2.0 * sigma * sigma;
    Ok(GuidanceMap {
        height,
        width,
        values: d2.iter().map(|&d| (-d / denom).exp() as f32).collect(),
        kind: GuidanceKind::Gaussian,
        param: sigma,
    })
}

/// 1 within `radius` of some click, else 0.
pub fn disk_map(clicks: &[Click], height: usize, width: usize, radius: f64) -> Result<GuidanceMap> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    let d2 = squared_distance_field(clicks, height, width)?;
    let r2 = radius * radius;
    Ok(GuidanceMap {
        height,
        width,
        values: d2.iter().map(|&d| if d <= r2 { 1.0 } else { 0.0 }).collect(),
        kind: GuidanceKind::Disk,
        param: radius,
    })
}
