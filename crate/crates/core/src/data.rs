//! Synthetic instance-segmentation corpus and the folder format it is stored in:
//! `images/<id>.png`, `masks/<id>.png` and one `<split>.txt` id list per split.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::resize_bilinear;

/// Planar RGB image with values in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ColorImage {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = p.0[c] as f32 / 255.0;
            }
        }
        ColorImage { height: h, width: w, data }
    }

    pub fn to_rgb(&self) -> RgbImage {
        let (h, w) = (self.height, self.width);
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            let q = |c: usize| (self.data[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([q(0), q(1), q(2)])
        })
    }

    /// Decodes any supported image file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_rgb(&image::open(path.as_ref())?.to_rgb8()))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_rgb(&image::load_from_memory(bytes)?.to_rgb8()))
    }

    pub fn resized(&self, height: usize, width: usize) -> ColorImage {
        let data = resize_bilinear(&self.data, 3, self.height, self.width, height, width);
        ColorImage { height, width, data }
    }

    pub fn flipped(&self) -> ColorImage {
        let (h, w) = (self.height, self.width);
        let mut data = self.data.clone();
        for row in data.chunks_mut(w).take(3 * h) {
            row.reverse();
        }
        ColorImage { height: h, width: w, data }
    }
}

/// One image with its single designated target.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSample {
    pub id: String,
    pub image: ColorImage,
    pub mask: Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// `(height, width)`.
    pub size: (usize, usize),
    pub seed: u64,
    /// 0 draws no background distractors, 1 draws the most.
    pub clutter_level: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { n_train: 500, n_val: 100, n_test: 100, size: (64, 64), seed: 0, clutter_level: 0.5 }
    }
}

/// Smallest and largest accepted target area as a share of the image.
pub const MIN_AREA: f64 = 0.02;
pub const MAX_AREA: f64 = 0.60;
const MAX_RETRIES: usize = 200;

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h < 8 || w < 8 {
            return Err(Error::InvalidArgument(format!("image size {h}x{w} is too small")));
        }
        if !(0.0..=1.0).contains(&self.clutter_level) {
            return Err(Error::InvalidArgument("clutter level must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Global sample indices of a split; splits occupy consecutive,
    /// non-overlapping ranges.
    pub fn indices(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.n_train,
            Split::Val => self.n_train..self.n_train + self.n_val,
            Split::Test => self.n_train + self.n_val..self.n_train + self.n_val + self.n_test,
        }
    }

    pub fn sample_id(index: usize) -> String {
        format!("{index:06}")
    }

    /// Renders sample `index`, a pure function of the spec and the index.
    pub fn sample(&self, index: usize) -> Result<InstanceSample> {
        self.validate()?;
        let (img, mask) = render(self, index)?;
        Ok(InstanceSample { id: Self::sample_id(index), image: ColorImage::from_rgb(&img), mask })
    }

    pub fn split(&self, split: Split) -> Result<Dataset> {
        let samples = self.indices(split).map(|i| self.sample(i)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<InstanceSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Writes the corpus described by `spec` under `root`.
pub fn generate(spec: &DatasetSpec, root: impl AsRef<Path>) -> Result<()> {
    spec.validate()?;
    let root = root.as_ref();
    let (images, masks) = (root.join("images"), root.join("masks"));
    for dir in [&images, &masks] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for split in Split::ALL {
        let mut manifest = String::new();
        for i in spec.indices(split) {
            let id = DatasetSpec::sample_id(i);
            let (img, mask) = render(spec, i)?;
            img.save(images.join(format!("{id}.png")))?;
            mask.to_image().save(masks.join(format!("{id}.png")))?;
            manifest.push_str(&id);
            manifest.push('\n');
        }
        let path = root.join(format!("{split}.txt"));
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    }
    let text = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    let path = root.join("spec.toml");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_image, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

fn load_pair(id: &str, image_path: &Path, mask_path: &Path) -> Result<InstanceSample> {
    let image = ColorImage::load(image_path)?;
    let mask: GrayImage = image::open(mask_path)?.to_luma8();
    let mask = Mask::from_image(&mask);
    if (mask.height, mask.width) != (image.height, image.width) {
        return Err(Error::Dataset(format!(
            "`{id}`: image is {}x{} but mask is {}x{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    if mask.is_empty() {
        return Err(Error::Dataset(format!("`{id}`: mask has no foreground")));
    }
    Ok(InstanceSample { id: id.to_string(), image, mask })
}

/// Loads every `images/<stem>.png` with its `masks/<stem>.png`, sorted by stem.
pub fn load_folder(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let images = png_stems(&root.join("images"))?;
    let masks = png_stems(&root.join("masks"))?;
    if let Some(stem) = images.keys().find(|s| !masks.contains_key(*s)) {
        return Err(Error::MissingMask(stem.clone()));
    }
    if let Some(stem) = masks.keys().find(|s| !images.contains_key(*s)) {
        return Err(Error::Dataset(format!("mask `{stem}` has no matching image")));
    }
    let samples = images
        .iter()
        .map(|(stem, path)| load_pair(stem, path, &masks[stem]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

/// Loads the ids listed in `<root>/<split>.txt`.
pub fn load_split(root: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest = root.join(format!("{split}.txt"));
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let samples = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            let image = root.join("images").join(format!("{id}.png"));
            let mask = root.join("masks").join(format!("{id}.png"));
            if !image.exists() {
                return Err(Error::Dataset(format!("image for `{id}` listed in {split}.txt is missing")));
            }
            if !mask.exists() {
                return Err(Error::MissingMask(id.to_string()));
            }
            load_pair(id, &image, &mask)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

// Rendering.

#[derive(Clone, Debug)]
enum Outline {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Polygon { points: Vec<(f64, f64)> },
    /// Radius modulated by a few low-order harmonics.
    Blob { cx: f64, cy: f64, radius: f64, harmonics: Vec<(f64, f64, f64)> },
}

impl Outline {
    fn random<R: Rng>(rng: &mut R, area: f64, h: usize, w: usize) -> Outline {
        let (hf, wf) = (h as f64, w as f64);
        let r = (area / PI).sqrt();
        let margin = 0.5 * r;
        let cx = rng.gen_range(margin.min(wf / 2.0)..=(wf - margin).max(wf / 2.0));
        let cy = rng.gen_range(margin.min(hf / 2.0)..=(hf - margin).max(hf / 2.0));
        match rng.gen_range(0..3) {
            0 => {
                let aspect: f64 = rng.gen_range(0.5..2.0);
                Outline::Ellipse {
                    cx,
                    cy,
                    rx: r * aspect.sqrt(),
                    ry: r / aspect.sqrt(),
                    angle: rng.gen_range(0.0..PI),
                }
            }
            1 => {
                let k = rng.gen_range(5..=9);
                let mut angles: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
                angles.sort_by(f64::total_cmp);
                let radii: Vec<f64> = (0..k).map(|_| rng.gen_range(0.7..1.2)).collect();
                // Scale so the polygon area matches the request.
                let raw: f64 = (0..k)
                    .map(|i| {
                        let j = (i + 1) % k;
                        let da = (angles[j] - angles[i]).rem_euclid(2.0 * PI);
                        0.5 * radii[i] * radii[j] * da.sin()
                    })
                    .sum();
                let s = (area / raw.max(0.3)).sqrt();
                let points = angles
                    .iter()
                    .zip(&radii)
                    .map(|(a, rr)| (cx + s * rr * a.cos(), cy + s * rr * a.sin()))
                    .collect();
                Outline::Polygon { points }
            }
            _ => {
                let harmonics = (2..=4)
                    .map(|k| (k as f64, rng.gen_range(0.0..0.18), rng.gen_range(0.0..2.0 * PI)))
                    .collect();
                Outline::Blob { cx, cy, radius: r, harmonics }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Outline::Ellipse { cx, cy, rx, ry, angle } => {
                let (dx, dy) = (x - cx, y - cy);
                let (c, s) = (angle.cos(), angle.sin());
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Outline::Polygon { points } => {
                // Even-odd rule.
                let mut inside = false;
                let n = points.len();
                for i in 0..n {
                    let (xi, yi) = points[i];
                    let (xj, yj) = points[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
            Outline::Blob { cx, cy, radius, harmonics } => {
                let (dx, dy) = (x - cx, y - cy);
                let phi = dy.atan2(dx);
                let scale: f64 = 1.0 + harmonics.iter().map(|(k, a, p)| a * (k * phi + p).cos()).sum::<f64>();
                (dx * dx + dy * dy).sqrt() <= radius * scale
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Pattern {
    Flat,
    Stripes { freq: f64, angle: f64 },
    Checker { cell: f64 },
    Dots { freq: f64 },
}

#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    accent: [f64; 3],
    pattern: Pattern,
}

impl Texture {
    fn random<R: Rng>(rng: &mut R, base: [f64; 3]) -> Texture {
        let shift: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.18..0.18));
        let accent = std::array::from_fn(|c| (base[c] + shift[c]).clamp(0.0, 1.0));
        let pattern = match rng.gen_range(0..4) {
            0 => Pattern::Flat,
            1 => Pattern::Stripes { freq: rng.gen_range(0.3..1.2), angle: rng.gen_range(0.0..PI) },
            2 => Pattern::Checker { cell: rng.gen_range(2.0..6.0) },
            _ => Pattern::Dots { freq: rng.gen_range(0.5..1.4) },
        };
        Texture { base, accent, pattern }
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let t = match self.pattern {
            Pattern::Flat => 0.0,
            Pattern::Stripes { freq, angle } => 0.5 + 0.5 * (freq * (x * angle.cos() + y * angle.sin())).sin(),
            Pattern::Checker { cell } => (((x / cell).floor() + (y / cell).floor()) as i64).rem_euclid(2) as f64,
            Pattern::Dots { freq } => ((freq * x).sin() * (freq * y).sin()).max(0.0),
        };
        std::array::from_fn(|c| self.base[c] * (1.0 - t) + self.accent[c] * t)
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    std::array::from_fn(|_| rng.gen_range(0.05..0.95))
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).abs()).sum()
}

/// A color at least `min_dist` (L1) from every color in `avoid`.
fn distinct_color<R: Rng>(rng: &mut R, avoid: &[[f64; 3]], min_dist: f64) -> [f64; 3] {
    let mut best = random_color(rng);
    let mut best_d = -1.0;
    for _ in 0..64 {
        let c = random_color(rng);
        let d = avoid.iter().map(|a| color_distance(c, *a)).fold(f64::INFINITY, f64::min);
        if d >= min_dist {
            return c;
        }
        if d > best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn render(spec: &DatasetSpec, index: usize) -> Result<(RgbImage, Mask)> {
    let (h, w) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let total = (h * w) as f64;

    // Background: a linear gradient between two colors with a soft wave.
    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let theta: f64 = rng.gen_range(0.0..2.0 * PI);
    let (wave_f, wave_a) = (rng.gen_range(0.05..0.3), rng.gen_range(0.0..0.08));
    let mut canvas: Vec<[f64; 3]> = (0..h * w)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let t = ((x / w as f64 - 0.5) * theta.cos() + (y / h as f64 - 0.5) * theta.sin() + 0.5).clamp(0.0, 1.0);
            let wave = wave_a * (wave_f * (x + y)).sin();
            std::array::from_fn(|c| (c0[c] * (1.0 - t) + c1[c] * t + wave).clamp(0.0, 1.0))
        })
        .collect();
    let paint = |canvas: &mut Vec<[f64; 3]>, outline: &Outline, tex: &Texture| {
        for (i, px) in canvas.iter_mut().enumerate() {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            if outline.contains(x, y) {
                *px = tex.color(x, y);
            }
        }
    };

    let mut used = vec![c0, c1];
    let clutter = (spec.clutter_level * 6.0).round() as usize;
    for _ in 0..clutter {
        let area = rng.gen_range(0.01..0.06) * total;
        let outline = Outline::random(&mut rng, area, h, w);
        let base = random_color(&mut rng);
        let tex = Texture::random(&mut rng, base);
        paint(&mut canvas, &outline, &tex);
    }

    // Non-target instances, then the target on top so its mask is its outline.
    let others = rng.gen_range(0..=2);
    for _ in 0..others {
        let area = rng.gen_range(0.03..0.2) * total;
        let outline = Outline::random(&mut rng, area, h, w);
        let base = distinct_color(&mut rng, &used, 0.3);
        used.push(base);
        let tex = Texture::random(&mut rng, base);
        paint(&mut canvas, &outline, &tex);
    }

    let target_base = distinct_color(&mut rng, &used, 0.6);
    let tex = Texture::random(&mut rng, target_base);
    for _ in 0..MAX_RETRIES {
        // Skewed toward larger objects.
        let u: f64 = rng.gen();
        let share = 0.04 + 0.41 * u.sqrt();
        let outline = Outline::random(&mut rng, share * total, h, w);
        let mask = Mask::from_fn(h, w, |x, y| outline.contains(x as f64, y as f64));
        let frac = mask.fraction();
        if !(MIN_AREA..=MAX_AREA).contains(&frac) {
            continue;
        }
        paint(&mut canvas, &outline, &tex);
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = canvas[y as usize * w + x as usize];
            Rgb(std::array::from_fn(|c| (px[c].clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        return Ok((img, mask));
    }
    Err(Error::Dataset(format!(
        "could not place a target covering {MIN_AREA}..{MAX_AREA} of a {w}x{h} image after {MAX_RETRIES} tries"
    )))
}
