//! Python bindings. Images and maps cross the boundary as nested lists
//! (rows of pixels) so the module has no numpy dependency.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use tapseg::data::{ColorImage, DatasetSpec};
use tapseg::guidance::{Click, GuidanceConfig, GuidanceKind};
use tapseg::inference::Predictor;
use tapseg::loss::{class_balanced_bce, LossConfig, WeightScheme};
use tapseg::mask::Mask;
use tapseg::model::{build_model, ModelConfig, Partition, Scale, SegModel, Variant};
use tapseg::tensor::Tensor;

fn err(e: tapseg::Error) -> PyErr {
    match e {
        tapseg::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Splits a flat row-major buffer into rows.
pub fn to_rows<T: Copy>(values: &[T], width: usize) -> Vec<Vec<T>> {
    values.chunks(width.max(1)).map(<[T]>::to_vec).collect()
}

/// Flattens rows, checking that they are rectangular.
pub fn from_rows<T: Copy>(rows: &[Vec<T>]) -> Result<(usize, usize, Vec<T>), String> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 {
        return Err("expected a non-empty 2-D list".into());
    }
    if rows.iter().any(|r| r.len() != w) {
        return Err("rows have different lengths".into());
    }
    Ok((h, w, rows.concat()))
}

fn mask_from_rows(rows: &[Vec<bool>]) -> PyResult<Mask> {
    let (h, w, data) = from_rows(rows).map_err(PyValueError::new_err)?;
    Mask::new(h, w, data).map_err(err)
}

fn image_from_rows(rows: &[Vec<[f32; 3]>]) -> PyResult<ColorImage> {
    let (h, w, px) = from_rows(rows).map_err(PyValueError::new_err)?;
    let mut data = vec![0.0; 3 * h * w];
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = p[c];
        }
    }
    Ok(ColorImage { height: h, width: w, data })
}

fn image_to_rows(img: &ColorImage) -> Vec<Vec<[f32; 3]>> {
    let plane = img.height * img.width;
    let px: Vec<[f32; 3]> =
        (0..plane).map(|i| [img.data[i], img.data[plane + i], img.data[2 * plane + i]]).collect();
    to_rows(&px, img.width)
}

fn parse<T: std::str::FromStr<Err = tapseg::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn guidance_config(kind: &str, sigma: f64, radius: f64, clamp: f64) -> PyResult<GuidanceConfig> {
    Ok(GuidanceConfig { kind: parse(kind)?, sigma, radius, clamp })
}

/// Guidance map for positive clicks `[(x, y), ...]` as rows of floats.
#[pyfunction]
#[pyo3(signature = (clicks, height, width, kind="gaussian", sigma=10.0, radius=5.0, clamp=255.0))]
fn guidance_map(
    clicks: Vec<(usize, usize)>,
    height: usize,
    width: usize,
    kind: &str,
    sigma: f64,
    radius: f64,
    clamp: f64,
) -> PyResult<Vec<Vec<f32>>> {
    let clicks: Vec<Click> = clicks.into_iter().map(|(x, y)| Click::new(x, y)).collect();
    let map = guidance_config(kind, sigma, radius, clamp)?.encode(&clicks, height, width).map_err(err)?;
    Ok(to_rows(&map.values, width))
}

/// Deterministic evaluation click `(x, y)` of a boolean mask.
#[pyfunction]
fn eval_click(mask: Vec<Vec<bool>>) -> PyResult<(usize, usize)> {
    let c = tapseg::clicks::eval_click(&mask_from_rows(&mask)?).map_err(err)?;
    Ok((c.x, c.y))
}

#[pyfunction]
fn iou(pred: Vec<Vec<bool>>, gt: Vec<Vec<bool>>) -> PyResult<f64> {
    tapseg::metrics::iou(&mask_from_rows(&pred)?, &mask_from_rows(&gt)?).map_err(err)
}

/// Class-balanced BCE over flat `pred`/`target` of equal length. Returns
/// `(loss, (w0, w1), fg_fraction)`.
#[pyfunction]
#[pyo3(signature = (pred, target, scheme="inverse-frequency", clamp=Some(1e-7)))]
fn balanced_bce(
    pred: Vec<f64>,
    target: Vec<f64>,
    scheme: &str,
    clamp: Option<f64>,
) -> PyResult<(f64, (f64, f64), f64)> {
    let scheme = match scheme {
        "inverse-frequency" => WeightScheme::InverseFrequency,
        "complement" => WeightScheme::Complement,
        other => return Err(PyValueError::new_err(format!("unknown weight scheme `{other}`"))),
    };
    let (n, m) = (pred.len(), target.len());
    let p = Tensor::<f64>::new(pred, &[n]).map_err(err)?;
    let t = Tensor::<f64>::new(target, &[m]).map_err(err)?;
    let r = class_balanced_bce(&p, &t, &LossConfig { scheme, clamp }).map_err(err)?;
    Ok((r.total(), r.weights, r.fg_fraction))
}

/// Synthetic sample `index` of the corpus with the given settings:
/// `(image_rows, mask_rows)` with RGB in `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (index, seed=0, size=64, clutter=0.5))]
fn synth_sample(
    index: usize,
    seed: u64,
    size: usize,
    clutter: f64,
) -> PyResult<(Vec<Vec<[f32; 3]>>, Vec<Vec<bool>>)> {
    let spec = DatasetSpec { seed, size: (size, size), clutter_level: clutter, ..DatasetSpec::default() };
    let s = spec.sample(index).map_err(err)?;
    Ok((image_to_rows(&s.image), to_rows(&s.mask.data, s.mask.width)))
}

/// A segmentation network.
#[pyclass(name = "Model")]
pub struct PyModel {
    inner: SegModel<f32>,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model: `variant` is baseline, early or multi;
    /// `scale` tiny or full.
    #[new]
    #[pyo3(signature = (variant="multi", scale="tiny", seed=0))]
    fn new(variant: &str, scale: &str, seed: u64) -> PyResult<Self> {
        let variant: Variant = parse(variant)?;
        let scale = match scale {
            "tiny" => Scale::Tiny,
            "full" => Scale::Full,
            other => return Err(PyValueError::new_err(format!("unknown scale `{other}`"))),
        };
        let inner = build_model(&ModelConfig::for_scale(scale, variant), seed).map_err(err)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel { inner: tapseg::checkpoint::load_checkpoint(path).map_err(err)? })
    }

    /// Writes a checkpoint and returns its model id.
    fn save(&self, path: &str) -> PyResult<String> {
        tapseg::checkpoint::save_checkpoint(&self.inner, path).map_err(err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config.variant.as_str()
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        self.inner.config.input_size
    }

    /// Parameter count, optionally for the "early" or "fusion" partition.
    #[pyo3(signature = (partition=None))]
    fn param_count(&self, partition: Option<&str>) -> PyResult<usize> {
        let p = partition.map(parse::<Partition>).transpose()?;
        Ok(self.inner.param_count(p))
    }

    /// `[(stage, (n, c, h, w)), ...]` for a batch of `n`.
    #[pyo3(signature = (n=1))]
    fn shapes(&self, n: usize) -> PyResult<Vec<(String, (usize, usize, usize, usize))>> {
        let trace = self.inner.config.infer_shapes(n).map_err(err)?;
        Ok(trace.stages.iter().map(|(s, [a, b, c, d])| (s.to_string(), (*a, *b, *c, *d))).collect())
    }

    /// Foreground probabilities (rows) for an RGB image given as rows of
    /// `[r, g, b]` in `[0, 1]` and one click in its pixel coordinates.
    #[pyo3(signature = (image, click, guidance="gaussian"))]
    fn predict(&self, py: Python<'_>, image: Vec<Vec<[f32; 3]>>, click: (usize, usize), guidance: &str) -> PyResult<Vec<Vec<f32>>> {
        let img = image_from_rows(&image)?;
        let cfg = GuidanceConfig::with_kind(parse::<GuidanceKind>(guidance)?);
        let clicks = [Click::new(click.0, click.1)];
        let prob = py.detach(|| self.inner.predict(&img, &clicks, &cfg)).map_err(err)?;
        Ok(to_rows(&prob.values, prob.width))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant={}, input_size={:?}, params={})",
            self.inner.config.variant,
            self.inner.config.input_size,
            self.inner.param_count(None)
        )
    }
}

#[pymodule]
#[pyo3(name = "tapseg")]
fn tapseg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(guidance_map, m)?)?;
    m.add_function(wrap_pyfunction!(eval_click, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_bce, m)?)?;
    m.add_function(wrap_pyfunction!(synth_sample, m)?)?;
    Ok(())
}
