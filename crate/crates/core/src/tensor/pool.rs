use super::{Float, Tensor};
use crate::error::{Error, Result};

/// `(N, C, H, W) -> (N, C, 1, 1)` spatial mean.
pub fn global_avgpool<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4("global_avgpool")?;
    adaptive_avgpool_inner("global_avgpool", x, 1, 1, h, w)
}

/// Averages each cell of a `gh × gw` partition of the spatial grid. Cell `i`
/// along an axis of length `L` covers `[floor(i·L/g), floor((i+1)·L/g))`.
pub fn adaptive_avgpool<T: Float>(x: &Tensor<T>, gh: usize, gw: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4("adaptive_avgpool")?;
    adaptive_avgpool_inner("adaptive_avgpool", x, gh, gw, h, w)
}

fn adaptive_avgpool_inner<T: Float>(
    op: &'static str,
    x: &Tensor<T>,
    gh: usize,
    gw: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    if gh == 0 || gw == 0 || gh > h || gw > w {
        return Err(Error::shape(op, format!("{gh}x{gw} grid does not partition a {h}x{w} map")));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let rows: Vec<(usize, usize)> = (0..gh).map(|i| (i * h / gh, (i + 1) * h / gh)).collect();
    let cols: Vec<(usize, usize)> = (0..gw).map(|j| (j * w / gw, (j + 1) * w / gw)).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * gh * gw);
    for plane in 0..n * c {
        let base = plane * h * w;
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let mut s = T::zero();
                for r in r0..r1 {
                    for v in &xd[base + r * w + c0..base + r * w + c1] {
                        s += *v;
                    }
                }
                out.push(s / T::lit(((r1 - r0) * (c1 - c0)) as f64));
            }
        }
    }
    Ok(Tensor::from_op(
        op,
        vec![n, c, gh, gw],
        out,
        vec![x.clone()],
        Box::new(move |_, g| {
            let mut gx = vec![T::zero(); n * c * h * w];
            let mut k = 0;
            for plane in 0..n * c {
                let base = plane * h * w;
                for &(r0, r1) in &rows {
                    for &(c0, c1) in &cols {
                        let share = g[k] / T::lit(((r1 - r0) * (c1 - c0)) as f64);
                        k += 1;
                        for r in r0..r1 {
                            for v in &mut gx[base + r * w + c0..base + r * w + c1] {
                                *v += share;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Source taps for output index `i` when resampling `in_len -> out_len` with
/// half-pixel alignment: `(lower, upper, weight_of_upper)`.
pub fn bilinear_source(i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

struct Taps<T> {
    rows: Vec<(usize, usize, T)>,
    cols: Vec<(usize, usize, T)>,
}

impl<T: Float> Taps<T> {
    fn new(h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        let conv = |(a, b, f): (usize, usize, f64)| (a, b, T::lit(f));
        Taps {
            rows: (0..out_h).map(|i| conv(bilinear_source(i, h, out_h))).collect(),
            cols: (0..out_w).map(|j| conv(bilinear_source(j, w, out_w))).collect(),
        }
    }

    fn apply(&self, src: &[T], w: usize, dst: &mut Vec<T>) {
        for &(r0, r1, fy) in &self.rows {
            for &(c0, c1, fx) in &self.cols {
                let top = src[r0 * w + c0] * (T::one() - fx) + src[r0 * w + c1] * fx;
                let bot = src[r1 * w + c0] * (T::one() - fx) + src[r1 * w + c1] * fx;
                dst.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
}

/// Bilinear resize of a batch of feature maps to `out_h × out_w`.
pub fn bilinear_upsample<T: Float>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("bilinear_upsample")?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "bilinear_upsample",
            format!("cannot resample {h}x{w} to {out_h}x{out_w}"),
        ));
    }
    if (out_h, out_w) == (h, w) {
        return super::reshape(x, x.shape());
    }
    let taps = Taps::<T>::new(h, w, out_h, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        taps.apply(plane, w, &mut out);
    }
    Ok(Tensor::from_op(
        "bilinear_upsample",
        vec![n, c, out_h, out_w],
        out,
        vec![x.clone()],
        Box::new(move |_, g| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for (gplane, dst) in g.chunks(out_h * out_w).zip(gx.chunks_mut(h * w)) {
                let mut k = 0;
                for &(r0, r1, fy) in &taps.rows {
                    for &(c0, c1, fx) in &taps.cols {
                        let v = gplane[k];
                        k += 1;
                        let (top, bot) = (v * (T::one() - fy), v * fy);
                        dst[r0 * w + c0] += top * (T::one() - fx);
                        dst[r0 * w + c1] += top * fx;
                        dst[r1 * w + c0] += bot * (T::one() - fx);
                        dst[r1 * w + c1] += bot * fx;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Bilinear resize of raw planar data (`planes` stacked `h × w` maps), using
/// the same sampling rule as [`bilinear_upsample`].
pub fn resize_bilinear<T: Float>(
    data: &[T],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    assert_eq!(data.len(), planes * h * w);
    if (out_h, out_w) == (h, w) {
        return data.to_vec();
    }
    let taps = Taps::<T>::new(h, w, out_h, out_w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for plane in data.chunks(h * w) {
        taps.apply(plane, w, &mut out);
    }
    out
}
