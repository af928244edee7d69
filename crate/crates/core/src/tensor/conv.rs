use super::linalg::gemm;
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Spatial output size of a convolution or pooling window.
pub fn conv2d_output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (stride > 0 && kernel > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn np(&self) -> usize {
        self.n * self.p()
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap of row `row`.
    #[inline]
    fn for_row(&self, ci: usize, ki: usize, kj: usize, mut f: impl FnMut(usize, usize)) {
        let p = self.p();
        for ni in 0..self.n {
            let x_base = (ni * self.c + ci) * self.h * self.w;
            for oh in 0..self.ho {
                let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                if ih < 0 || ih >= self.h as isize {
                    continue;
                }
                let col_base = ni * p + oh * self.wo;
                let x_row = x_base + ih as usize * self.w;
                for ow in 0..self.wo {
                    let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                    if iw >= 0 && iw < self.w as isize {
                        f(col_base + ow, x_row + iw as usize);
                    }
                }
            }
        }
    }

    fn im2col<T: Float>(&self, x: &[T]) -> Vec<T> {
        let np = self.np();
        let mut cols = vec![T::zero(); self.k() * np];
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * np..(row + 1) * np];
                    self.for_row(ci, ki, kj, |col, xi| dst[col] = x[xi]);
                }
            }
        }
        cols
    }

    fn col2im<T: Float>(&self, cols: &[T]) -> Vec<T> {
        let np = self.np();
        let mut x = vec![T::zero(); self.n * self.c * self.h * self.w];
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * np..(row + 1) * np];
                    self.for_row(ci, ki, kj, |col, xi| x[xi] += src[col]);
                }
            }
        }
        x
    }
}

/// 2-D cross-correlation of `x: (N, Cin, H, W)` with `weight: (Cout, Cin, kh, kw)`
/// and optional `bias: (Cout)`, zero padding on every side.
pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("conv2d")?;
    let (cout, cin, kh, kw) = weight.dims4("conv2d")?;
    if cin != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels but the kernel expects {cin}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {cout} filters", b.shape())));
        }
    }
    let (ho, wo) = match (
        conv2d_output_dim(h, kh, stride, padding),
        conv2d_output_dim(w, kw, stride, padding),
    ) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("{kh}x{kw} kernel (stride {stride}) exceeds padded {h}x{w} input with padding {padding}"),
            ))
        }
    };
    let geo = Geometry { n, c, h, w, kh, kw, stride, pad: padding, ho, wo };
    let (k, p, np) = (geo.k(), geo.p(), geo.np());

    let cols = geo.im2col(x.data());
    let mut out_mat = vec![T::zero(); cout * np];
    gemm(cout, k, np, weight.data(), false, &cols, false, T::zero(), &mut out_mat);

    let mut out = vec![T::zero(); n * cout * p];
    for co in 0..cout {
        let b = bias.map_or(T::zero(), |b| b.data()[co]);
        for ni in 0..n {
            let src = &out_mat[co * np + ni * p..co * np + (ni + 1) * p];
            let dst = &mut out[(ni * cout + co) * p..(ni * cout + co + 1) * p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }

    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op(
        "conv2d",
        vec![n, cout, ho, wo],
        out,
        inputs,
        Box::new(move |inputs, g| {
            let mut dy = vec![T::zero(); cout * np];
            for ni in 0..n {
                for co in 0..cout {
                    dy[co * np + ni * p..co * np + (ni + 1) * p]
                        .copy_from_slice(&g[(ni * cout + co) * p..(ni * cout + co + 1) * p]);
                }
            }
            let (x, weight) = (&inputs[0], &inputs[1]);
            let gx = x.requires_grad().then(|| {
                let mut dcols = vec![T::zero(); k * np];
                gemm(k, cout, np, weight.data(), true, &dy, false, T::zero(), &mut dcols);
                geo.col2im(&dcols)
            });
            let gw = weight.requires_grad().then(|| {
                let mut gw = vec![T::zero(); cout * k];
                gemm(cout, np, k, &dy, false, &cols, true, T::zero(), &mut gw);
                gw
            });
            let mut grads = vec![gx, gw];
            if let Some(b) = inputs.get(2) {
                grads.push(b.requires_grad().then(|| {
                    dy.chunks(np).map(|row| row.iter().copied().sum()).collect()
                }));
            }
            grads
        }),
    ))
}

/// Max pooling without padding. Ties resolve to the first element in
/// row-major scan order of the window.
pub fn maxpool2d<T: Float>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("maxpool2d")?;
    let (ho, wo) = match (
        conv2d_output_dim(h, kernel, stride, 0),
        conv2d_output_dim(w, kernel, stride, 0),
    ) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::shape(
                "maxpool2d",
                format!("{kernel}x{kernel} window does not fit a {h}x{w} map"),
            ))
        }
    };
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + oh * stride * w + ow * stride;
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let idx = base + (oh * stride + ki) * w + ow * stride + kj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    let numel = x.numel();
    Ok(Tensor::from_op(
        "maxpool2d",
        vec![n, c, ho, wo],
        out,
        vec![x.clone()],
        Box::new(move |_, g| {
            let mut gx = vec![T::zero(); numel];
            for (&src, &go) in argmax.iter().zip(g) {
                gx[src] += go;
            }
            vec![Some(gx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct sliding-window convolution.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> (Vec<usize>, Vec<f64>) {
        let (n, c, h, wd) = x.dims4("t").unwrap();
        let (co, _, kh, kw) = w.dims4("t").unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * co * ho * wo];
        for ni in 0..n {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = b[o];
                        for ci in 0..c {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let y = (i * stride + u) as isize - pad as isize;
                                    let z = (j * stride + v) as isize - pad as isize;
                                    if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < wd {
                                        acc += x.data()[((ni * c + ci) * h + y as usize) * wd + z as usize]
                                            * w.data()[((o * c + ci) * kh + u) * kw + v];
                                    }
                                }
                            }
                        }
                        out[((ni * co + o) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        (vec![n, co, ho, wo], out)
    }

    #[test]
    fn one_by_one_unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[2, 1, 5, 4], 1.0, &mut rng);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[1, 1, 3, 3], 1.0, &mut rng);
        let w = Tensor::new(vec![1.0, -2.0, 0.5, 3.0], &[1, 1, 2, 2]).unwrap();
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        let (shape, want) = naive_conv(&x, &w, &[0.0], 1, 0);
        assert_eq!(y.shape(), shape.as_slice());
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }

        for &(stride, pad) in &[(1, 1), (2, 1), (2, 3), (3, 0)] {
            let x = Tensor::<f64>::randn(&[2, 3, 8, 7], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
            let y = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let (shape, want) = naive_conv(&x, &w, b.data(), stride, pad);
            assert_eq!(y.shape(), shape.as_slice());
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn stride_two_seven_by_seven_halves_resolution() {
        assert_eq!(conv2d_output_dim(512, 7, 2, 3), Some(256));
        assert_eq!(conv2d_output_dim(64, 7, 2, 3), Some(32));
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let bad_channels = Tensor::zeros(&[2, 4, 3, 3]);
        assert!(conv2d(&x, &bad_channels, None, 1, 1).is_err());
        let too_big = Tensor::zeros(&[2, 3, 7, 7]);
        assert!(conv2d(&x, &too_big, None, 1, 1).is_err());
        assert!(conv2d(&x, &too_big, None, 1, 2).is_ok());
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().data(), &[4.0]);

        let c = Tensor::<f64>::full(&[1, 1, 4, 4], 7.0).requires_grad_(true);
        let y = maxpool2d(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        super::super::sum(&y).backward().unwrap();
        let g = c.grad().unwrap();
        let want = [
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(g, want);
    }

    #[test]
    fn maxpool_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        let y = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 4]);
        for plane in 0..6 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut m = f64::NEG_INFINITY;
                    for u in 0..2 {
                        for v in 0..2 {
                            m = m.max(x.data()[plane * 64 + (2 * i + u) * 8 + 2 * j + v]);
                        }
                    }
                    assert_eq!(y.data()[plane * 16 + i * 4 + j], m);
                }
            }
        }
    }

    #[test]
    fn maxpool_rejects_small_maps() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 4]);
        assert!(maxpool2d(&x, 2, 2).is_err());
    }
}
