use super::linalg::gemm;
use super::{Float, Tensor};
use crate::error::{Error, Result};

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    op,
                    format!("shapes {a:?} and {b:?} are not broadcast-compatible (dim {i})"),
                ))
            }
        };
    }
    Ok(out)
}

/// For every element of `out`, the offset of the element of `input` that
/// broadcasts onto it. `None` when no broadcasting is needed.
fn broadcast_map(out: &[usize], input: &[usize]) -> Option<Vec<usize>> {
    if out == input {
        return None;
    }
    let rank = out.len();
    let pad = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + pad] = acc;
        }
        acc *= input[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

fn gather<T: Float>(data: &[T], map: &Option<Vec<usize>>, i: usize) -> T {
    match map {
        Some(m) => data[m[i]],
        None => data[i],
    }
}

fn reduce_to<T: Float>(grad: Vec<T>, map: &Option<Vec<usize>>, numel: usize) -> Vec<T> {
    match map {
        None => grad,
        Some(m) => {
            let mut out = vec![T::zero(); numel];
            for (g, &j) in grad.iter().zip(m) {
                out[j] += *g;
            }
            out
        }
    }
}

fn binary<T: Float>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: fn(T, T) -> T,
    // (grad_out, a_value, b_value) -> (d/da, d/db)
    df: fn(T, T, T) -> (T, T),
) -> Result<Tensor<T>> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let map_a = broadcast_map(&shape, a.shape());
    let map_b = broadcast_map(&shape, b.shape());
    let numel: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<T> = (0..numel)
        .map(|i| f(gather(ad, &map_a, i), gather(bd, &map_b, i)))
        .collect();
    Ok(Tensor::from_op(
        op,
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |inputs, g| {
            let (a, b) = (&inputs[0], &inputs[1]);
            let (ad, bd) = (a.data(), b.data());
            let mut ga = Vec::with_capacity(if a.requires_grad() { g.len() } else { 0 });
            let mut gb = Vec::with_capacity(if b.requires_grad() { g.len() } else { 0 });
            for (i, &go) in g.iter().enumerate() {
                let (da, db) = df(go, gather(ad, &map_a, i), gather(bd, &map_b, i));
                if a.requires_grad() {
                    ga.push(da);
                }
                if b.requires_grad() {
                    gb.push(db);
                }
            }
            vec![
                a.requires_grad().then(|| reduce_to(ga, &map_a, a.numel())),
                b.requires_grad().then(|| reduce_to(gb, &map_b, b.numel())),
            ]
        }),
    ))
}

/// Element-wise sum with broadcasting.
pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("add", a, b, |x, y| x + y, |g, _, _| (g, g))
}

pub fn sub<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("sub", a, b, |x, y| x - y, |g, _, _| (g, -g))
}

/// Element-wise product with broadcasting.
pub fn mul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("mul", a, b, |x, y| x * y, |g, x, y| (g * y, g * x))
}

pub fn scale<T: Float>(x: &Tensor<T>, factor: f64) -> Tensor<T> {
    let s = T::lit(factor);
    Tensor::from_op(
        "scale",
        x.shape().to_vec(),
        x.data().iter().map(|&v| v * s).collect(),
        vec![x.clone()],
        Box::new(move |_, g| vec![Some(g.iter().map(|&v| v * s).collect())]),
    )
}

pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_op(
        "relu",
        x.shape().to_vec(),
        x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        vec![x.clone()],
        Box::new(|inputs, g| {
            let x = inputs[0].data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        }),
    )
}

pub(crate) fn sigmoid_scalar<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let y: Vec<T> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let saved = y.clone();
    Tensor::from_op(
        "sigmoid",
        x.shape().to_vec(),
        y,
        vec![x.clone()],
        Box::new(move |_, g| {
            vec![Some(g.iter().zip(&saved).map(|(&g, &y)| g * y * (T::one() - y)).collect())]
        }),
    )
}

/// Sum of all elements as a one-element tensor.
pub fn sum<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let total: T = x.data().iter().copied().sum();
    let n = x.numel();
    Tensor::from_op(
        "sum",
        vec![1],
        vec![total],
        vec![x.clone()],
        Box::new(move |_, g| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.numel();
    let inv = T::one() / T::lit(n as f64);
    let total: T = x.data().iter().copied().sum();
    Tensor::from_op(
        "mean",
        vec![1],
        vec![total * inv],
        vec![x.clone()],
        Box::new(move |_, g| vec![Some(vec![g[0] * inv; n])]),
    )
}

pub fn reshape<T: Float>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().product::<usize>() != x.numel() {
        return Err(Error::shape(
            "reshape",
            format!("cannot view {:?} as {shape:?}", x.shape()),
        ));
    }
    Ok(Tensor::from_op(
        "reshape",
        shape.to_vec(),
        x.to_vec(),
        vec![x.clone()],
        Box::new(|_, g| vec![Some(g.to_vec())]),
    ))
}

/// Joins tensors along `axis`; every other dimension must agree.
pub fn concat<T: Float>(tensors: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::shape("concat", "no tensors given"))?;
    let rank = first.ndim();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    for t in tensors {
        let s = t.shape();
        let ok = s.len() == rank
            && s.iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{s:?} does not match {:?} outside axis {axis}", first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let widths: Vec<usize> = tensors.iter().map(|t| t.shape()[axis] * inner).collect();
    let row: usize = widths.iter().sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = tensors.iter().map(|t| t.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * row);
    for o in 0..outer {
        for (t, &w) in tensors.iter().zip(&widths) {
            data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
        }
    }
    Ok(Tensor::from_op(
        "concat",
        shape,
        data,
        tensors.to_vec(),
        Box::new(move |inputs, g| {
            let mut start = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (t, &w) in inputs.iter().zip(&widths) {
                if t.requires_grad() {
                    let mut gi = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        let base = o * row + start;
                        gi.extend_from_slice(&g[base..base + w]);
                    }
                    grads.push(Some(gi));
                } else {
                    grads.push(None);
                }
                start += w;
            }
            grads
        }),
    ))
}

/// 2-D matrix product `(m, k) @ (k, n)`.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
        (sa, sb) => {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ))
        }
    };
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, T::zero(), &mut out);
    Ok(Tensor::from_op(
        "matmul",
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |inputs, g| {
            let (a, b) = (&inputs[0], &inputs[1]);
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![T::zero(); m * k];
                gemm(m, n, k, g, false, b.data(), true, T::zero(), &mut ga);
                ga
            });
            let gb = b.requires_grad().then(|| {
                let mut gb = vec![T::zero(); k * n];
                gemm(k, m, n, a.data(), true, g, false, T::zero(), &mut gb);
                gb
            });
            vec![ga, gb]
        }),
    ))
}
