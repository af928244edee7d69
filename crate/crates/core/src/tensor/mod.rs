//! Dense NCHW tensors with a dynamic reverse-mode autodiff graph.
//!
//! Every operation returns a fresh [`Tensor`]. When any input requires a
//! gradient (and grad mode is enabled on the current thread) the result keeps
//! a reference to its inputs together with a backward closure; calling
//! [`Tensor::backward`] on a scalar walks that graph in reverse topological
//! order and accumulates gradients into the leaves.
//!
//! Tensor data is immutable once constructed. Only the gradient accumulator of
//! a leaf is ever mutated, so tensors are `Send + Sync` and a trained model can
//! be shared by concurrent inference threads.

mod conv;
mod gradcheck;
mod linalg;
mod norm;
mod ops;
mod pool;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::{Arc, Mutex, RwLock};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use conv::{conv2d, conv2d_output_dim, maxpool2d};
pub use gradcheck::{grad_check, GradCheckReport};
pub use norm::{batch_norm2d, BatchNormOptions, Mode, RunningStats};
pub use ops::{add, concat, matmul, mul, relu, reshape, scale, sigmoid, sub, sum, mean};
pub use pool::{adaptive_avgpool, bilinear_source, bilinear_upsample, global_avgpool, resize_bilinear};

/// Element type of a tensor. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a @ b + beta * c` on raw strided buffers.
    ///
    /// # Safety
    /// The caller guarantees that every strided access stays inside the
    /// allocations behind `a`, `b` and `c`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal fits every float type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("floats convert to f64")
    }
}

impl Float for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Float for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[Tensor<T>], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Float> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Float> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

/// Reference-counted handle to an immutable n-dimensional array.
pub struct Tensor<T: Float = f32> {
    node: Arc<Node<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { node: Arc::clone(&self.node) }
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.node.grad_fn.as_ref().map(|g| g.op).unwrap_or("leaf");
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &op)
            .finish()
    }
}

impl<T: Float> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Arc::new(Node {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn: None,
            }),
        }
    }

    /// Creates a leaf tensor. Fails when `data.len()` differs from the shape's volume.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} values but {} were given", data.len()),
            ));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(shape.to_vec(), vec![value; shape.iter().product()], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), (0..n).map(&mut f).collect(), false)
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
    }

    /// Returns a new leaf sharing no graph with `self`, with the given flag.
    pub fn requires_grad_(self, requires_grad: bool) -> Self {
        if self.node.grad_fn.is_none() && self.node.requires_grad == requires_grad {
            return self;
        }
        Self::leaf(self.node.shape.clone(), self.node.data.clone(), requires_grad)
    }

    /// Leaf copy without graph history.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.shape.clone(), self.node.data.clone(), false)
    }

    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{op}");
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn { op, inputs, backward });
        Tensor {
            node: Arc::new(Node {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Name of the operation that produced this tensor, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.op)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on a tensor with {} elements", self.numel());
        self.node.data[0]
    }

    /// Interprets the tensor as NCHW.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => Err(Error::shape(op, format!("expected a 4-D NCHW tensor, got {s:?}"))),
        }
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    /// Converts element type, producing a leaf.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor::leaf(
            self.node.shape.clone(),
            self.node.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
            false,
        )
    }

    fn ptr(&self) -> *const Node<T> {
        Arc::as_ptr(&self.node)
    }

    /// Inputs-before-outputs ordering of every node reachable through
    /// gradient-requiring edges.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.ptr()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for input in gf.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.ptr()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Back-propagates from a scalar, adding `d self / d leaf` into the
    /// gradient accumulator of every reachable leaf that requires a gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.numel()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
        pending.insert(self.ptr(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(grad_out) = pending.remove(&t.ptr()) else {
                continue;
            };
            match &t.node.grad_fn {
                None => {
                    let mut slot = t.node.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad_out).for_each(|(a, &g)| *a += g),
                        None => *slot = Some(grad_out),
                    }
                }
                Some(gf) => {
                    let input_grads = (gf.backward)(&gf.inputs, &grad_out);
                    debug_assert_eq!(input_grads.len(), gf.inputs.len(), "{}", gf.op);
                    for (input, g) in gf.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), input.numel(), "{} gradient size", gf.op);
                        match pending.get_mut(&input.ptr()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                            None => {
                                pending.insert(input.ptr(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// A named trainable tensor.
pub struct Parameter<T: Float = f32> {
    name: String,
    tensor: Tensor<T>,
    frozen: bool,
}

impl<T: Float> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Parameter { name: name.into(), tensor: value.requires_grad_(true), frozen: false }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Handle for use in a forward pass.
    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Frozen parameters do not record gradients and are skipped by optimizers.
    pub fn set_frozen(&mut self, frozen: bool) {
        if self.frozen != frozen {
            self.frozen = frozen;
            self.tensor = self.tensor.detach().requires_grad_(!frozen);
        }
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.tensor.grad()
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }

    /// Replaces the values; the gradient accumulator starts empty.
    pub fn assign(&mut self, data: Vec<T>) -> Result<()> {
        self.tensor = Tensor::new(data, self.tensor.shape())?.requires_grad_(!self.frozen);
        Ok(())
    }
}

impl<T: Float> fmt::Debug for Parameter<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.name)
            .field("shape", &self.shape())
            .field("frozen", &self.frozen)
            .finish()
    }
}

/// Named non-trainable state (batch-norm running statistics).
pub struct Buffer<T: Float = f32> {
    name: String,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
}

impl<T: Float> Buffer<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Buffer { name: name.into(), shape: shape.to_vec(), data: RwLock::new(data) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn get(&self) -> Vec<T> {
        self.data.read().expect("buffer lock").clone()
    }

    pub fn set(&self, data: Vec<T>) -> Result<()> {
        let mut slot = self.data.write().expect("buffer lock");
        if data.len() != slot.len() {
            return Err(Error::shape(
                "buffer",
                format!("`{}` holds {} values, got {}", self.name, slot.len(), data.len()),
            ));
        }
        *slot = data;
        Ok(())
    }

    pub(crate) fn update(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.data.write().expect("buffer lock"));
    }
}

impl<T: Float> fmt::Debug for Buffer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Buffer").field("name", &self.name).field("shape", &self.shape).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_volume() {
        assert!(Tensor::<f32>::new(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::<f32>::new(vec![1.0; 6], &[2, 3]).is_ok());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f64>::new(vec![1.0, -2.0, 3.0], &[3]).unwrap().requires_grad_(true);
        sum(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_is_two_x() {
        let x = Tensor::<f64>::new(vec![1.5, -2.0, 0.25], &[3]).unwrap().requires_grad_(true);
        sum(&mul(&x, &x).unwrap()).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, -4.0, 0.5]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0], &[2]).unwrap().requires_grad_(true);
        let loss = sum(&mul(&x, &x).unwrap());
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn shared_subexpression_sums_paths() {
        // y = x*x + x  -> dy/dx = 2x + 1
        let x = Tensor::<f64>::new(vec![3.0], &[1]).unwrap().requires_grad_(true);
        let y = add(&mul(&x, &x).unwrap(), &x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn non_scalar_backward_errors() {
        let x = Tensor::<f32>::ones(&[2]).requires_grad_(true);
        assert!(matches!(x.backward(), Err(Error::NonScalarLoss(2))));
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::<f32>::ones(&[2]).requires_grad_(true);
        let y = no_grad(|| relu(&x));
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
        assert!(grad_enabled());
    }

    #[test]
    fn frozen_parameter_receives_no_grad() {
        let mut p = Parameter::new("w", Tensor::<f64>::ones(&[2]));
        p.set_frozen(true);
        let loss = sum(&mul(p.tensor(), p.tensor()).unwrap());
        loss.backward().unwrap();
        assert!(p.grad().is_none());
    }

    #[test]
    fn seeded_randn_is_reproducible() {
        use rand::SeedableRng;
        let a = Tensor::<f32>::randn(&[16], 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let b = Tensor::<f32>::randn(&[16], 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
