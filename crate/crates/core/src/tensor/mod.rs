//! Dense N-D tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable buffer plus an optional record of the
//! operation that produced it. Operations whose inputs do not require
//! gradients record nothing, so inference builds no graph. Calling
//! [`Tensor::backward`] on a scalar walks the recorded graph once in reverse
//! topological order and accumulates into the `grad` slot of every tensor
//! that requires one.
//!
//! Layout is row-major; 5-D activations use `[N, C, D, H, W]`.

mod conv;
mod gemm;
mod norm;
mod ops;
mod resize;
pub mod serialize;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use conv::conv3d;
pub use norm::{channel_affine, group_norm, instance_norm, NORM_EPS};
pub(crate) use ops::sigmoid_scalar;
pub use ops::{add, concat, elementwise_max, leaky_relu, mean, mul, narrow, relu, scale, sigmoid, square, sub, sum};
pub(crate) use resize::trilinear;
pub use resize::{avg_pool2x, upsample_trilinear2x};

/// Scalar types a tensor can hold. `f32` is the training path, `f64` is used
/// for finite-difference gradient checks.
pub trait Element: Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const DTYPE: &'static str;

    /// `c = alpha * a * b + beta * c` on strided row/column views.
    ///
    /// # Safety
    /// All strided accesses must be in bounds of the pointed-to buffers.
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";

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

impl Element for f64 {
    const DTYPE: &'static str = "f64";

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

/// What a backward function sees: the op's inputs, its forward output and the
/// gradient flowing into that output.
pub struct BackwardCtx<'a, T: Element> {
    pub inputs: &'a [Tensor<T>],
    pub output: &'a [T],
    pub output_shape: &'a [usize],
    pub grad: &'a [T],
}

impl<T: Element> BackwardCtx<'_, T> {
    /// Whether input `i` wants a gradient.
    pub fn needs(&self, i: usize) -> bool {
        self.inputs[i].requires_grad()
    }
}

/// The backward half of a differentiable operation.
///
/// Built-in ops implement this internally; it is public so callers can
/// register their own differentiable functions with [`Tensor::from_op`].
pub trait Function<T: Element>: Send + Sync {
    fn name(&self) -> &str;

    /// One entry per input, `None` where the input needs no gradient.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Element> {
    inputs: Vec<Tensor<T>>,
    function: Box<dyn Function<T>>,
}

struct Inner<T: Element> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

/// Reference-counted tensor handle. Cloning is cheap and shares storage.
pub struct Tensor<T: Element = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.inner.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.inner.requires_grad);
        if let Some(node) = &self.inner.node {
            s.field("op", &node.function.name());
        }
        if self.numel() <= 8 {
            s.field("data", &self.inner.data);
        }
        s.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    /// A constant tensor that never receives a gradient.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} holds {} elements but buffer has {}",
                    numel_of(shape),
                    data.len()
                ),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// A leaf tensor that accumulates gradients (a trainable parameter or a
    /// gradient-check input).
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(Self::build(t.inner.shape.clone(), t.into_data(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![T::zero(); numel_of(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), vec![value; numel_of(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(Vec::new(), vec![value], false, None)
    }

    /// Wraps the result of a differentiable computation. A graph node is
    /// recorded only if some input requires a gradient.
    pub fn from_op(
        data: Vec<T>,
        shape: &[usize],
        inputs: Vec<Tensor<T>>,
        function: impl Function<T> + 'static,
    ) -> Self {
        Self::from_boxed_op(data, shape, inputs, Box::new(function))
    }

    pub(crate) fn from_boxed_op(
        data: Vec<T>,
        shape: &[usize],
        inputs: Vec<Tensor<T>>,
        function: Box<dyn Function<T>>,
    ) -> Self {
        assert_eq!(numel_of(shape), data.len(), "{}: output buffer size", function.name());
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let node = requires_grad.then(|| Node { inputs, function });
        Self::build(shape.to_vec(), data, requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    /// Takes the buffer without copying when this is the only handle.
    pub fn into_data(self) -> Vec<T> {
        match Arc::try_unwrap(self.inner) {
            Ok(inner) => inner.data,
            Err(shared) => shared.data.clone(),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Name of the op that produced this tensor, if it is a graph node.
    pub fn op_name(&self) -> Option<&str> {
        self.inner.node.as_ref().map(|n| n.function.name())
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        Ok(self.inner.data[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    /// Same data, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    /// Same data under a new shape with equal element count. Differentiable.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        Ok(Self::from_op(
            self.inner.data.clone(),
            shape,
            vec![self.clone()],
            ops::Reshape,
        ))
    }

    /// Converts element type. The result is a constant.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self
            .inner
            .data
            .iter()
            .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
            .collect();
        Tensor::build(self.inner.shape.clone(), data, false, None)
    }

    fn key(&self) -> *const Inner<T> {
        Arc::as_ptr(&self.inner)
    }

    /// Reverse-mode sweep from a one-element tensor.
    ///
    /// Gradients add into existing `grad` slots; call [`Tensor::zero_grad`]
    /// on leaves between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Post-order DFS without recursion so deep graphs cannot overflow.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<*const Inner<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for input in node.inputs.iter().filter(|i| i.requires_grad()) {
                    if !visited.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }

        let mut pending: HashMap<*const Inner<T>, Vec<T>> = HashMap::new();
        pending.insert(self.key(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(grad) = pending.remove(&t.key()) else {
                continue;
            };
            if let Some(node) = &t.inner.node {
                let ctx = BackwardCtx {
                    inputs: &node.inputs,
                    output: &t.inner.data,
                    output_shape: &t.inner.shape,
                    grad: &grad,
                };
                let input_grads = node.function.backward(&ctx);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (input, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    assert_eq!(
                        g.len(),
                        input.numel(),
                        "{}: gradient size for input of shape {:?}",
                        node.function.name(),
                        input.shape()
                    );
                    match pending.get_mut(&input.key()) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                        None => {
                            pending.insert(input.key(), g);
                        }
                    }
                }
            }
            let mut slot = t.inner.grad.lock().expect("grad lock");
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a = *a + *b),
                None => *slot = Some(grad),
            }
        }
        Ok(())
    }
}

pub(crate) fn check_rank<T: Element>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}
