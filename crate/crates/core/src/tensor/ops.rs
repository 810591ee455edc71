//! Elementwise ops, reductions and channel plumbing.

use super::{numel_of, BackwardCtx, Element, Function, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn map<T: Element>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Vec<T> {
    x.data().iter().map(|&v| f(v)).collect()
}

pub(crate) struct Reshape;

impl<T: Element> Function<T> for Reshape {
    fn name(&self) -> &str {
        "reshape"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.to_vec())]
    }
}

struct Add;

impl<T: Element> Function<T> for Add {
    fn name(&self) -> &str {
        "add"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![
            ctx.needs(0).then(|| ctx.grad.to_vec()),
            ctx.needs(1).then(|| ctx.grad.to_vec()),
        ]
    }
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(data, a.shape(), vec![a.clone(), b.clone()], Add))
}

struct Sub;

impl<T: Element> Function<T> for Sub {
    fn name(&self) -> &str {
        "sub"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![
            ctx.needs(0).then(|| ctx.grad.to_vec()),
            ctx.needs(1).then(|| ctx.grad.iter().map(|&g| -g).collect()),
        ]
    }
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Ok(Tensor::from_op(data, a.shape(), vec![a.clone(), b.clone()], Sub))
}

struct Mul;

impl<T: Element> Function<T> for Mul {
    fn name(&self) -> &str {
        "mul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        vec![
            ctx.needs(0)
                .then(|| ctx.grad.iter().zip(b).map(|(&g, &y)| g * y).collect()),
            ctx.needs(1)
                .then(|| ctx.grad.iter().zip(a).map(|(&g, &x)| g * x).collect()),
        ]
    }
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_op(data, a.shape(), vec![a.clone(), b.clone()], Mul))
}

struct Scale<T>(T);

impl<T: Element> Function<T> for Scale<T> {
    fn name(&self) -> &str {
        "scale"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.iter().map(|&g| g * self.0).collect())]
    }
}

pub fn scale<T: Element>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    Tensor::from_op(map(x, |v| v * factor), x.shape(), vec![x.clone()], Scale(factor))
}

struct Square;

impl<T: Element> Function<T> for Square {
    fn name(&self) -> &str {
        "square"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = ctx.inputs[0].data();
        let two = T::one() + T::one();
        vec![Some(ctx.grad.iter().zip(x).map(|(&g, &v)| two * v * g).collect())]
    }
}

pub fn square<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_op(map(x, |v| v * v), x.shape(), vec![x.clone()], Square)
}

struct Sum;

impl<T: Element> Function<T> for Sum {
    fn name(&self) -> &str {
        "sum"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![ctx.grad[0]; ctx.inputs[0].numel()])]
    }
}

/// Sum of all elements, accumulated in `f64`.
pub fn sum<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let total: f64 = x.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum();
    Tensor::from_op(vec![T::from_f64_lossy(total)], &[], vec![x.clone()], Sum)
}

pub fn mean<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let n = T::from_usize(x.numel().max(1)).expect("count");
    scale(&sum(x), T::one() / n)
}

struct LeakyRelu<T>(T);

impl<T: Element> Function<T> for LeakyRelu<T> {
    fn name(&self) -> &str {
        if self.0 == T::zero() {
            "relu"
        } else {
            "leaky_relu"
        }
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = ctx.inputs[0].data();
        vec![Some(
            ctx.grad
                .iter()
                .zip(x)
                .map(|(&g, &v)| if v > T::zero() { g } else { g * self.0 })
                .collect(),
        )]
    }
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    leaky_relu(x, T::zero())
}

/// `max(x, 0) + slope * min(x, 0)`.
pub fn leaky_relu<T: Element>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = map(x, |v| if v > T::zero() { v } else { v * slope });
    Tensor::from_op(data, x.shape(), vec![x.clone()], LeakyRelu(slope))
}

struct Sigmoid;

impl<T: Element> Function<T> for Sigmoid {
    fn name(&self) -> &str {
        "sigmoid"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(
            ctx.grad
                .iter()
                .zip(ctx.output)
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect(),
        )]
    }
}

pub(crate) fn sigmoid_scalar<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_op(map(x, sigmoid_scalar), x.shape(), vec![x.clone()], Sigmoid)
}

struct Max;

impl<T: Element> Function<T> for Max {
    fn name(&self) -> &str {
        "elementwise_max"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let first = |i: usize| a[i] >= b[i];
        let route = |want_first: bool| {
            ctx.grad
                .iter()
                .enumerate()
                .map(|(i, &g)| if first(i) == want_first { g } else { T::zero() })
                .collect()
        };
        vec![ctx.needs(0).then(|| route(true)), ctx.needs(1).then(|| route(false))]
    }
}

/// Elementwise maximum. On ties the gradient goes to `a`.
pub fn elementwise_max<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("elementwise_max", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| if x >= y { x } else { y })
        .collect();
    Ok(Tensor::from_op(data, a.shape(), vec![a.clone(), b.clone()], Max))
}

/// Splits a shape around `axis` into (outer, extent, inner) block sizes.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel_of(&shape[..axis]), shape[axis], numel_of(&shape[axis + 1..]))
}

struct Concat {
    axis: usize,
    extents: Vec<usize>,
}

impl<T: Element> Function<T> for Concat {
    fn name(&self) -> &str {
        "concat"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (outer, total, inner) = split_axis(ctx.output_shape, self.axis);
        let mut offset = 0;
        let mut grads = Vec::with_capacity(self.extents.len());
        for (i, &ext) in self.extents.iter().enumerate() {
            if ctx.needs(i) {
                let mut g = Vec::with_capacity(outer * ext * inner);
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    g.extend_from_slice(&ctx.grad[start..start + ext * inner]);
                }
                grads.push(Some(g));
            } else {
                grads.push(None);
            }
            offset += ext;
        }
        grads
    }
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat<T: Element>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(Error::shape(
            "concat",
            format!("axis {axis} out of range for shape {:?}", first.shape()),
        ));
    }
    for p in parts {
        let compatible = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!(
                    "shape {:?} incompatible with {:?} along axis {axis}",
                    p.shape(),
                    first.shape()
                ),
            ));
        }
    }
    let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &ext) in parts.iter().zip(&extents) {
            let start = o * ext * inner;
            data.extend_from_slice(&p.data()[start..start + ext * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_op(data, &shape, parts.to_vec(), Concat { axis, extents }))
}

struct Narrow {
    axis: usize,
    start: usize,
}

impl<T: Element> Function<T> for Narrow {
    fn name(&self) -> &str {
        "narrow"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let input = &ctx.inputs[0];
        let (outer, full, inner) = split_axis(input.shape(), self.axis);
        let len = ctx.output_shape[self.axis];
        let mut g = vec![T::zero(); input.numel()];
        for o in 0..outer {
            let dst = (o * full + self.start) * inner;
            let src = o * len * inner;
            g[dst..dst + len * inner].copy_from_slice(&ctx.grad[src..src + len * inner]);
        }
        vec![Some(g)]
    }
}

/// The slice `start..start + len` along `axis`.
pub fn narrow<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || start + len > x.shape()[axis] {
        return Err(Error::shape(
            "narrow",
            format!(
                "range {start}..{} on axis {axis} out of bounds for shape {:?}",
                start + len,
                x.shape()
            ),
        ));
    }
    let (outer, full, inner) = split_axis(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * full + start) * inner;
        data.extend_from_slice(&x.data()[s..s + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_op(data, &shape, vec![x.clone()], Narrow { axis, start }))
}
