//! Fixed-factor spatial resizing: trilinear 2x upsampling and 2x average pooling.

use super::{check_rank, BackwardCtx, Element, Function, Tensor};
use crate::error::{Error, Result};

/// Linear interpolation taps `(lo, hi, weight_hi)` for resizing an axis of
/// `in_len` samples to `out_len`, half-pixel (align-corners = false) convention.
pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let w = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, w)
        })
        .collect()
}

fn resize_axis<T: Element>(
    data: &[T],
    outer: usize,
    n_in: usize,
    inner: usize,
    taps: &[(usize, usize, f64)],
) -> Vec<T> {
    let n_out = taps.len();
    let mut out = vec![T::zero(); outer * n_out * inner];
    for o in 0..outer {
        let src = &data[o * n_in * inner..(o + 1) * n_in * inner];
        let dst = &mut out[o * n_out * inner..(o + 1) * n_out * inner];
        for (j, &(lo, hi, w)) in taps.iter().enumerate() {
            let (wl, wh) = (T::from_f64_lossy(1.0 - w), T::from_f64_lossy(w));
            let line = &mut dst[j * inner..(j + 1) * inner];
            let (a, b) = (&src[lo * inner..(lo + 1) * inner], &src[hi * inner..(hi + 1) * inner]);
            for ((d, &x), &y) in line.iter_mut().zip(a).zip(b) {
                *d = x * wl + y * wh;
            }
        }
    }
    out
}

fn resize_axis_transpose<T: Element>(
    grad: &[T],
    outer: usize,
    n_in: usize,
    inner: usize,
    taps: &[(usize, usize, f64)],
) -> Vec<T> {
    let n_out = taps.len();
    let mut out = vec![T::zero(); outer * n_in * inner];
    for o in 0..outer {
        let src = &grad[o * n_out * inner..(o + 1) * n_out * inner];
        let dst = &mut out[o * n_in * inner..(o + 1) * n_in * inner];
        for (j, &(lo, hi, w)) in taps.iter().enumerate() {
            let (wl, wh) = (T::from_f64_lossy(1.0 - w), T::from_f64_lossy(w));
            let line = &src[j * inner..(j + 1) * inner];
            for (i, &g) in line.iter().enumerate() {
                dst[lo * inner + i] = dst[lo * inner + i] + g * wl;
                dst[hi * inner + i] = dst[hi * inner + i] + g * wh;
            }
        }
    }
    out
}

/// Separable trilinear resize of a `[N, C, D, H, W]` buffer.
pub(crate) fn trilinear<T: Element>(data: &[T], nc: usize, from: [usize; 3], to: [usize; 3]) -> Vec<T> {
    let [d, h, w] = from;
    let [td, th, tw] = to;
    let x = resize_axis(data, nc * d * h, w, 1, &linear_taps(w, tw));
    let x = resize_axis(&x, nc * d, h, tw, &linear_taps(h, th));
    resize_axis(&x, nc, d, th * tw, &linear_taps(d, td))
}

fn trilinear_transpose<T: Element>(grad: &[T], nc: usize, from: [usize; 3], to: [usize; 3]) -> Vec<T> {
    let [d, h, w] = from;
    let [td, th, tw] = to;
    let g = resize_axis_transpose(grad, nc, d, th * tw, &linear_taps(d, td));
    let g = resize_axis_transpose(&g, nc * d, h, tw, &linear_taps(h, th));
    resize_axis_transpose(&g, nc * d * h, w, 1, &linear_taps(w, tw))
}

struct Upsample {
    nc: usize,
    from: [usize; 3],
}

impl<T: Element> Function<T> for Upsample {
    fn name(&self) -> &str {
        "upsample_trilinear2x"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let to = self.from.map(|e| 2 * e);
        vec![Some(trilinear_transpose(ctx.grad, self.nc, self.from, to))]
    }
}

fn spatial<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<(usize, [usize; 3])> {
    check_rank(op, x, 5)?;
    let s = x.shape();
    Ok((s[0] * s[1], [s[2], s[3], s[4]]))
}

/// Doubles every spatial extent with trilinear interpolation
/// (align-corners = false).
pub fn upsample_trilinear2x<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (nc, from) = spatial("upsample_trilinear2x", x)?;
    let to = from.map(|e| 2 * e);
    let out = trilinear(x.data(), nc, from, to);
    let s = x.shape();
    Ok(Tensor::from_op(
        out,
        &[s[0], s[1], to[0], to[1], to[2]],
        vec![x.clone()],
        Upsample { nc, from },
    ))
}

struct AvgPool {
    nc: usize,
    from: [usize; 3],
}

impl<T: Element> Function<T> for AvgPool {
    fn name(&self) -> &str {
        "avg_pool2x"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let [d, h, w] = self.from;
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let eighth = T::from_f64_lossy(0.125);
        let mut g = vec![T::zero(); self.nc * d * h * w];
        for c in 0..self.nc {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let src = ((c * od + z / 2) * oh + y / 2) * ow + x / 2;
                        g[((c * d + z) * h + y) * w + x] = ctx.grad[src] * eighth;
                    }
                }
            }
        }
        vec![Some(g)]
    }
}

/// Mean over non-overlapping 2x2x2 blocks. Extents must be even.
pub fn avg_pool2x<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (nc, from) = spatial("avg_pool2x", x)?;
    if from.iter().any(|e| e % 2 != 0) {
        return Err(Error::shape(
            "avg_pool2x",
            format!("spatial extents {from:?} must all be even"),
        ));
    }
    let [d, h, w] = from;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let eighth = T::from_f64_lossy(0.125);
    let src = x.data();
    let mut out = vec![T::zero(); nc * od * oh * ow];
    for c in 0..nc {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let o = ((c * od + z / 2) * oh + y / 2) * ow + xx / 2;
                    out[o] = out[o] + src[((c * d + z) * h + y) * w + xx] * eighth;
                }
            }
        }
    }
    let s = x.shape();
    Ok(Tensor::from_op(
        out,
        &[s[0], s[1], od, oh, ow],
        vec![x.clone()],
        AvgPool { nc, from },
    ))
}
