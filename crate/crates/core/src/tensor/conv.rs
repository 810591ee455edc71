//! 3-D convolution lowered to GEMM through an im2col buffer.

use rayon::prelude::*;

use super::gemm::{gemm, MatRef};
use super::{check_rank, BackwardCtx, Element, Function, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn in_vox(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vox(&self) -> usize {
        self.output.iter().product()
    }

    /// Rows of the im2col matrix: one per (input channel, kernel offset).
    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    /// A 1x1x1 stride-1 conv reads the input directly as its column matrix.
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Source index along one axis, or `None` when it falls in the padding.
#[inline]
fn source(o: usize, kk: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    (o * stride + kk).checked_sub(pad).filter(|&i| i < extent)
}

/// Output positions `lo..hi` along an axis whose source for kernel offset
/// `kk` lies inside the input.
#[inline]
fn valid_span(kk: usize, stride: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk).div_ceil(stride);
    let hi = (extent + pad).saturating_sub(kk).div_ceil(stride).min(out);
    (lo.min(hi), hi)
}

/// Roughly 1 MiB of column buffer per slab keeps im2col and the GEMM that
/// consumes it in cache.
fn slab_depth<T>(g: &Geometry) -> usize {
    let plane = g.output[1] * g.output[2] * g.rows() * std::mem::size_of::<T>();
    ((1 << 20) / plane.max(1)).clamp(1, g.output[0])
}

/// Fills the column matrix for output depths `z0..z1`; `cols` is
/// `rows x ((z1 - z0) * oh * ow)`.
fn im2col<T: Element>(g: &Geometry, x: &[T], z0: usize, z1: usize, cols: &mut [T]) {
    let [d, h, w] = g.input;
    let [_, oh, ow] = g.output;
    let p = (z1 - z0) * oh * ow;
    let (k, s) = (g.k, g.stride);
    for ci in 0..g.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = valid_span(kw, s, g.pad, w, ow);
                    for z in z0..z1 {
                        let plane = &mut dst[(z - z0) * oh * ow..(z - z0 + 1) * oh * ow];
                        let Some(iz) = source(z, kd, s, g.pad, d) else {
                            plane.fill(T::zero());
                            continue;
                        };
                        for y in 0..oh {
                            let line = &mut plane[y * ow..(y + 1) * ow];
                            let Some(iy) = source(y, kh, s, g.pad, h) else {
                                line.fill(T::zero());
                                continue;
                            };
                            let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            line[..lo].fill(T::zero());
                            line[hi..].fill(T::zero());
                            if lo < hi {
                                let first = lo * s + kw - g.pad;
                                if s == 1 {
                                    line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                                } else {
                                    for (v, &sv) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                        *v = sv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds the slab's columns into `dx`.
fn col2im<T: Element>(g: &Geometry, cols: &[T], z0: usize, z1: usize, dx: &mut [T]) {
    let [d, h, w] = g.input;
    let [_, oh, ow] = g.output;
    let p = (z1 - z0) * oh * ow;
    let (k, s) = (g.k, g.stride);
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = valid_span(kw, s, g.pad, w, ow);
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * s + kw - g.pad;
                    for z in z0..z1 {
                        let Some(iz) = source(z, kd, s, g.pad, d) else {
                            continue;
                        };
                        for y in 0..oh {
                            let Some(iy) = source(y, kh, s, g.pad, h) else {
                                continue;
                            };
                            let off = ((z - z0) * oh + y) * ow;
                            let line = &src[off + lo..off + hi];
                            let dst = &mut dxc[(iz * h + iy) * w + first..(iz * h + iy + 1) * w];
                            for (dv, &v) in dst.iter_mut().step_by(s).zip(line) {
                                *dv = *dv + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// One sample's convolution without bias: `xn` is `[cin, D, H, W]`, `on`
/// receives `[cout, oD, oH, oW]`.
fn forward_sample<T: Element>(g: &Geometry, xn: &[T], w: &[T], on: &mut [T]) {
    let (rows, p) = (g.rows(), g.out_vox());
    let wmat = MatRef::new(w, g.cout, rows);
    if g.pointwise() {
        gemm(wmat, MatRef::new(xn, rows, p), T::zero(), on);
        return;
    }
    let plane = g.output[1] * g.output[2];
    let slab = slab_depth::<T>(g);
    let mut cols = vec![T::zero(); rows * slab * plane];
    let mut part = vec![T::zero(); g.cout * slab * plane];
    for z0 in (0..g.output[0]).step_by(slab) {
        let z1 = (z0 + slab).min(g.output[0]);
        let sp = (z1 - z0) * plane;
        let cols = &mut cols[..rows * sp];
        let part = &mut part[..g.cout * sp];
        im2col(g, xn, z0, z1, cols);
        gemm(wmat, MatRef::new(&*cols, rows, sp), T::zero(), part);
        for co in 0..g.cout {
            on[co * p + z0 * plane..co * p + z1 * plane].copy_from_slice(&part[co * sp..(co + 1) * sp]);
        }
    }
}

/// For stride 1 the input gradient is itself a convolution of the output
/// gradient with the spatially flipped, channel-transposed kernel.
fn transposed_geometry<T: Element>(g: &Geometry, w: &[T]) -> Option<(Geometry, Vec<T>)> {
    if g.stride != 1 || g.pad >= g.k {
        return None;
    }
    let k3 = g.k * g.k * g.k;
    let mut wt = vec![T::zero(); w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            let src = &w[(co * g.cin + ci) * k3..(co * g.cin + ci + 1) * k3];
            let dst = &mut wt[(ci * g.cout + co) * k3..(ci * g.cout + co + 1) * k3];
            for (d, &v) in dst.iter_mut().zip(src.iter().rev()) {
                *d = v;
            }
        }
    }
    let tg = Geometry {
        batch: g.batch,
        cin: g.cout,
        cout: g.cin,
        k: g.k,
        stride: 1,
        pad: g.k - 1 - g.pad,
        input: g.output,
        output: g.input,
    };
    Some((tg, wt))
}

const LANES: usize = 8;

/// Unrolled dot product; the lane accumulators let the compiler vectorize.
#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut total = acc.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        total = total + x * y;
    }
    total
}

/// `dw[co, r] += <g[co, lo..hi], cols[r, ..]>` for a gradient `g` with row
/// stride `p`. Both extents of `dw` are small, which leaves a packed GEMM
/// bound on copying its operands.
fn row_dots<T: Element>(g: &[T], p: usize, lo: usize, hi: usize, cols: &[T], dw: &mut [T]) {
    let sp = hi - lo;
    let rows = cols.len() / sp;
    for (co, dwc) in dw.chunks_exact_mut(rows).enumerate() {
        let gc = &g[co * p + lo..co * p + hi];
        for (acc, col) in dwc.iter_mut().zip(cols.chunks_exact(sp)) {
            *acc = *acc + dot(gc, col);
        }
    }
}

struct Conv3dBackward {
    geom: Geometry,
}

impl<T: Element> Function<T> for Conv3dBackward {
    fn name(&self) -> &str {
        "conv3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = self.geom;
        let x = ctx.inputs[0].data();
        let w = ctx.inputs[1].data();
        let (rows, p, nin) = (g.rows(), g.out_vox(), g.cin * g.in_vox());
        let gout = ctx.grad;
        let wmat = MatRef::new(w, g.cout, rows);

        let plane = g.output[1] * g.output[2];
        let slab = slab_depth::<T>(&g);
        // Gradient of the sample's output restricted to depths z0..z1.
        let gview = |n: usize, z0: usize, z1: usize| MatRef {
            data: &gout[n * g.cout * p + z0 * plane..],
            rows: g.cout,
            cols: (z1 - z0) * plane,
            rs: p,
            cs: 1,
        };

        let dx = ctx.needs(0).then(|| {
            let mut dx = vec![T::zero(); g.batch * nin];
            let transposed = transposed_geometry(&g, w);
            dx.par_chunks_mut(nin).enumerate().for_each(|(n, dxn)| {
                if let Some((tg, wt)) = &transposed {
                    forward_sample(tg, &gout[n * g.cout * p..(n + 1) * g.cout * p], wt, dxn);
                    return;
                }
                if g.pointwise() {
                    gemm(wmat.t(), gview(n, 0, g.output[0]), T::zero(), dxn);
                    return;
                }
                let mut cols = vec![T::zero(); rows * slab * plane];
                for z0 in (0..g.output[0]).step_by(slab) {
                    let z1 = (z0 + slab).min(g.output[0]);
                    let cols = &mut cols[..rows * (z1 - z0) * plane];
                    gemm(wmat.t(), gview(n, z0, z1), T::zero(), cols);
                    col2im(&g, cols, z0, z1, dxn);
                }
            });
            dx
        });

        let dw = ctx.needs(1).then(|| {
            // Per-sample partials summed in sample order so the result does not
            // depend on how rayon schedules the work.
            let partials: Vec<Vec<T>> = (0..g.batch)
                .into_par_iter()
                .map(|n| {
                    let xn = &x[n * nin..(n + 1) * nin];
                    let mut dwn = vec![T::zero(); g.cout * rows];
                    if g.pointwise() {
                        gemm(
                            gview(n, 0, g.output[0]),
                            MatRef::new(xn, rows, p).t(),
                            T::zero(),
                            &mut dwn,
                        );
                        return dwn;
                    }
                    let mut cols = vec![T::zero(); rows * slab * plane];
                    for z0 in (0..g.output[0]).step_by(slab) {
                        let z1 = (z0 + slab).min(g.output[0]);
                        let cols = &mut cols[..rows * (z1 - z0) * plane];
                        im2col(&g, xn, z0, z1, cols);
                        let gn = &gout[n * g.cout * p..(n + 1) * g.cout * p];
                        row_dots(gn, p, z0 * plane, z1 * plane, cols, &mut dwn);
                    }
                    dwn
                })
                .collect();
            let mut dw = vec![T::zero(); g.cout * rows];
            for part in partials {
                dw.iter_mut().zip(part).for_each(|(a, b)| *a = *a + b);
            }
            dw
        });

        let mut grads = vec![dx, dw];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs(2).then(|| {
                let mut db = vec![T::zero(); g.cout];
                for n in 0..g.batch {
                    for (co, acc) in db.iter_mut().enumerate() {
                        let start = (n * g.cout + co) * p;
                        let s: f64 = gout[start..start + p]
                            .iter()
                            .map(|v| v.to_f64().unwrap_or(f64::NAN))
                            .sum();
                        *acc = *acc + T::from_f64_lossy(s);
                    }
                }
                db
            }));
        }
        grads
    }
}

/// 3-D convolution of `[N, Cin, D, H, W]` with `[Cout, Cin, k, k, k]`.
///
/// Output extent per axis is `(ext + 2 * padding - k) / stride + 1`.
pub fn conv3d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    check_rank("conv3d", input, 5)?;
    check_rank("conv3d", weight, 5)?;
    let [batch, cin, d, h, w] = <[usize; 5]>::try_from(input.shape()).expect("rank 5");
    let [cout, wcin, k, k1, k2] = <[usize; 5]>::try_from(weight.shape()).expect("rank 5");
    if wcin != cin {
        return Err(Error::shape(
            "conv3d",
            format!(
                "input channels {cin} but weight expects {wcin} (weight shape {:?})",
                weight.shape()
            ),
        ));
    }
    if k != k1 || k != k2 || k % 2 == 0 {
        return Err(Error::shape(
            "conv3d",
            format!("kernel must be cubic with odd extent, got {:?}", &weight.shape()[2..]),
        ));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::InvalidArgument(format!(
            "conv3d stride {stride} not in {{1, 2}}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv3d",
                format!("bias shape {:?} does not match {cout} output channels", b.shape()),
            ));
        }
    }
    let mut output = [0; 3];
    for (axis, (&ext, out)) in [d, h, w].iter().zip(output.iter_mut()).enumerate() {
        let span = ext + 2 * padding;
        if span < k {
            return Err(Error::shape(
                "conv3d",
                format!("spatial axis {axis}: extent {ext} with padding {padding} is smaller than kernel {k}"),
            ));
        }
        *out = (span - k) / stride + 1;
    }
    let g = Geometry {
        batch,
        cin,
        cout,
        k,
        stride,
        pad: padding,
        input: [d, h, w],
        output,
    };
    let (p, nin) = (g.out_vox(), g.cin * g.in_vox());
    let x = input.data();
    let mut out = vec![T::zero(); batch * cout * p];
    let w = weight.data();
    out.par_chunks_mut(cout * p).enumerate().for_each(|(n, on)| {
        forward_sample(&g, &x[n * nin..(n + 1) * nin], w, on);
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                on[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    });

    let mut inputs = vec![input.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    Ok(Tensor::from_op(
        out,
        &[batch, cout, output[0], output[1], output[2]],
        inputs,
        Conv3dBackward { geom: g },
    ))
}
