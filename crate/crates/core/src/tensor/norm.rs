//! Group and instance normalization plus the per-channel affine that follows
//! them.

use super::{check_rank, BackwardCtx, Element, Function, Tensor};
use crate::error::{Error, Result};

/// Variance stabilizer shared by both normalizations.
pub const NORM_EPS: f64 = 1e-5;

struct GroupNormBackward {
    name: &'static str,
    /// Elements per (sample, group) block.
    block: usize,
    rstd: Vec<f64>,
}

impl<T: Element> Function<T> for GroupNormBackward {
    fn name(&self) -> &str {
        self.name
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let y = ctx.output;
        let mut dx = vec![T::zero(); y.len()];
        let m = self.block as f64;
        for (b, &rstd) in self.rstd.iter().enumerate() {
            let range = b * self.block..(b + 1) * self.block;
            let (ys, gs) = (&y[range.clone()], &ctx.grad[range.clone()]);
            let mut sum_g = 0.0;
            let mut sum_gy = 0.0;
            for (&yv, &gv) in ys.iter().zip(gs) {
                let (yv, gv) = (yv.to_f64().unwrap(), gv.to_f64().unwrap());
                sum_g += gv;
                sum_gy += gv * yv;
            }
            let (mean_g, mean_gy) = (sum_g / m, sum_gy / m);
            for ((d, &yv), &gv) in dx[range].iter_mut().zip(ys).zip(gs) {
                let (yv, gv) = (yv.to_f64().unwrap(), gv.to_f64().unwrap());
                *d = T::from_f64_lossy(rstd * (gv - mean_g - yv * mean_gy));
            }
        }
        vec![Some(dx)]
    }
}

fn normalize_blocks<T: Element>(name: &'static str, x: &Tensor<T>, block: usize, eps: f64) -> Tensor<T> {
    let blocks = x.numel() / block;
    let mut out = Vec::with_capacity(x.numel());
    let mut rstd = Vec::with_capacity(blocks);
    for chunk in x.data().chunks(block) {
        let m = block as f64;
        let mean = chunk.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / m;
        let var = chunk
            .iter()
            .map(|v| {
                let d = v.to_f64().unwrap() - mean;
                d * d
            })
            .sum::<f64>()
            / m;
        let r = 1.0 / (var + eps).sqrt();
        out.extend(
            chunk
                .iter()
                .map(|v| T::from_f64_lossy((v.to_f64().unwrap() - mean) * r)),
        );
        rstd.push(r);
    }
    Tensor::from_op(out, x.shape(), vec![x.clone()], GroupNormBackward { name, block, rstd })
}

/// Normalizes each sample over groups of `C / groups` channels and all
/// spatial positions. No affine; see [`channel_affine`].
pub fn group_norm<T: Element>(x: &Tensor<T>, groups: usize, eps: f64) -> Result<Tensor<T>> {
    check_rank("group_norm", x, 5)?;
    let c = x.shape()[1];
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(
            "group_norm",
            format!("{c} channels are not divisible into {groups} groups"),
        ));
    }
    let spatial: usize = x.shape()[2..].iter().product();
    Ok(normalize_blocks("group_norm", x, (c / groups) * spatial, eps))
}

/// Normalizes each (sample, channel) over its spatial positions.
pub fn instance_norm<T: Element>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    check_rank("instance_norm", x, 5)?;
    let spatial: usize = x.shape()[2..].iter().product();
    Ok(normalize_blocks("instance_norm", x, spatial, eps))
}

struct AffineBackward {
    channels: usize,
    spatial: usize,
}

impl<T: Element> Function<T> for AffineBackward {
    fn name(&self) -> &str {
        "channel_affine"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (x, gamma) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let (c, s) = (self.channels, self.spatial);
        let dx = ctx.needs(0).then(|| {
            let mut dx = Vec::with_capacity(ctx.grad.len());
            for (i, gs) in ctx.grad.chunks_exact(s.max(1)).enumerate() {
                let gv = gamma[i % c];
                dx.extend(gs.iter().map(|&g| g * gv));
            }
            dx
        });
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        if ctx.needs(1) || ctx.needs(2) {
            for (i, (gs, xs)) in ctx
                .grad
                .chunks_exact(s.max(1))
                .zip(x.chunks_exact(s.max(1)))
                .enumerate()
            {
                let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                for (&g, &xv) in gs.iter().zip(xs) {
                    let g = g.to_f64().unwrap();
                    sg += g;
                    sgx += g * xv.to_f64().unwrap();
                }
                dgamma[i % c] += sgx;
                dbeta[i % c] += sg;
            }
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect();
        vec![
            dx,
            ctx.needs(1).then(|| cast(dgamma)),
            ctx.needs(2).then(|| cast(dbeta)),
        ]
    }
}

/// `x * gamma[c] + beta[c]` broadcast over batch and spatial axes.
pub fn channel_affine<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::shape("channel_affine", format!("input shape {:?}", x.shape())));
    }
    let c = x.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "channel_affine",
            format!(
                "scale {:?} / shift {:?} do not match {c} channels",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let s: usize = x.shape()[2..].iter().product();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(x.numel());
    for (i, xs) in x.data().chunks_exact(s.max(1)).enumerate() {
        let (g, b) = (gd[i % c], bd[i % c]);
        out.extend(xs.iter().map(|&v| v * g + b));
    }
    Ok(Tensor::from_op(
        out,
        x.shape(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        AffineBackward {
            channels: c,
            spatial: s,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_values_map_to_minus_one_plus_one() {
        let x = Tensor::<f64>::new(vec![1.0, 3.0], &[1, 1, 1, 1, 2]).unwrap();
        let y = instance_norm(&x, NORM_EPS).unwrap();
        // var = 1, so output = (+-1) / sqrt(1 + eps)
        let expect = 1.0 / (1.0 + NORM_EPS).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_channel_becomes_zero() {
        let x = Tensor::<f32>::full(&[1, 2, 2, 2, 2], 7.5);
        let y = instance_norm(&x, NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn groups_equal_channels_matches_instance_norm() {
        let data: Vec<f64> = (0..2 * 4 * 27).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let x = Tensor::<f64>::new(data, &[2, 4, 3, 3, 3]).unwrap();
        let a = instance_norm(&x, NORM_EPS).unwrap();
        let b = group_norm(&x, 4, NORM_EPS).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn single_group_zero_mean_over_sample() {
        let data: Vec<f64> = (0..4 * 8).map(|i| (i as f64).sqrt()).collect();
        let x = Tensor::<f64>::new(data, &[1, 4, 2, 2, 2]).unwrap();
        let y = group_norm(&x, 1, NORM_EPS).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn indivisible_groups_error() {
        let x = Tensor::<f32>::zeros(&[1, 6, 2, 2, 2]);
        assert!(group_norm(&x, 4, NORM_EPS).is_err());
        assert!(group_norm(&x, 0, NORM_EPS).is_err());
    }
}
