//! Soft Dice and binary cross-entropy over overlapping region channels.
//!
//! Both take probabilities `p` of shape `[N, K, ...]` (channel axis 1) and a
//! same-shaped constant target `g`, which may be hard `{0, 1}` masks or soft
//! probabilities.

use crate::error::{Error, Result};
use crate::tensor::{add, BackwardCtx, Element, Function, Tensor};

/// Smoothing term added to the Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

fn check_pair<T: Element>(op: &'static str, p: &Tensor<T>, g: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if p.shape() != g.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs target {:?}", p.shape(), g.shape()),
        ));
    }
    if p.rank() < 2 {
        return Err(Error::shape(op, format!("need [N, K, ...], got {:?}", p.shape())));
    }
    let (n, k) = (p.shape()[0], p.shape()[1]);
    Ok((n, k, p.numel() / (n * k).max(1)))
}

fn f(v: impl num_traits::ToPrimitive) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Per-class intersection `Σ p g` and denominator `Σ p² + g²` over batch and
/// spatial positions.
fn dice_sums<T: Element>(p: &[T], g: &[T], n: usize, k: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let mut inter = vec![0.0; k];
    let mut denom = vec![0.0; k];
    for b in 0..n {
        for c in 0..k {
            let r = (b * k + c) * s..(b * k + c + 1) * s;
            for (&pv, &gv) in p[r.clone()].iter().zip(&g[r]) {
                let (pv, gv) = (f(pv), f(gv));
                inter[c] += pv * gv;
                denom[c] += pv * pv + gv * gv;
            }
        }
    }
    (inter, denom)
}

struct SoftDice {
    classes: usize,
    spatial: usize,
}

impl<T: Element> Function<T> for SoftDice {
    fn name(&self) -> &str {
        "soft_dice_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (p, g) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let (k, s) = (self.classes, self.spatial);
        let n = p.len() / (k * s);
        let (inter, denom) = dice_sums(p, g, n, k, s);
        let upstream = f(ctx.grad[0]);
        let mut dp = vec![T::zero(); p.len()];
        for (i, d) in dp.iter_mut().enumerate() {
            let c = (i / s) % k;
            let u = denom[c] + DICE_EPS;
            let num = 2.0 * inter[c] + DICE_EPS;
            let ds = 2.0 * f(g[i]) / u - num * 2.0 * f(p[i]) / (u * u);
            *d = T::from_f64_lossy(-upstream * ds / k as f64);
        }
        vec![Some(dp), None]
    }
}

/// `1 - (1/K) Σ_k (2 Σ p_k g_k + ε) / (Σ p_k² + g_k² + ε)`.
pub fn soft_dice_loss<T: Element>(p: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, s) = check_pair("soft_dice_loss", p, g)?;
    let (inter, denom) = dice_sums(p.data(), g.data(), n, k, s);
    let similarity: f64 = inter
        .iter()
        .zip(&denom)
        .map(|(i, u)| (2.0 * i + DICE_EPS) / (u + DICE_EPS))
        .sum::<f64>()
        / k as f64;
    Ok(Tensor::from_op(
        vec![T::from_f64_lossy(1.0 - similarity)],
        &[],
        vec![p.clone(), g.detach()],
        SoftDice { classes: k, spatial: s },
    ))
}

struct Bce;

impl<T: Element> Function<T> for Bce {
    fn name(&self) -> &str {
        "bce_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (p, g) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let scale = -f(ctx.grad[0]) / p.len() as f64;
        let dp = p
            .iter()
            .zip(g)
            .map(|(&pv, &gv)| {
                let (pv, gv) = (f(pv), f(gv));
                if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pv) {
                    return T::zero();
                }
                T::from_f64_lossy(scale * (gv / pv - (1.0 - gv) / (1.0 - pv)))
            })
            .collect();
        vec![Some(dp), None]
    }
}

/// Mean binary cross-entropy over every element (all classes and voxels).
pub fn bce_loss<T: Element>(p: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("bce_loss", p, g)?;
    let total: f64 = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(&pv, &gv)| {
            let pc = f(pv).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let gv = f(gv);
            gv * pc.ln() + (1.0 - gv) * (1.0 - pc).ln()
        })
        .sum();
    let loss = -total / p.numel().max(1) as f64;
    Ok(Tensor::from_op(
        vec![T::from_f64_lossy(loss)],
        &[],
        vec![p.clone(), g.detach()],
        Bce,
    ))
}

/// The three scalar loss tensors of one evaluation.
#[derive(Debug, Clone)]
pub struct LossValue<T: Element = f32> {
    pub dice: Tensor<T>,
    pub bce: Tensor<T>,
    pub total: Tensor<T>,
    /// Number of region channels.
    pub classes: usize,
    /// Voxels per channel (batch included).
    pub voxels: usize,
}

impl<T: Element> LossValue<T> {
    pub fn parts(&self) -> (f64, f64, f64) {
        let v = |t: &Tensor<T>| f(t.data()[0]);
        (v(&self.dice), v(&self.bce), v(&self.total))
    }
}

/// Soft Dice + BCE.
pub fn combined_loss<T: Element>(p: &Tensor<T>, g: &Tensor<T>) -> Result<LossValue<T>> {
    let dice = soft_dice_loss(p, g)?;
    let bce = bce_loss(p, g)?;
    let total = add(&dice, &bce)?;
    let classes = p.shape()[1];
    Ok(LossValue {
        dice,
        bce,
        total,
        classes,
        voxels: p.numel() / classes.max(1),
    })
}
