//! Foreground-guaranteeing random crops and training-time augmentation.
//!
//! Augmentation order: isotropic scale and rotation about the Z axis (one
//! inverse-mapped resampling), then mirroring across X and/or Y, then
//! per-modality intensity shift and contrast on foreground voxels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, Target, Volume};
use crate::error::{Error, Result};
use crate::regions::{voxels, Extents, LabelMap, RegionProbs};

/// Rejection-sampling attempts before the crop falls back to centering on a
/// random foreground voxel.
pub const CROP_TRIES: usize = 100;

/// Inclusive 3-D prefix sums of a boolean mask for O(1) box counts.
struct BoxCounter {
    ext: Extents,
    table: Vec<u32>,
}

impl BoxCounter {
    fn new(mask: &[bool], ext: Extents) -> Self {
        let [d, h, w] = ext;
        let idx = |z: usize, y: usize, x: usize| (z * (h + 1) + y) * (w + 1) + x;
        let mut table = vec![0u32; (d + 1) * (h + 1) * (w + 1)];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = u32::from(mask[(z * h + y) * w + x]);
                    table[idx(z + 1, y + 1, x + 1)] =
                        v + table[idx(z, y + 1, x + 1)] + table[idx(z + 1, y, x + 1)] + table[idx(z + 1, y + 1, x)]
                            - table[idx(z, y, x + 1)]
                            - table[idx(z, y + 1, x)]
                            - table[idx(z + 1, y, x)]
                            + table[idx(z, y, x)];
                }
            }
        }
        BoxCounter { ext, table }
    }

    fn count(&self, o: [usize; 3], p: Extents) -> u32 {
        let [_, h, w] = self.ext;
        let t = |z: usize, y: usize, x: usize| i64::from(self.table[(z * (h + 1) + y) * (w + 1) + x]);
        let [z0, y0, x0] = o;
        let [z1, y1, x1] = [z0 + p[0], y0 + p[1], x0 + p[2]];
        let v = t(z1, y1, x1) - t(z0, y1, x1) - t(z1, y0, x1) - t(z1, y1, x0)
            + t(z0, y0, x1)
            + t(z0, y1, x0)
            + t(z1, y0, x0)
            - t(z0, y0, x0);
        v as u32
    }
}

fn copy_box<T: Copy>(data: &[T], channels: usize, ext: Extents, o: [usize; 3], p: Extents) -> Vec<T> {
    let mut out = Vec::with_capacity(channels * voxels(p));
    for c in 0..channels {
        for z in 0..p[0] {
            for y in 0..p[1] {
                let row = ((c * ext[0] + o[0] + z) * ext[1] + o[1] + y) * ext[2] + o[2];
                out.extend_from_slice(&data[row..row + p[2]]);
            }
        }
    }
    out
}

fn crop_at(sample: &Sample, o: [usize; 3], p: Extents) -> Sample {
    let ext = sample.extents();
    let images = sample
        .images
        .each_ref()
        .map(|v| Volume::new(p, copy_box(v.data(), 1, ext, o, p)).expect("box extents"));
    let target = match &sample.target {
        Target::Labels(l) => Target::Labels(LabelMap::new(p, copy_box(l.data(), 1, ext, o, p)).expect("valid labels")),
        Target::Soft(s) => Target::Soft(RegionProbs::new(p, copy_box(s.data(), 3, ext, o, p)).expect("valid probs")),
    };
    Sample { images, target }
}

/// Crops `patch` from `sample` so that the crop holds at least one foreground
/// voxel. Offsets are drawn uniformly and rejected while the crop is empty;
/// after [`CROP_TRIES`] rejections the crop is centered (clamped to the
/// volume) on a uniformly chosen foreground voxel.
///
/// A label map without foreground is an error. A soft target without any
/// voxel of whole-tumor probability ≥ 0.5 gets a uniform random crop.
pub fn random_crop_foreground<R: Rng + ?Sized>(sample: &Sample, patch: Extents, rng: &mut R) -> Result<Sample> {
    let ext = sample.extents();
    if (0..3).any(|a| patch[a] == 0 || patch[a] > ext[a]) {
        return Err(Error::InvalidArgument(format!(
            "patch {patch:?} does not fit in volume {ext:?}"
        )));
    }
    let mask = sample.target.foreground();
    let counter = BoxCounter::new(&mask, ext);
    let total = counter.count([0; 3], ext);
    let uniform = |rng: &mut R| -> [usize; 3] { std::array::from_fn(|a| rng.random_range(0..=ext[a] - patch[a])) };
    if total == 0 {
        return match sample.target {
            Target::Labels(_) => Err(Error::NoForeground),
            Target::Soft(_) => Ok(crop_at(sample, uniform(rng), patch)),
        };
    }
    for _ in 0..CROP_TRIES {
        let o = uniform(rng);
        if counter.count(o, patch) > 0 {
            return Ok(crop_at(sample, o, patch));
        }
    }
    let k = rng.random_range(0..total as usize);
    let flat = mask
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .nth(k)
        .map(|(i, _)| i)
        .expect("k < foreground count");
    let c = [flat / (ext[1] * ext[2]), (flat / ext[2]) % ext[1], flat % ext[2]];
    let o = std::array::from_fn(|a| c[a].saturating_sub(patch[a] / 2).min(ext[a] - patch[a]));
    Ok(crop_at(sample, o, patch))
}

/// In-plane mirror axes. The Z axis is deliberately not representable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MirrorAxis {
    /// Flips `W`.
    X,
    /// Flips `H`.
    Y,
}

/// Augmentation magnitudes. Rotation is always about the Z axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// Isotropic scale factor range.
    pub scale: (f64, f64),
    /// Rotation drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub mirror_axes: Vec<MirrorAxis>,
    /// Chance of flipping each listed axis.
    pub mirror_probability: f64,
    /// Shift drawn from `[-s, s]` times the modality's foreground std.
    pub intensity_shift: f64,
    /// Multiplicative contrast range.
    pub contrast: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            scale: (0.9, 1.1),
            rotation_deg: 15.0,
            mirror_axes: vec![MirrorAxis::X, MirrorAxis::Y],
            mirror_probability: 0.5,
            intensity_shift: 0.1,
            contrast: (0.9, 1.1),
        }
    }
}

impl AugmentParams {
    /// Leaves every sample unchanged.
    pub fn identity() -> Self {
        AugmentParams {
            scale: (1.0, 1.0),
            rotation_deg: 0.0,
            mirror_axes: Vec::new(),
            mirror_probability: 0.0,
            intensity_shift: 0.0,
            contrast: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "augment {name} range ({lo}, {hi}) must be finite, positive and ordered"
                )))
            }
        };
        range("scale", self.scale)?;
        range("contrast", self.contrast)?;
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "augment {name} {v} must be finite and non-negative"
                )))
            }
        };
        finite_nonneg("rotation_deg", self.rotation_deg)?;
        finite_nonneg("intensity_shift", self.intensity_shift)?;
        if !(0.0..=1.0).contains(&self.mirror_probability) {
            return Err(Error::InvalidArgument(format!(
                "augment mirror_probability {} not in [0, 1]",
                self.mirror_probability
            )));
        }
        Ok(())
    }
}

/// Everything random about one augmentation, drawn up front in a fixed order.
struct Draw {
    scale: f64,
    angle: f64,
    flip_x: bool,
    flip_y: bool,
    /// `(shift in stds, contrast)` per modality.
    intensity: [(f64, f64); 4],
}

fn draw<R: Rng + ?Sized>(p: &AugmentParams, rng: &mut R) -> Draw {
    let scale = rng.random_range(p.scale.0..=p.scale.1);
    let angle = rng.random_range(-p.rotation_deg..=p.rotation_deg).to_radians();
    let mut flip = |axis| p.mirror_axes.contains(&axis) && rng.random_bool(p.mirror_probability);
    let flip_x = flip(MirrorAxis::X);
    let flip_y = flip(MirrorAxis::Y);
    let intensity = std::array::from_fn(|_| {
        let shift = rng.random_range(-p.intensity_shift..=p.intensity_shift);
        let contrast = rng.random_range(p.contrast.0..=p.contrast.1);
        (shift, contrast)
    });
    Draw {
        scale,
        angle,
        flip_x,
        flip_y,
        intensity,
    }
}

/// Source coordinate of every output voxel under the inverse transform.
fn source_coords(ext: Extents, scale: f64, angle: f64) -> Vec<[f64; 3]> {
    let c = ext.map(|e| (e as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = Vec::with_capacity(voxels(ext));
    for z in 0..ext[0] {
        for y in 0..ext[1] {
            for x in 0..ext[2] {
                let (dz, dy, dx) = (z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]);
                out.push([
                    dz / scale + c[0],
                    (cos * dy + sin * dx) / scale + c[1],
                    (-sin * dy + cos * dx) / scale + c[2],
                ]);
            }
        }
    }
    out
}

/// Trilinear sample with zeros outside the volume.
fn sample_linear(data: &[f32], ext: Extents, s: [f64; 3]) -> f32 {
    let base = s.map(f64::floor);
    let frac = [0, 1, 2].map(|a| s[a] - base[a]);
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let mut idx = [0usize; 3];
        let mut weight = 1.0;
        let mut inside = true;
        for a in 0..3 {
            let bit = (corner >> (2 - a)) & 1;
            let i = base[a] as i64 + bit as i64;
            weight *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            if i < 0 || i >= ext[a] as i64 {
                inside = false;
            } else {
                idx[a] = i as usize;
            }
        }
        if inside && weight != 0.0 {
            acc += weight * data[(idx[0] * ext[1] + idx[1]) * ext[2] + idx[2]] as f64;
        }
    }
    acc as f32
}

/// Nearest source voxel, or `None` outside the volume.
fn nearest_index(ext: Extents, s: [f64; 3]) -> Option<usize> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let i = s[a].round();
        if i < 0.0 || i >= ext[a] as f64 {
            return None;
        }
        idx[a] = i as usize;
    }
    Some((idx[0] * ext[1] + idx[1]) * ext[2] + idx[2])
}

fn flip_axis<T: Copy>(data: &mut [T], channels: usize, ext: Extents, axis: MirrorAxis) {
    let [d, h, w] = ext;
    for c in 0..channels {
        for z in 0..d {
            let plane = &mut data[(c * d + z) * h * w..(c * d + z + 1) * h * w];
            match axis {
                MirrorAxis::X => plane.chunks_exact_mut(w).for_each(|row| row.reverse()),
                MirrorAxis::Y => {
                    for y in 0..h / 2 {
                        let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
                        top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
                    }
                }
            }
        }
    }
}

/// Applies one random draw of `params` to `sample`. Labels are resampled with
/// nearest neighbour, images and soft targets trilinearly (zero outside).
/// Voxels whose pre-transform value is exactly zero stay background and are
/// excluded from the intensity jitter.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, params: &AugmentParams, rng: &mut R) -> Result<Sample> {
    params.validate()?;
    let d = draw(params, rng);
    let ext = sample.extents();
    let n = voxels(ext);

    let mut images: Vec<Vec<f32>> = sample.images.iter().map(|v| v.data().to_vec()).collect();
    let mut fg: Vec<Vec<bool>> = images.iter().map(|v| v.iter().map(|&x| x != 0.0).collect()).collect();
    let mut target = sample.target.clone();

    if d.scale != 1.0 || d.angle != 0.0 {
        let coords = source_coords(ext, d.scale, d.angle);
        let near: Vec<Option<usize>> = coords.iter().map(|&s| nearest_index(ext, s)).collect();
        for (img, mask) in images.iter_mut().zip(fg.iter_mut()) {
            let src = std::mem::take(img);
            *img = coords.iter().map(|&s| sample_linear(&src, ext, s)).collect();
            let src_mask = std::mem::take(mask);
            *mask = near.iter().map(|i| i.is_some_and(|i| src_mask[i])).collect();
        }
        target = match &sample.target {
            Target::Labels(l) => {
                let data = near.iter().map(|i| i.map_or(0, |i| l.data()[i])).collect();
                Target::Labels(LabelMap::new(ext, data)?)
            }
            Target::Soft(p) => {
                let mut data = Vec::with_capacity(3 * n);
                for ch in p.data().chunks_exact(n) {
                    data.extend(coords.iter().map(|&s| sample_linear(ch, ext, s).clamp(0.0, 1.0)));
                }
                Target::Soft(RegionProbs::new(ext, data)?)
            }
        };
    }

    for (flag, axis) in [(d.flip_x, MirrorAxis::X), (d.flip_y, MirrorAxis::Y)] {
        if !flag {
            continue;
        }
        for (img, mask) in images.iter_mut().zip(fg.iter_mut()) {
            flip_axis(img, 1, ext, axis);
            flip_axis(mask, 1, ext, axis);
        }
        target = match target {
            Target::Labels(l) => {
                let mut data = l.data().to_vec();
                flip_axis(&mut data, 1, ext, axis);
                Target::Labels(LabelMap::new(ext, data)?)
            }
            Target::Soft(p) => {
                let mut data = p.into_data();
                flip_axis(&mut data, 3, ext, axis);
                Target::Soft(RegionProbs::new(ext, data)?)
            }
        };
    }

    for ((img, mask), &(shift, contrast)) in images.iter_mut().zip(&fg).zip(&d.intensity) {
        let vals = img.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v as f64);
        let (count, sum, sq) = vals.fold((0usize, 0.0, 0.0), |(c, s, q), v| (c + 1, s + v, q + v * v));
        let std = if count > 0 {
            let mean = sum / count as f64;
            (sq / count as f64 - mean * mean).max(0.0).sqrt()
        } else {
            0.0
        };
        let offset = shift * std;
        for (v, &m) in img.iter_mut().zip(mask) {
            if m {
                *v = (*v as f64 * contrast + offset) as f32;
            } else if *v != 0.0 {
                // warped across the foreground edge; background stays zero
                *v = 0.0;
            }
        }
    }

    let images: [Volume; 4] = images
        .into_iter()
        .map(|v| Volume::new(ext, v))
        .collect::<Result<Vec<_>>>()?
        .try_into()
        .expect("four modalities");
    Sample::new(images, target)
}
