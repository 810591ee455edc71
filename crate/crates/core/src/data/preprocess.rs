//! Foreground z-score normalization and resampling.

use super::Volume;
use crate::error::Result;
use crate::regions::{voxels, Extents, LabelMap, RegionProbs};
use crate::tensor::trilinear;

/// Z-scores the nonzero voxels of `v`; exactly-zero voxels are background and
/// keep their bits. A constant foreground maps to 0 and an all-zero volume is
/// returned unchanged.
pub fn normalize(v: &Volume) -> Volume {
    let (mut n, mut sum) = (0usize, 0.0f64);
    for &x in v.data() {
        if x != 0.0 {
            n += 1;
            sum += x as f64;
        }
    }
    if n == 0 {
        return v.clone();
    }
    let mean = sum / n as f64;
    let var = v
        .data()
        .iter()
        .filter(|&&x| x != 0.0)
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let inv_std = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    let data = v
        .data()
        .iter()
        .map(|&x| {
            if x != 0.0 {
                ((x as f64 - mean) * inv_std) as f32
            } else {
                x
            }
        })
        .collect();
    Volume::new(v.extents(), data).expect("same extents")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Nearest source index per output index, half-pixel aligned like the
/// trilinear taps.
fn nearest_taps(n_in: usize, n_out: usize) -> Vec<usize> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| (((o as f64 + 0.5) * ratio).floor() as usize).min(n_in - 1))
        .collect()
}

fn nearest<T: Copy>(data: &[T], channels: usize, from: Extents, to: Extents) -> Vec<T> {
    let [zt, yt, xt] = [0, 1, 2].map(|a| nearest_taps(from[a], to[a]));
    let mut out = Vec::with_capacity(channels * voxels(to));
    for c in 0..channels {
        let base = c * voxels(from);
        for &z in &zt {
            for &y in &yt {
                let row = base + (z * from[1] + y) * from[2];
                out.extend(xt.iter().map(|&x| data[row + x]));
            }
        }
    }
    out
}

/// Resizes `v` to `to`. Unchanged extents return an exact copy.
pub fn resample(v: &Volume, to: Extents, mode: Interp) -> Result<Volume> {
    check_target(to)?;
    if v.extents() == to {
        return Ok(v.clone());
    }
    let data = match mode {
        Interp::Trilinear => trilinear(v.data(), 1, v.extents(), to),
        Interp::Nearest => nearest(v.data(), 1, v.extents(), to),
    };
    Volume::new(to, data)
}

/// Nearest-neighbour resize of a label map; never creates new label values.
pub fn resample_labels(l: &LabelMap, to: Extents) -> Result<LabelMap> {
    check_target(to)?;
    if l.extents() == to {
        return Ok(l.clone());
    }
    LabelMap::new(to, nearest(l.data(), 1, l.extents(), to))
}

/// Trilinear resize of region probabilities (stays within `[0, 1]`).
pub fn resample_probs(p: &RegionProbs, to: Extents) -> Result<RegionProbs> {
    check_target(to)?;
    if p.extents() == to {
        return Ok(p.clone());
    }
    let data = trilinear(p.data(), 3, p.extents(), to)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    RegionProbs::new(to, data)
}

fn check_target(to: Extents) -> Result<()> {
    if to.contains(&0) {
        return Err(crate::Error::InvalidArgument(format!(
            "resample target {to:?} has a zero extent"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_and_four_become_minus_and_plus_one() {
        let v = Volume::new([1, 1, 4], vec![0.0, 2.0, 0.0, 4.0]).unwrap();
        assert_eq!(normalize(&v).data(), &[0.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_foreground_maps_to_zero() {
        let v = Volume::new([1, 1, 3], vec![5.0, 5.0, 0.0]).unwrap();
        assert_eq!(normalize(&v).data(), &[0.0, 0.0, 0.0]);
        let z = Volume::zeros([2, 2, 2]);
        assert_eq!(normalize(&z), z);
    }

    #[test]
    fn negative_zero_background_keeps_its_bits() {
        let v = Volume::new([1, 1, 3], vec![-0.0, 1.0, 3.0]).unwrap();
        assert_eq!(normalize(&v).data()[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn identity_resample_is_exact() {
        let v = Volume::new([2, 2, 2], (0..8).map(|i| i as f32 * 0.37).collect()).unwrap();
        assert_eq!(resample(&v, [2, 2, 2], Interp::Trilinear).unwrap(), v);
        assert_eq!(resample(&v, [2, 2, 2], Interp::Nearest).unwrap(), v);
    }

    #[test]
    fn constant_stays_constant() {
        let v = Volume::new([3, 4, 5], vec![2.5; 60]).unwrap();
        for to in [[7, 2, 5], [1, 1, 1], [6, 8, 10]] {
            let r = resample(&v, to, Interp::Trilinear).unwrap();
            assert!(r.data().iter().all(|&x| (x - 2.5).abs() < 1e-6));
        }
    }

    #[test]
    fn nearest_doubles_by_repetition() {
        let v = Volume::new([1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(
            resample(&v, [1, 1, 4], Interp::Nearest).unwrap().data(),
            &[1.0, 1.0, 2.0, 2.0]
        );
    }

    proptest! {
        #[test]
        fn normalized_foreground_is_standard(values in proptest::collection::vec(-50.0f32..50.0, 8..200)) {
            let v = Volume::new([1, 1, values.len()], values.clone()).unwrap();
            let out = normalize(&v);
            let fg: Vec<f64> = out.data().iter().zip(&values).filter(|(_, &x)| x != 0.0).map(|(&y, _)| y as f64).collect();
            let mean = fg.iter().sum::<f64>() / fg.len() as f64;
            let var = fg.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / fg.len() as f64;
            prop_assume!(fg.len() > 1);
            prop_assert!(mean.abs() < 1e-4);
            if var > 0.5 {
                prop_assert!((var - 1.0).abs() < 1e-3);
            }
            for (o, i) in out.data().iter().zip(&values) {
                if *i == 0.0 {
                    prop_assert_eq!(o.to_bits(), i.to_bits());
                }
            }
        }

        #[test]
        fn nearest_labels_invent_nothing(
            data in proptest::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(2u8), Just(4u8)], 27),
            to in (1usize..7, 1usize..7, 1usize..7),
        ) {
            let l = LabelMap::new([3, 3, 3], data).unwrap();
            let r = resample_labels(&l, [to.0, to.1, to.2]).unwrap();
            let before = l.values_present();
            prop_assert!(r.values_present().iter().all(|v| before.contains(v)));
        }
    }
}
