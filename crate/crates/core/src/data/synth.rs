//! Synthetic multimodal tumor cases for dataset-free runs.
//!
//! A case is an ellipsoidal "brain" on a zero background holding one to three
//! lesions. Each lesion is three nested ellipsoids sharing a center: edema
//! (label 2) outside, non-enhancing core (1) inside it, enhancing tumor (4)
//! innermost. Where lesions overlap the deeper label wins. Each modality maps
//! the four tissue classes to its own intensity, jittered per case, times a
//! smooth bias field plus Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{MultiModalScan, Provenance, Volume};
use crate::error::{Error, Result};
use crate::regions::{voxels, Extents, LabelMap};

pub const SYNTH_MIN_EXTENT: usize = 16;

/// Mean intensity of (healthy, edema, core, enhancing) per modality, in
/// channel order T1, T1Gd, T2, FLAIR.
const PROFILES: [[f64; 4]; 4] = [
    [1.00, 0.85, 0.65, 0.80],
    [1.00, 0.90, 0.70, 1.70],
    [1.00, 1.55, 1.35, 1.20],
    [1.00, 1.70, 1.25, 1.30],
];
const NOISE_STD: f64 = 0.05;

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Tissue class index into [`PROFILES`] rows; also the lesion depth.
fn class_of(label: u8) -> usize {
    match label {
        0 => 0,
        2 => 1,
        1 => 2,
        _ => 3,
    }
}

/// Deterministic synthetic case; every extent must be at least
/// [`SYNTH_MIN_EXTENT`]. The case id is `synth-<seed>`.
pub fn generate_synthetic_case(seed: u64, extents: Extents) -> Result<MultiModalScan> {
    if extents.iter().any(|&e| e < SYNTH_MIN_EXTENT) {
        return Err(Error::InvalidArgument(format!(
            "synthetic extents {extents:?} below the minimum {SYNTH_MIN_EXTENT}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = extents.map(|v| v as f64);
    let brain = Ellipsoid {
        center: std::array::from_fn(|a| (e[a] - 1.0) / 2.0 + rng.random_range(-1.0..=1.0)),
        radii: std::array::from_fn(|a| e[a] * rng.random_range(0.38..0.45)),
    };
    let min_ext = e.iter().cloned().fold(f64::INFINITY, f64::min);

    // (ellipsoid, label) from outermost to innermost per lesion
    let mut shells: Vec<(Ellipsoid, u8)> = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        let center: [f64; 3] = std::array::from_fn(|a| {
            let off = rng.random_range(-0.45..=0.45) * brain.radii[a];
            (brain.center[a] + off).round()
        });
        let stretch: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.85..=1.15));
        let r_et = rng.random_range(1.2..=(0.07 * min_ext).max(1.3));
        let r_core = r_et + rng.random_range(1.0..=(0.06 * min_ext).max(1.1));
        let r_edema = r_core + rng.random_range(1.5..=(0.10 * min_ext).max(1.6));
        for (r, label) in [(r_edema, 2u8), (r_core, 1), (r_et, 4)] {
            shells.push((
                Ellipsoid {
                    center,
                    radii: stretch.map(|s| (r * s).max(1.0)),
                },
                label,
            ));
        }
    }

    let jitter: [[f64; 4]; 4] =
        std::array::from_fn(|m| std::array::from_fn(|c| PROFILES[m][c] * rng.random_range(0.92..=1.08)));
    // smooth multiplicative bias, one per modality
    let bias: [([f64; 3], [f64; 3]); 4] = std::array::from_fn(|_| {
        (
            std::array::from_fn(|_| rng.random_range(0.5..1.5) * std::f64::consts::PI / e[0].max(e[1])),
            std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU)),
        )
    });
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");

    let n = voxels(extents);
    let mut labels = vec![0u8; n];
    let mut inside = vec![false; n];
    let [d, h, w] = extents;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !brain.contains([z, y, x]) {
                    continue;
                }
                inside[i] = true;
                for (shape, label) in &shells {
                    if class_of(*label) > class_of(labels[i]) && shape.contains([z, y, x]) {
                        labels[i] = *label;
                    }
                }
            }
        }
    }

    let modalities: [Volume; 4] = std::array::from_fn(|m| {
        let (freq, phase) = bias[m];
        let mut data = vec![0.0f32; n];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    if !inside[i] {
                        continue;
                    }
                    let field = 1.0
                        + 0.05 * (freq[0] * z as f64 + phase[0]).sin()
                        + 0.05 * (freq[1] * y as f64 + phase[1]).sin()
                        + 0.05 * (freq[2] * x as f64 + phase[2]).sin();
                    let v = jitter[m][class_of(labels[i])] * field + noise.sample(&mut rng);
                    data[i] = v.max(0.01) as f32;
                }
            }
        }
        Volume::new(extents, data).expect("extents")
    });

    MultiModalScan::new(
        format!("synth-{seed}"),
        modalities,
        Some(LabelMap::new(extents, labels)?),
        Provenance::Manual,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regions::labels_to_regions;

    #[test]
    fn same_seed_same_case() {
        let a = generate_synthetic_case(5, [16, 18, 16]).unwrap();
        let b = generate_synthetic_case(5, [16, 18, 16]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_case(6, [16, 18, 16]).unwrap());
    }

    #[test]
    fn too_small_rejected() {
        assert!(generate_synthetic_case(0, [15, 16, 16]).is_err());
    }

    #[test]
    fn nested_and_background_zero() {
        let s = generate_synthetic_case(11, [20, 20, 20]).unwrap();
        let labels = s.labels.as_ref().unwrap();
        assert!(labels_to_regions(labels).is_nested());
        // corners are outside the brain
        for v in &s.modalities {
            assert_eq!(v.data()[0], 0.0);
            assert!(v.data().iter().any(|&x| x > 0.0));
        }
        // every labeled voxel is brain (nonzero in all modalities)
        for (i, &l) in labels.data().iter().enumerate() {
            if l != 0 {
                assert!(s.modalities.iter().all(|v| v.data()[i] > 0.0));
            }
        }
    }

    #[test]
    fn all_labels_present_over_many_seeds() {
        for seed in 0..100 {
            let s = generate_synthetic_case(seed, [16, 16, 16]).unwrap();
            assert_eq!(s.labels.unwrap().values_present(), vec![0, 1, 2, 4], "seed {seed}");
        }
    }
}
