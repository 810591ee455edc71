use rayon::prelude::*;

use crate::data::{resample, resample_probs, Interp, MultiModalScan, Provenance};
use crate::error::{Error, Result};
use crate::nn::{forward_full_volume, Network};
use crate::regions::{Extents, RegionProbs};

use super::TrainConfig;

/// Anything that turns a raw scan into region probabilities at the scan's
/// own extents.
pub trait VolumePredictor: Sync {
    fn predict(&self, scan: &MultiModalScan) -> Result<RegionProbs>;
}

/// A trained network together with how it was trained to see volumes.
#[derive(Debug, Clone)]
pub struct NetworkPredictor {
    pub net: Network<f32>,
    pub patch: Extents,
    /// Volumes are resampled to this grid for inference and the
    /// probabilities resampled back.
    pub resample: Option<Extents>,
    pub overlap: f64,
}

impl NetworkPredictor {
    pub fn new(net: Network<f32>, cfg: &TrainConfig) -> Self {
        NetworkPredictor {
            net,
            patch: cfg.patch,
            resample: cfg.resample,
            overlap: cfg.overlap,
        }
    }
}

impl VolumePredictor for NetworkPredictor {
    fn predict(&self, scan: &MultiModalScan) -> Result<RegionProbs> {
        let native = scan.extents();
        let mut input = scan.normalized();
        if let Some(to) = self.resample {
            for v in input.modalities.iter_mut() {
                *v = resample(v, to, Interp::Trilinear)?;
            }
        }
        let probs = forward_full_volume(&self.net, &input.to_tensor(), self.patch, self.overlap)?;
        resample_probs(&probs, native)
    }
}

/// Uniform mean of the members' probabilities. Per voxel the member values
/// are summed in sorted order, so the result does not depend on member order.
pub fn ensemble_predict(members: &[&dyn VolumePredictor], scan: &MultiModalScan) -> Result<RegionProbs> {
    if members.is_empty() {
        return Err(Error::InvalidArgument("ensemble has no members".into()));
    }
    let outputs: Vec<RegionProbs> = members.par_iter().map(|m| m.predict(scan)).collect::<Result<_>>()?;
    let ext = scan.extents();
    if let Some(o) = outputs.iter().find(|o| o.extents() != ext) {
        return Err(Error::shape(
            "ensemble_predict",
            format!("member returned {:?} for a {ext:?} scan", o.extents()),
        ));
    }
    let k = outputs.len() as f64;
    let len = outputs[0].data().len();
    let mut vals = vec![0.0f32; outputs.len()];
    let data = (0..len)
        .map(|i| {
            for (v, o) in vals.iter_mut().zip(&outputs) {
                *v = o.data()[i];
            }
            vals.sort_by(f32::total_cmp);
            (vals.iter().map(|&v| v as f64).sum::<f64>() / k) as f32
        })
        .collect();
    RegionProbs::new(ext, data)
}

/// Ensemble annotation of one unlabeled case.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledCase {
    pub case_id: String,
    pub probs: RegionProbs,
    pub provenance: Provenance,
    pub grade: Option<String>,
}

impl PseudoLabeledCase {
    /// Probabilities thresholded at 0.5 into 0/1 targets.
    pub fn hardened(&self) -> Self {
        PseudoLabeledCase {
            probs: self.probs.binarize(0.5).to_probs(),
            ..self.clone()
        }
    }
}

/// Annotates every unlabeled case; cases that already carry labels are
/// skipped with a warning.
pub fn pseudo_label(
    members: &[&dyn VolumePredictor],
    cases: &[MultiModalScan],
    hard_labels: bool,
) -> Result<Vec<PseudoLabeledCase>> {
    let mut out = Vec::new();
    for scan in cases {
        if scan.labels.is_some() {
            log::warn!("case {} is already labeled; not pseudo-labeling it", scan.case_id);
            continue;
        }
        let case = PseudoLabeledCase {
            case_id: scan.case_id.clone(),
            probs: ensemble_predict(members, scan)?,
            provenance: Provenance::Ensemble,
            grade: scan.grade.clone(),
        };
        out.push(if hard_labels { case.hardened() } else { case });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_case, Volume};
    use crate::orchestrator::{Arch, ModelSpec};

    struct Constant(f32);

    impl VolumePredictor for Constant {
        fn predict(&self, scan: &MultiModalScan) -> Result<RegionProbs> {
            RegionProbs::new(scan.extents(), vec![self.0; 3 * crate::regions::voxels(scan.extents())])
        }
    }

    fn unlabeled(seed: u64) -> MultiModalScan {
        let mut s = generate_synthetic_case(seed, [16, 16, 16]).unwrap();
        s.labels = None;
        s.provenance = Provenance::None;
        s
    }

    #[test]
    fn mean_of_two_constants() {
        let scan = unlabeled(0);
        let (a, b) = (Constant(0.2), Constant(0.6));
        let p = ensemble_predict(&[&a, &b], &scan).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
        let q = ensemble_predict(&[&b, &a], &scan).unwrap();
        assert_eq!(p, q);
        assert!(ensemble_predict(&[], &scan).is_err());
    }

    #[test]
    fn identical_members_match_single_member() {
        let mut spec = ModelSpec::new(Arch::Unet, 2);
        spec.levels = 2;
        let m = NetworkPredictor {
            net: spec.build().unwrap(),
            patch: [8, 8, 8],
            resample: None,
            overlap: 0.5,
        };
        let scan = unlabeled(1);
        let one = ensemble_predict(&[&m], &scan).unwrap();
        assert_eq!(one, m.predict(&scan).unwrap());
        let three = ensemble_predict(&[&m, &m, &m], &scan).unwrap();
        assert_eq!(one, three);
        assert!(one.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn resampled_member_returns_native_extents() {
        let mut spec = ModelSpec::new(Arch::CascadedUnet, 2);
        spec.levels = 2;
        let m = NetworkPredictor {
            net: spec.build().unwrap(),
            patch: [8, 8, 8],
            resample: Some([8, 8, 8]),
            overlap: 0.5,
        };
        let scan = generate_synthetic_case(2, [16, 18, 20]).unwrap();
        assert_eq!(m.predict(&scan).unwrap().extents(), [16, 18, 20]);
    }

    #[test]
    fn pseudo_labels_skip_labeled_cases() {
        let c = Constant(0.7);
        assert!(pseudo_label(&[&c], &[], false).unwrap().is_empty());
        let labeled = generate_synthetic_case(3, [16, 16, 16]).unwrap();
        let out = pseudo_label(&[&c], &[labeled, unlabeled(4)], false).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].case_id, "synth-4");
        assert_eq!(out[0].provenance, Provenance::Ensemble);
        let hard = pseudo_label(&[&c], &[unlabeled(4)], true).unwrap();
        assert!(hard[0].probs.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn member_shape_errors_surface() {
        struct Wrong;
        impl VolumePredictor for Wrong {
            fn predict(&self, _: &MultiModalScan) -> Result<RegionProbs> {
                RegionProbs::new([1, 1, 1], vec![0.0; 3])
            }
        }
        let v = Volume::zeros([2, 2, 2]);
        let scan = MultiModalScan::new("x", [v.clone(), v.clone(), v.clone(), v], None, Provenance::None).unwrap();
        assert!(ensemble_predict(&[&Wrong], &scan).is_err());
    }
}
