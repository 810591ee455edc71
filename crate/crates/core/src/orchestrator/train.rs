use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Duration, OptimizerState, PseudoLabeledCase, TrainConfig};
use crate::data::{
    augment, normalize, random_crop_foreground, resample, resample_labels, resample_probs, Interp, MultiModalScan,
    Sample, Target,
};
use crate::error::{Error, Result};
use crate::loss::combined_loss;
use crate::nn::Network;
use crate::regions::voxels;
use crate::tensor::{sigmoid, Tensor};

/// A case ready for training: images plus manual or ensemble supervision.
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub case_id: String,
    pub sample: Sample,
}

impl TrainCase {
    pub fn from_scan(scan: &MultiModalScan) -> Result<Self> {
        Ok(TrainCase {
            case_id: scan.case_id.clone(),
            sample: Sample::from_scan(scan)?,
        })
    }

    /// Images of `scan` supervised by the ensemble's soft labels.
    pub fn pseudo(scan: &MultiModalScan, labels: &PseudoLabeledCase) -> Result<Self> {
        if scan.case_id != labels.case_id {
            return Err(Error::InvalidArgument(format!(
                "pseudo-labels of {} paired with scan {}",
                labels.case_id, scan.case_id
            )));
        }
        Ok(TrainCase {
            case_id: scan.case_id.clone(),
            sample: Sample::new(scan.modalities.clone(), Target::Soft(labels.probs.clone()))?,
        })
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub dice_part: f64,
    pub bce_part: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<LossRecord>,
    pub iterations: usize,
}

/// Independent RNG for a `(domain, a, b)` coordinate under `seed`.
pub fn derive_rng(seed: u64, domain: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Normalizes every modality and applies the configured resampling.
pub fn prepare_cases(cases: &[TrainCase], cfg: &TrainConfig) -> Result<Vec<Sample>> {
    cases
        .par_iter()
        .map(|c| {
            let mut images = c.sample.images.clone();
            for v in images.iter_mut() {
                *v = normalize(v);
            }
            let mut target = c.sample.target.clone();
            if let Some(to) = cfg.resample {
                for v in images.iter_mut() {
                    *v = resample(v, to, Interp::Trilinear)?;
                }
                target = match target {
                    Target::Labels(l) => Target::Labels(resample_labels(&l, to)?),
                    Target::Soft(p) => Target::Soft(resample_probs(&p, to)?),
                };
            }
            Sample::new(images, target)
        })
        .collect()
}

pub fn iterations_per_epoch(cases: usize, batch: usize) -> usize {
    cases.div_ceil(batch)
}

pub fn total_iterations(cfg: &TrainConfig, cases: usize) -> usize {
    match cfg.duration {
        Duration::Iterations(n) => n,
        Duration::Epochs(e) => e * iterations_per_epoch(cases, cfg.batch_size),
    }
}

/// Case indices of the batch at `iteration` and the epoch it belongs to.
/// Each epoch visits every case once in a seed-derived order; the last batch
/// of an epoch may be short.
pub fn batch_indices(cfg: &TrainConfig, cases: usize, iteration: usize) -> (usize, Vec<usize>) {
    let per_epoch = iterations_per_epoch(cases, cfg.batch_size);
    let (epoch, slot) = (iteration / per_epoch, iteration % per_epoch);
    let mut order: Vec<usize> = (0..cases).collect();
    order.shuffle(&mut derive_rng(cfg.seed, "epoch-order", epoch as u64, 0));
    let lo = slot * cfg.batch_size;
    (epoch, order[lo..(lo + cfg.batch_size).min(cases)].to_vec())
}

/// Crops and augments the cases of one batch and stacks them into
/// `([B, 4, ...], [B, 3, ...])` input and target tensors. Each case draws
/// from its own stream keyed by `(seed, case, epoch)`, so the result does not
/// depend on scheduling.
pub fn assemble_batch(
    samples: &[Sample],
    cfg: &TrainConfig,
    epoch: usize,
    indices: &[usize],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let items: Vec<Sample> = indices
        .par_iter()
        .map(|&ci| {
            let mut rng = derive_rng(cfg.seed, "case", ci as u64, epoch as u64);
            let crop = random_crop_foreground(&samples[ci], cfg.patch, &mut rng)?;
            augment(&crop, &cfg.augment, &mut rng)
        })
        .collect::<Result<_>>()?;
    let vox = voxels(cfg.patch);
    let mut x = Vec::with_capacity(items.len() * 4 * vox);
    let mut g = Vec::with_capacity(items.len() * 3 * vox);
    for s in &items {
        for v in &s.images {
            x.extend_from_slice(v.data());
        }
        g.extend_from_slice(s.target.to_tensor().data());
    }
    let [d, h, w] = cfg.patch;
    let b = items.len();
    Ok((Tensor::new(x, &[b, 4, d, h, w])?, Tensor::new(g, &[b, 3, d, h, w])?))
}

/// Trains `net` in place. `on_checkpoint(iteration, net)` runs every
/// `cfg.checkpoint_every` iterations.
pub fn train(
    net: &mut Network<f32>,
    cases: &[TrainCase],
    cfg: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(usize, &Network<f32>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if cfg.patch.iter().any(|&e| e % net.spatial_divisor() != 0) {
        return Err(Error::InvalidArgument(format!(
            "patch {:?} incompatible with {} (multiples of {})",
            cfg.patch,
            net.kind(),
            net.spatial_divisor()
        )));
    }
    let samples = prepare_cases(cases, cfg)?;
    let total = total_iterations(cfg, samples.len());
    let mut opt = OptimizerState::new(cfg.optimizer, net.params());
    let mut history = Vec::with_capacity(total);
    net.params().zero_grads();

    for it in 0..total {
        let (epoch, idx) = batch_indices(cfg, samples.len(), it);
        let lr = cfg.schedule.lr_for(it, epoch);
        let (x, g) = assemble_batch(&samples, cfg, epoch, &idx)?;
        let probs = sigmoid(&net.forward(&x)?);
        let loss = combined_loss(&probs, &g)?;
        let (dice, bce, sum) = loss.parts();
        if !(dice.is_finite() && bce.is_finite() && sum.is_finite()) {
            return Err(Error::NonFinite {
                iteration: it,
                lr,
                dice,
                bce,
                total: sum,
            });
        }
        loss.total.backward()?;
        let grads: Vec<Vec<f32>> = net
            .params()
            .iter()
            .map(|p| p.value.grad().unwrap_or_else(|| vec![0.0; p.value.numel()]))
            .collect();
        opt.step(net.params_mut(), &grads, lr)?;
        history.push(LossRecord {
            iteration: it,
            lr,
            dice_part: dice,
            bce_part: bce,
            total: sum,
        });
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(it + 1, net)?;
        }
    }
    Ok(TrainReport {
        history,
        iterations: total,
    })
}

/// Writes the loss history as `iteration,lr,dice_part,bce_part,total`.
pub fn write_loss_log(path: &std::path::Path, history: &[LossRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    if history.is_empty() {
        w.write_record(["iteration", "lr", "dice_part", "bce_part", "total"])?;
    }
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_case, AugmentParams};
    use crate::orchestrator::{Arch, LrSchedule, ModelSpec, OptimizerSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelSpec {
                levels: 2,
                ..ModelSpec::new(Arch::Unet, 2)
            },
            patch: [8, 8, 8],
            batch_size: 2,
            duration: Duration::Iterations(4),
            optimizer: OptimizerSpec::adam(),
            schedule: LrSchedule::StepDrop {
                initial: 1e-2,
                drop_at: 2,
                factor: 0.5,
            },
            augment: AugmentParams::default(),
            resample: None,
            checkpoint_every: 2,
            overlap: 0.5,
            seed: 3,
        }
    }

    fn cases(n: u64) -> Vec<TrainCase> {
        (0..n)
            .map(|s| TrainCase::from_scan(&generate_synthetic_case(s, [16, 16, 16]).unwrap()).unwrap())
            .collect()
    }

    #[test]
    fn epochs_visit_every_case_once() {
        let cfg = tiny_cfg();
        let mut seen = Vec::new();
        for it in 0..3 {
            let (epoch, idx) = batch_indices(&cfg, 5, it);
            assert_eq!(epoch, 0);
            seen.extend(idx);
        }
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(batch_indices(&cfg, 5, 3).0, 1);
        assert_eq!(batch_indices(&cfg, 5, 2).1.len(), 1);
    }

    #[test]
    fn batches_are_reproducible() {
        let cfg = tiny_cfg();
        let samples = prepare_cases(&cases(3), &cfg).unwrap();
        let a = assemble_batch(&samples, &cfg, 1, &[2, 0]).unwrap();
        let b = assemble_batch(&samples, &cfg, 1, &[2, 0]).unwrap();
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
        assert_eq!(a.0.shape(), &[2, 4, 8, 8, 8]);
        // a case's crop does not depend on its batch position or partners
        let c = assemble_batch(&samples, &cfg, 1, &[0]).unwrap();
        let per = 4 * 512;
        assert_eq!(&a.0.data()[per..], c.0.data());
    }

    #[test]
    fn history_checkpoints_and_determinism() {
        let cfg = tiny_cfg();
        let data = cases(3);
        let run = || {
            let mut net = cfg.model.build().unwrap();
            let mut marks = Vec::new();
            let report = train(&mut net, &data, &cfg, &mut |it, _| {
                marks.push(it);
                Ok(())
            })
            .unwrap();
            (report, marks, net.params().to_named())
        };
        let (r1, marks, w1) = run();
        let (r2, _, w2) = run();
        assert_eq!(marks, vec![2, 4]);
        assert_eq!(r1.history.len(), 4);
        assert_eq!(r1.history[1].lr, 1e-2);
        assert_eq!(r1.history[2].lr, 5e-3);
        for h in &r1.history {
            assert!((h.total - (h.dice_part + h.bce_part)).abs() < 1e-6);
        }
        assert_eq!(r1.history, r2.history);
        assert_eq!(w1, w2);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let mut cfg = tiny_cfg();
        cfg.duration = Duration::Iterations(1);
        let mut net = cfg.model.build().unwrap();
        let n = net.params().value_at(0).numel();
        net.params_mut().set(0, vec![f32::NAN; n]).unwrap();
        let err = train(&mut net, &cases(1), &cfg, &mut |_, _| Ok(())).unwrap_err();
        match err {
            Error::NonFinite { iteration, lr, .. } => {
                assert_eq!(iteration, 0);
                assert_eq!(lr, 1e-2);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn resampled_training_uses_fixed_grid() {
        let mut cfg = tiny_cfg();
        cfg.resample = Some([8, 8, 8]);
        let samples = prepare_cases(&cases(1), &cfg).unwrap();
        assert_eq!(samples[0].extents(), [8, 8, 8]);
    }

    #[test]
    fn loss_log_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_log(
            &p,
            &[LossRecord {
                iteration: 0,
                lr: 0.1,
                dice_part: 0.5,
                bce_part: 0.25,
                total: 0.75,
            }],
        )
        .unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "iteration,lr,dice_part,bce_part,total\n0,0.1,0.5,0.25,0.75\n"
        );
    }
}
