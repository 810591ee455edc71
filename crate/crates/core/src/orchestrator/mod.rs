//! Training loops, optimizers, learning-rate schedules, ensemble fusion,
//! pseudo-labeling and student distillation.

mod config;
mod ensemble;
mod optim;
mod schedule;
mod split;
mod store;
mod train;

use std::collections::{HashMap, HashSet};

use crate::data::MultiModalScan;
use crate::error::{Error, Result};
use crate::metrics::{case_dice, CaseDice};
use crate::nn::Network;
use crate::regions::regions_to_labels;

pub use config::{
    full_scale_profiles, save_checkpoint, Arch, Duration, ModelSpec, TrainConfig, FULL_SCALE_CASCADE,
    FULL_SCALE_RES_UNET, FULL_SCALE_UNET,
};
pub use ensemble::{ensemble_predict, pseudo_label, NetworkPredictor, PseudoLabeledCase, VolumePredictor};
pub use optim::{OptimizerSpec, OptimizerState};
pub use schedule::LrSchedule;
pub use split::{stratified_split, Split};
pub use store::{
    read_manifest, read_pseudo_case, read_store, sha256_file, write_pseudo_case, write_store, MemberRecord,
    StoreManifest, MANIFEST,
};
pub use train::{
    assemble_batch, batch_indices, derive_rng, iterations_per_epoch, prepare_cases, total_iterations, train,
    write_loss_log, LossRecord, TrainCase, TrainReport,
};

/// Trains the student on manual labels plus ensemble pseudo-labels.
///
/// `pseudo` entries are paired with `unlabeled` scans by case id. Any case
/// of either set that belongs to `eval_ids` is a hard error: labels of the
/// evaluation split never reach training. The student must be the residual
/// UNet.
pub fn distill(
    labeled: &[MultiModalScan],
    unlabeled: &[MultiModalScan],
    pseudo: &[PseudoLabeledCase],
    eval_ids: &[String],
    cfg: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(usize, &Network<f32>) -> Result<()>,
) -> Result<(Network<f32>, TrainReport)> {
    if cfg.model.arch != Arch::ResUnet {
        return Err(Error::InvalidArgument(format!(
            "the student is a res_unet, config asks for {}",
            cfg.model.kind()
        )));
    }
    let held_out: HashSet<&str> = eval_ids.iter().map(String::as_str).collect();
    let leak = labeled
        .iter()
        .map(|s| s.case_id.as_str())
        .chain(pseudo.iter().map(|p| p.case_id.as_str()))
        .find(|id| held_out.contains(id));
    if let Some(id) = leak {
        return Err(Error::SplitLeak(id.to_string()));
    }

    let scans: HashMap<&str, &MultiModalScan> = unlabeled.iter().map(|s| (s.case_id.as_str(), s)).collect();
    let mut seen = HashSet::new();
    let mut cases = Vec::with_capacity(labeled.len() + pseudo.len());
    for s in labeled {
        seen.insert(s.case_id.as_str());
        cases.push(TrainCase::from_scan(s)?);
    }
    for p in pseudo {
        if !seen.insert(p.case_id.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "case {} is both manually and pseudo-labeled",
                p.case_id
            )));
        }
        let scan = scans
            .get(p.case_id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("no images for pseudo-labeled case {}", p.case_id)))?;
        cases.push(TrainCase::pseudo(scan, p)?);
    }
    let mut net = cfg.model.build()?;
    let report = train(&mut net, &cases, cfg, on_checkpoint)?;
    Ok((net, report))
}

/// Per-case Dice of `model` on labeled `cases`: probabilities are decoded
/// into a label map, which is scored region by region against ground truth.
pub fn evaluate(model: &dyn VolumePredictor, cases: &[MultiModalScan]) -> Result<Vec<CaseDice>> {
    cases
        .iter()
        .map(|scan| {
            let gt = scan
                .labels
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("evaluation case {} has no labels", scan.case_id)))?;
            let pred = regions_to_labels(&model.predict(scan)?, 0.5)?;
            case_dice(&scan.case_id, &pred, gt)
        })
        .collect()
}
