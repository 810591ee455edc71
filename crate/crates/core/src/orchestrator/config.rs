use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LrSchedule, OptimizerSpec};
use crate::data::AugmentParams;
use crate::error::{Error, Result};
use crate::nn::{
    build_cascaded_unet, build_res_unet, build_unet, ArchKind, NetConfig, Network, NormKind, DEFAULT_GROUPS,
};
use crate::regions::Extents;
use crate::tensor::serialize::{load_weights, save_weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Unet,
    ResUnet,
    CascadedUnet,
}

fn default_levels() -> usize {
    4
}
fn default_stages() -> usize {
    2
}

/// Everything needed to rebuild a network before loading its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    pub base_channels: usize,
    /// Encoder depth; the residual UNet is fixed at 4.
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Cascade stages; ignored by the other architectures.
    #[serde(default = "default_stages")]
    pub stages: usize,
    /// Group count of the residual UNet's group normalization.
    #[serde(default)]
    pub groups: Option<usize>,
    /// Weight initialization seed.
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(arch: Arch, base_channels: usize) -> Self {
        ModelSpec {
            arch,
            base_channels,
            levels: default_levels(),
            stages: default_stages(),
            groups: None,
            seed: 0,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        let cfg = match self.arch {
            Arch::Unet => NetConfig::unet(self.base_channels, self.levels),
            Arch::ResUnet => {
                let mut c = NetConfig::res_unet(self.base_channels);
                c.levels = self.levels;
                c.norm = NormKind::Group {
                    groups: self.groups.unwrap_or(DEFAULT_GROUPS),
                };
                c
            }
            Arch::CascadedUnet => NetConfig::cascaded(self.base_channels, self.levels),
        };
        cfg.with_seed(self.seed)
    }

    pub fn kind(&self) -> ArchKind {
        match self.arch {
            Arch::Unet => ArchKind::Unet,
            Arch::ResUnet => ArchKind::ResUnet,
            Arch::CascadedUnet => ArchKind::CascadedUnet { stages: self.stages },
        }
    }

    /// Required multiple of every spatial extent.
    pub fn spatial_divisor(&self) -> usize {
        let extra = match self.arch {
            Arch::CascadedUnet => self.stages.saturating_sub(1),
            _ => 0,
        };
        1 << (self.levels.saturating_sub(1) + extra)
    }

    pub fn build(&self) -> Result<Network<f32>> {
        let cfg = self.net_config();
        match self.arch {
            Arch::Unet => build_unet(&cfg),
            Arch::ResUnet => build_res_unet(&cfg),
            Arch::CascadedUnet => build_cascaded_unet(&cfg, self.stages),
        }
    }

    /// Builds the network and loads `checkpoint` into it.
    pub fn load(&self, checkpoint: &Path) -> Result<Network<f32>> {
        let mut net = self.build()?;
        let tensors = load_weights(checkpoint)?;
        net.params_mut()
            .load_named(&tensors)
            .map_err(|detail| Error::CheckpointMismatch {
                checkpoint: checkpoint.display().to_string(),
                arch: net.kind().to_string(),
                detail,
            })?;
        Ok(net)
    }
}

pub fn save_checkpoint(net: &Network<f32>, path: &Path) -> Result<()> {
    save_weights(path, &net.params().to_named())
}

/// How long to train: a fixed number of weight updates or passes over the
/// training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Duration {
    Iterations(usize),
    Epochs(usize),
}

fn default_overlap() -> f64 {
    crate::nn::DEFAULT_OVERLAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    /// Crop extents `(D, H, W)`.
    pub patch: Extents,
    pub batch_size: usize,
    pub duration: Duration,
    pub optimizer: OptimizerSpec,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub augment: AugmentParams,
    /// Every case is resampled to these extents before training and
    /// inference (the cascade works on a fixed grid).
    #[serde(default)]
    pub resample: Option<Extents>,
    /// Save a checkpoint every this many iterations (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Sliding-window overlap used when this model predicts whole volumes.
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.net_config().validate()?;
        if self.model.arch == Arch::CascadedUnet && self.model.stages == 0 {
            return Err(Error::InvalidArgument("cascade needs at least one stage".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        match self.duration {
            Duration::Iterations(0) | Duration::Epochs(0) => {
                return Err(Error::InvalidArgument("training duration must be positive".into()))
            }
            _ => {}
        }
        let div = self.model.spatial_divisor();
        if self.patch.iter().any(|&e| e == 0 || e % div != 0) {
            return Err(Error::InvalidArgument(format!(
                "patch {:?} must be positive multiples of {div} for {}",
                self.patch,
                self.model.kind()
            )));
        }
        if let Some(r) = self.resample {
            if r.iter().zip(&self.patch).any(|(&r, &p)| r < p) {
                return Err(Error::InvalidArgument(format!(
                    "resample extents {r:?} smaller than patch {:?}",
                    self.patch
                )));
            }
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidArgument(format!(
                "overlap {} not in [0, 1)",
                self.overlap
            )));
        }
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.augment.validate()
    }
}

pub const FULL_SCALE_UNET: &str = include_str!("../../profiles/unet.toml");
pub const FULL_SCALE_RES_UNET: &str = include_str!("../../profiles/res_unet.toml");
pub const FULL_SCALE_CASCADE: &str = include_str!("../../profiles/cascaded_unet.toml");

/// Full-scale training recipes of the three teachers.
pub fn full_scale_profiles() -> Result<[TrainConfig; 3]> {
    let parse = |text: &str| toml::from_str::<TrainConfig>(text).map_err(|e| Error::Config(e.to_string()));
    Ok([
        parse(FULL_SCALE_UNET)?,
        parse(FULL_SCALE_RES_UNET)?,
        parse(FULL_SCALE_CASCADE)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_profiles_verbatim() {
        let [unet, res, casc] = full_scale_profiles().unwrap();
        for p in [&unet, &res, &casc] {
            p.validate().unwrap();
        }
        assert_eq!(unet.model.arch, Arch::Unet);
        assert_eq!(unet.patch, [128, 128, 128]);
        assert_eq!(unet.batch_size, 2);
        assert_eq!(unet.duration, Duration::Iterations(160_000));
        assert_eq!(unet.optimizer, OptimizerSpec::adam());
        assert_eq!(
            unet.schedule,
            LrSchedule::StepDrop {
                initial: 1e-4,
                drop_at: 120_000,
                factor: 0.1
            }
        );

        assert_eq!(res.model.arch, Arch::ResUnet);
        assert_eq!(res.patch, [128, 144, 144]);
        assert_eq!(res.optimizer, OptimizerSpec::adam());
        assert_eq!(res.schedule, unet.schedule);

        assert_eq!(casc.model.arch, Arch::CascadedUnet);
        assert_eq!(casc.resample, Some([128, 128, 128]));
        assert_eq!(casc.batch_size, 4);
        assert_eq!(casc.duration, Duration::Epochs(500));
        assert_eq!(casc.optimizer, OptimizerSpec::Sgd { momentum: 0.9 });
        assert_eq!(
            casc.schedule,
            LrSchedule::ExpEpoch {
                initial: 0.1,
                rate: 0.99
            }
        );
    }

    #[test]
    fn patch_must_fit_divisor() {
        let [mut unet, ..] = full_scale_profiles().unwrap();
        unet.patch = [128, 128, 100];
        assert!(unet.validate().is_err());
        let mut spec = ModelSpec::new(Arch::CascadedUnet, 8);
        spec.levels = 3;
        assert_eq!(spec.spatial_divisor(), 8);
        assert_eq!(spec.spatial_divisor(), spec.build().unwrap().spatial_divisor());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{FULL_SCALE_UNET}\nlearning_rate = 3\n");
        assert!(toml::from_str::<TrainConfig>(&text).is_err());
    }

    #[test]
    fn checkpoint_mismatch_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let small = ModelSpec::new(Arch::Unet, 2);
        let path = dir.path().join("w.dvw");
        save_checkpoint(&small.build().unwrap(), &path).unwrap();
        assert!(small.load(&path).is_ok());
        let err = ModelSpec::new(Arch::ResUnet, 8).load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("w.dvw") && msg.contains("res_unet"), "{msg}");
    }
}
