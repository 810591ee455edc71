//! Volumes, multimodal scans and everything that prepares them for training:
//! I/O, normalization, resampling, cropping, augmentation and a synthetic
//! tumor generator.

mod augment;
mod io;
mod nifti;
mod preprocess;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::{voxels, Extents, LabelMap, RegionProbs};
use crate::tensor::Tensor;

pub use augment::{augment, random_crop_foreground, AugmentParams, MirrorAxis, CROP_TRIES};
pub use io::{
    list_cases, load_scan, read_case_meta, read_volume_file, save_scan, write_case_meta, write_volume_file, CaseMeta,
    RawVolume, VoxelData, CASE_META, VOLUME_MAGIC,
};
pub use nifti::read_nifti;
pub use preprocess::{normalize, resample, resample_labels, resample_probs, Interp};
pub use synth::{generate_synthetic_case, SYNTH_MIN_EXTENT};

/// The four input modalities in network channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1,
    T1Gd,
    T2,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1Gd, Modality::T2, Modality::Flair];

    /// File stem inside a case directory.
    pub fn file_stem(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1Gd => "t1gd",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T1Gd => "T1Gd",
            Modality::T2 => "T2",
            Modality::Flair => "FLAIR",
        }
    }
}

/// Where a case's labels came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Manual,
    Ensemble,
    None,
}

/// One single-channel intensity volume, `D x H x W`, `W` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    extents: Extents,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(extents: Extents, data: Vec<f32>) -> Result<Self> {
        if data.len() != voxels(extents) {
            return Err(Error::shape(
                "volume",
                format!("{} values for extents {extents:?}", data.len()),
            ));
        }
        Ok(Volume { extents, data })
    }

    pub fn zeros(extents: Extents) -> Self {
        Volume {
            extents,
            data: vec![0.0; voxels(extents)],
        }
    }

    pub fn extents(&self) -> Extents {
        self.extents
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Four co-registered modality volumes of one case, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalScan {
    pub case_id: String,
    /// Indexed like [`Modality::ALL`].
    pub modalities: [Volume; 4],
    pub labels: Option<LabelMap>,
    pub provenance: Provenance,
    /// Tumor grade tag used to stratify splits (e.g. `HGG`, `LGG`).
    pub grade: Option<String>,
}

impl MultiModalScan {
    pub fn new(
        case_id: impl Into<String>,
        modalities: [Volume; 4],
        labels: Option<LabelMap>,
        provenance: Provenance,
    ) -> Result<Self> {
        let ext = modalities[0].extents();
        for (m, v) in Modality::ALL.iter().zip(&modalities) {
            if v.extents() != ext {
                return Err(Error::shape(
                    "scan",
                    format!("{} has extents {:?}, T1 has {ext:?}", m.name(), v.extents()),
                ));
            }
        }
        if let Some(l) = &labels {
            if l.extents() != ext {
                return Err(Error::shape(
                    "scan",
                    format!("label map has extents {:?}, volumes have {ext:?}", l.extents()),
                ));
            }
        }
        Ok(MultiModalScan {
            case_id: case_id.into(),
            modalities,
            labels,
            provenance,
            grade: None,
        })
    }

    pub fn extents(&self) -> Extents {
        self.modalities[0].extents()
    }

    pub fn volume(&self, m: Modality) -> &Volume {
        &self.modalities[m as usize]
    }

    /// `[1, 4, D, H, W]` network input.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.extents();
        let mut data = Vec::with_capacity(4 * d * h * w);
        for v in &self.modalities {
            data.extend_from_slice(v.data());
        }
        Tensor::new(data, &[1, 4, d, h, w]).expect("extents validated")
    }

    /// Each modality normalized independently.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        for v in out.modalities.iter_mut() {
            *v = normalize(v);
        }
        out
    }
}

/// What a training sample is supervised with: a manual label map, or soft
/// region probabilities produced by the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Labels(LabelMap),
    Soft(RegionProbs),
}

impl Target {
    pub fn extents(&self) -> Extents {
        match self {
            Target::Labels(l) => l.extents(),
            Target::Soft(p) => p.extents(),
        }
    }

    /// Voxels counted as tumor when choosing crops: any nonzero label, or a
    /// whole-tumor probability of at least one half.
    pub fn foreground(&self) -> Vec<bool> {
        match self {
            Target::Labels(l) => l.data().iter().map(|&v| v != 0).collect(),
            Target::Soft(p) => p
                .channel(crate::regions::Region::WholeTumor)
                .iter()
                .map(|&v| v >= 0.5)
                .collect(),
        }
    }

    /// `[1, 3, D, H, W]` region targets (hard masks as 0/1).
    pub fn to_tensor(&self) -> Tensor<f32> {
        match self {
            Target::Labels(l) => crate::regions::labels_to_regions(l).to_probs().to_tensor(),
            Target::Soft(p) => p.to_tensor(),
        }
    }
}

/// Images plus their supervision, the unit that cropping and augmentation
/// operate on.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub images: [Volume; 4],
    pub target: Target,
}

impl Sample {
    pub fn new(images: [Volume; 4], target: Target) -> Result<Self> {
        let ext = target.extents();
        if images.iter().any(|v| v.extents() != ext) {
            return Err(Error::shape(
                "sample",
                format!("image and target extents differ (target {ext:?})"),
            ));
        }
        Ok(Sample { images, target })
    }

    /// A labeled scan as a sample; errors when the scan has no labels.
    pub fn from_scan(scan: &MultiModalScan) -> Result<Self> {
        let labels = scan
            .labels
            .clone()
            .ok_or_else(|| Error::InvalidArgument(format!("case {} has no labels", scan.case_id)))?;
        Sample::new(scan.modalities.clone(), Target::Labels(labels))
    }

    pub fn extents(&self) -> Extents {
        self.target.extents()
    }

    /// `[1, 4, D, H, W]` network input.
    pub fn input_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.extents();
        let mut data = Vec::with_capacity(4 * d * h * w);
        for v in &self.images {
            data.extend_from_slice(v.data());
        }
        Tensor::new(data, &[1, 4, d, h, w]).expect("extents validated")
    }
}
