//! Label maps and the three overlapping tumor regions derived from them.
//!
//! Raw labels: 0 background, 1 necrotic / non-enhancing core, 2 edema,
//! 4 enhancing tumor. Regions: whole tumor `{1, 2, 4}`, tumor core `{1, 4}`,
//! enhancing tumor `{4}`, stored channel-first in that order.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Spatial extents `(D, H, W)`.
pub type Extents = [usize; 3];

pub fn voxels(extents: Extents) -> usize {
    extents.iter().product()
}

pub const LABEL_VALUES: [u8; 4] = [0, 1, 2, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    WholeTumor,
    TumorCore,
    EnhancingTumor,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WholeTumor, Region::TumorCore, Region::EnhancingTumor];

    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Region::WholeTumor => "WT",
            Region::TumorCore => "TC",
            Region::EnhancingTumor => "ET",
        }
    }

    fn contains(self, label: u8) -> bool {
        match self {
            Region::WholeTumor => matches!(label, 1 | 2 | 4),
            Region::TumorCore => matches!(label, 1 | 4),
            Region::EnhancingTumor => label == 4,
        }
    }
}

/// Integer label volume with values in `{0, 1, 2, 4}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    extents: Extents,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(extents: Extents, data: Vec<u8>) -> Result<Self> {
        if data.len() != voxels(extents) {
            return Err(Error::shape(
                "label_map",
                format!(
                    "extents {extents:?} need {} voxels, got {}",
                    voxels(extents),
                    data.len()
                ),
            ));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !LABEL_VALUES.contains(v)) {
            return Err(Error::InvalidLabel { value, index });
        }
        Ok(LabelMap { extents, data })
    }

    pub fn zeros(extents: Extents) -> Self {
        LabelMap {
            extents,
            data: vec![0; voxels(extents)],
        }
    }

    pub fn extents(&self) -> Extents {
        self.extents
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn has_foreground(&self) -> bool {
        self.data.iter().any(|&v| v != 0)
    }

    /// Distinct label values present, ascending.
    pub fn values_present(&self) -> Vec<u8> {
        LABEL_VALUES.iter().copied().filter(|v| self.data.contains(v)).collect()
    }
}

/// Binary region masks, `3 x D x H x W` in WT, TC, ET order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMasks {
    extents: Extents,
    data: Vec<u8>,
}

impl RegionMasks {
    pub fn new(extents: Extents, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * voxels(extents) {
            return Err(Error::shape(
                "region_masks",
                format!(
                    "extents {extents:?} need {} values, got {}",
                    3 * voxels(extents),
                    data.len()
                ),
            ));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NonBinaryMask { value, index });
        }
        Ok(RegionMasks { extents, data })
    }

    pub fn extents(&self) -> Extents {
        self.extents
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn channel(&self, region: Region) -> &[u8] {
        let n = voxels(self.extents);
        &self.data[region.channel() * n..(region.channel() + 1) * n]
    }

    /// `ET ⊆ TC ⊆ WT` voxelwise.
    pub fn is_nested(&self) -> bool {
        let (wt, tc, et) = (
            self.channel(Region::WholeTumor),
            self.channel(Region::TumorCore),
            self.channel(Region::EnhancingTumor),
        );
        wt.iter().zip(tc).zip(et).all(|((&w, &t), &e)| e <= t && t <= w)
    }

    pub fn to_probs(&self) -> RegionProbs {
        RegionProbs {
            extents: self.extents,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Per-voxel probabilities of the three regions, `3 x D x H x W`.
/// Channels are independent; there is no sum-to-one constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionProbs {
    extents: Extents,
    data: Vec<f32>,
}

impl RegionProbs {
    pub fn new(extents: Extents, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * voxels(extents) {
            return Err(Error::shape(
                "region_probs",
                format!(
                    "extents {extents:?} need {} values, got {}",
                    3 * voxels(extents),
                    data.len()
                ),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("probability {v} outside [0, 1]")));
        }
        Ok(RegionProbs { extents, data })
    }

    pub fn extents(&self) -> Extents {
        self.extents
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, region: Region) -> &[f32] {
        let n = voxels(self.extents);
        &self.data[region.channel() * n..(region.channel() + 1) * n]
    }

    /// `[1, 3, D, H, W]` constant tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let [d, h, w] = self.extents;
        Tensor::new(
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
            &[1, 3, d, h, w],
        )
        .expect("consistent shape")
    }

    pub fn binarize(&self, threshold: f32) -> RegionMasks {
        RegionMasks {
            extents: self.extents,
            data: self.data.iter().map(|&p| (p > threshold) as u8).collect(),
        }
    }
}

/// WT = {1, 2, 4}, TC = {1, 4}, ET = {4}.
pub fn labels_to_regions(labels: &LabelMap) -> RegionMasks {
    let mut data = Vec::with_capacity(3 * labels.data.len());
    for region in Region::ALL {
        data.extend(labels.data.iter().map(|&l| region.contains(l) as u8));
    }
    RegionMasks {
        extents: labels.extents,
        data,
    }
}

/// Thresholds each channel at `threshold` (strictly greater is positive) and
/// assigns ET-positive → 4, else TC-positive → 1, else WT-positive → 2, else 0.
pub fn regions_to_labels(probs: &RegionProbs, threshold: f32) -> Result<LabelMap> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    let wt = probs.channel(Region::WholeTumor);
    let tc = probs.channel(Region::TumorCore);
    let et = probs.channel(Region::EnhancingTumor);
    let data = wt
        .iter()
        .zip(tc)
        .zip(et)
        .map(|((&w, &t), &e)| {
            if e > threshold {
                4
            } else if t > threshold {
                1
            } else if w > threshold {
                2
            } else {
                0
            }
        })
        .collect();
    Ok(LabelMap {
        extents: probs.extents,
        data,
    })
}
