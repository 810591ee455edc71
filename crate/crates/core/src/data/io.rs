//! The native volume container and the on-disk case layout
//! `root/<case_id>/{t1,t1gd,t2,flair,seg}.dvv` plus a `case.meta` sidecar.
//!
//! A `.dvv` file is the magic `DVV1`, a dtype byte (0 = u8, 1 = f32), the
//! channel count as u32, the extents `D, H, W` as u64, then the voxels; all
//! little-endian, channel-major with `W` fastest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Modality, MultiModalScan, Provenance, Volume};
use crate::error::{Error, Result};
use crate::regions::{voxels, Extents, LabelMap};

pub const VOLUME_MAGIC: &[u8; 4] = b"DVV1";
pub const CASE_META: &str = "case.meta";
const SEG_STEM: &str = "seg";
const HEADER_LEN: usize = 4 + 1 + 4 + 3 * 8;

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl VoxelData {
    fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }
}

/// Decoded contents of one `.dvv` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub channels: usize,
    pub extents: Extents,
    pub data: VoxelData,
}

impl RawVolume {
    pub fn new(channels: usize, extents: Extents, data: VoxelData) -> Result<Self> {
        if data.len() != channels * voxels(extents) {
            return Err(Error::shape(
                "volume file",
                format!("{} values for {channels} channels of {extents:?}", data.len()),
            ));
        }
        Ok(RawVolume {
            channels,
            extents,
            data,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(VOLUME_MAGIC);
        out.push(match self.data {
            VoxelData::U8(_) => 0,
            VoxelData::F32(_) => 1,
        });
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for e in self.extents {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match &self.data {
            VoxelData::U8(v) => out.extend_from_slice(v),
            VoxelData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != VOLUME_MAGIC {
            return Err(Error::format(path, "not a DVV1 volume"));
        }
        let dtype = bytes[4];
        let channels = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let mut extents = [0usize; 3];
        for (i, e) in extents.iter_mut().enumerate() {
            let at = 9 + 8 * i;
            let v = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
            *e = usize::try_from(v).map_err(|_| Error::format(path, "extent overflows usize"))?;
        }
        let count = extents
            .iter()
            .try_fold(channels, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::format(path, "voxel count overflows"))?;
        let body = &bytes[HEADER_LEN..];
        let width = match dtype {
            0 => 1,
            1 => 4,
            other => return Err(Error::format(path, format!("unknown dtype code {other}"))),
        };
        if count.checked_mul(width) != Some(body.len()) {
            return Err(Error::format(
                path,
                format!("expected {count} voxels of {width} bytes, found {} bytes", body.len()),
            ));
        }
        let data = match dtype {
            0 => VoxelData::U8(body.to_vec()),
            _ => VoxelData::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
        };
        RawVolume::new(channels, extents, data)
    }
}

pub fn write_volume_file(path: &Path, volume: &RawVolume) -> Result<()> {
    fs::write(path, volume.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_volume_file(path: &Path) -> Result<RawVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RawVolume::decode(&bytes, path)
}

/// Contents of the `case.meta` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<String>,
    pub provenance: Provenance,
}

pub fn write_case_meta(dir: &Path, meta: &CaseMeta) -> Result<()> {
    let text = toml::to_string(meta).map_err(|e| Error::format(dir.join(CASE_META), e.to_string()))?;
    let path = dir.join(CASE_META);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_case_meta(dir: &Path) -> Result<CaseMeta> {
    let path = dir.join(CASE_META);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn volume_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.dvv"))
}

/// Writes a case directory (created if needed).
pub fn save_scan(scan: &MultiModalScan, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (m, v) in Modality::ALL.iter().zip(&scan.modalities) {
        let raw = RawVolume::new(1, v.extents(), VoxelData::F32(v.data().to_vec()))?;
        write_volume_file(&volume_path(dir, m.file_stem()), &raw)?;
    }
    let seg = volume_path(dir, SEG_STEM);
    match &scan.labels {
        Some(l) => write_volume_file(&seg, &RawVolume::new(1, l.extents(), VoxelData::U8(l.data().to_vec()))?)?,
        None if seg.exists() => fs::remove_file(&seg).map_err(|e| Error::io(&seg, e))?,
        None => {}
    }
    write_case_meta(
        dir,
        &CaseMeta {
            case_id: scan.case_id.clone(),
            grade: scan.grade.clone(),
            provenance: scan.provenance,
        },
    )
}

fn read_single_f32(path: &Path) -> Result<Volume> {
    let raw = read_volume_file(path)?;
    match raw.data {
        VoxelData::F32(data) if raw.channels == 1 => Volume::new(raw.extents, data),
        _ => Err(Error::format(path, "expected a single-channel f32 volume")),
    }
}

/// Reads a case directory. Without a sidecar the directory name is the case
/// id and the provenance is `manual` when a segmentation is present.
pub fn load_scan(dir: &Path) -> Result<MultiModalScan> {
    let meta = if dir.join(CASE_META).exists() {
        Some(read_case_meta(dir)?)
    } else {
        None
    };
    let mut vols = Vec::with_capacity(4);
    for m in Modality::ALL {
        let path = volume_path(dir, m.file_stem());
        if !path.exists() {
            return Err(Error::MissingModality(m.name()));
        }
        vols.push(read_single_f32(&path)?);
    }
    let seg = volume_path(dir, SEG_STEM);
    let labels = if seg.exists() {
        let raw = read_volume_file(&seg)?;
        match raw.data {
            VoxelData::U8(data) if raw.channels == 1 => Some(LabelMap::new(raw.extents, data)?),
            _ => return Err(Error::format(&seg, "expected a single-channel u8 label map")),
        }
    } else {
        None
    };
    let modalities: [Volume; 4] = vols.try_into().expect("four modalities");
    let (case_id, provenance, grade) = match meta {
        Some(m) => (m.case_id, m.provenance, m.grade),
        None => {
            let id = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let prov = if labels.is_some() {
                Provenance::Manual
            } else {
                Provenance::None
            };
            (id, prov, None)
        }
    };
    let mut scan =
        MultiModalScan::new(case_id, modalities, labels, provenance).map_err(|e| Error::format(dir, e.to_string()))?;
    scan.grade = grade;
    Ok(scan)
}

/// Case directories under `root`, sorted by name.
pub fn list_cases(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() && (path.join(CASE_META).exists() || volume_path(&path, "t1").exists()) {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}
