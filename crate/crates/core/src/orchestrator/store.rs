//! Pseudo-label store: `root/<case_id>/probs.dvv` (three f32 channels,
//! WT/TC/ET) plus a `case.meta` sidecar per case, and `manifest.toml` at the
//! root listing the cases and the checksums of the ensemble members.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PseudoLabeledCase;
use crate::data::{
    read_case_meta, read_volume_file, write_case_meta, write_volume_file, CaseMeta, Provenance, RawVolume, VoxelData,
};
use crate::error::{Error, Result};
use crate::regions::RegionProbs;

pub const MANIFEST: &str = "manifest.toml";
const PROBS_FILE: &str = "probs.dvv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub checkpoint: String,
    pub arch: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StoreManifest {
    pub hard_labels: bool,
    pub cases: Vec<String>,
    pub members: Vec<MemberRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn case_dir(root: &Path, case_id: &str) -> Result<PathBuf> {
    if case_id.is_empty() || case_id.contains(['/', '\\']) || case_id == "." || case_id == ".." {
        return Err(Error::InvalidArgument(format!("unusable case id {case_id:?}")));
    }
    Ok(root.join(case_id))
}

pub fn write_pseudo_case(root: &Path, case: &PseudoLabeledCase) -> Result<()> {
    let dir = case_dir(root, &case.case_id)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let raw = RawVolume::new(3, case.probs.extents(), VoxelData::F32(case.probs.data().to_vec()))?;
    write_volume_file(&dir.join(PROBS_FILE), &raw)?;
    write_case_meta(
        &dir,
        &CaseMeta {
            case_id: case.case_id.clone(),
            grade: case.grade.clone(),
            provenance: case.provenance,
        },
    )
}

pub fn read_pseudo_case(root: &Path, case_id: &str) -> Result<PseudoLabeledCase> {
    let dir = case_dir(root, case_id)?;
    let meta = read_case_meta(&dir)?;
    if meta.provenance != Provenance::Ensemble {
        return Err(Error::format(
            dir.join(crate::data::CASE_META),
            format!("provenance is {:?}, expected ensemble", meta.provenance),
        ));
    }
    let path = dir.join(PROBS_FILE);
    let raw = read_volume_file(&path)?;
    let probs = match raw.data {
        VoxelData::F32(d) if raw.channels == 3 => RegionProbs::new(raw.extents, d)?,
        _ => return Err(Error::format(path, "expected a 3-channel f32 volume")),
    };
    Ok(PseudoLabeledCase {
        case_id: meta.case_id,
        probs,
        provenance: meta.provenance,
        grade: meta.grade,
    })
}

/// Writes every case, then the manifest.
pub fn write_store(root: &Path, cases: &[PseudoLabeledCase], manifest: &StoreManifest) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for c in cases {
        write_pseudo_case(root, c)?;
    }
    let path = root.join(MANIFEST);
    let text = toml::to_string(manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<StoreManifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Every case listed in the manifest, in manifest order.
pub fn read_store(root: &Path) -> Result<Vec<PseudoLabeledCase>> {
    read_manifest(root)?
        .cases
        .iter()
        .map(|id| read_pseudo_case(root, id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(id: &str) -> PseudoLabeledCase {
        let data = (0..24).map(|i| (i as f32 * 0.173).fract()).collect();
        PseudoLabeledCase {
            case_id: id.into(),
            probs: RegionProbs::new([2, 2, 2], data).unwrap(),
            provenance: Provenance::Ensemble,
            grade: Some("HGG".into()),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cases = vec![case("a"), case("b")];
        let manifest = StoreManifest {
            hard_labels: false,
            cases: vec!["a".into(), "b".into()],
            members: vec![MemberRecord {
                checkpoint: "unet.dvw".into(),
                arch: "unet".into(),
                sha256: "00".into(),
            }],
        };
        write_store(dir.path(), &cases, &manifest).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
        let back = read_store(dir.path()).unwrap();
        assert_eq!(back, cases);
        for (a, b) in back.iter().zip(&cases) {
            let bits = |c: &PseudoLabeledCase| c.probs.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn empty_store_has_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_store(dir.path(), &[], &StoreManifest::default()).unwrap();
        assert!(read_store(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn sha256_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn rejects_path_like_ids() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_pseudo_case(dir.path(), &case("../x")).is_err());
    }
}
