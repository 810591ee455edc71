//! Minimal reader for uncompressed single-file NIfTI-1 (`.nii`) volumes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::regions::Extents;

const HEADER_SIZE: i32 = 348;

struct Reader<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn raw<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[at..at + N].try_into().expect("in header");
        if !self.little {
            b.reverse();
        }
        b
    }

    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.raw(at))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.raw(at))
    }
}

/// Reads a 3-D NIfTI-1 volume as `(extents, values)` with extents ordered
/// `[z, y, x]`, so the file's x-fastest layout maps onto `D, H, W` unchanged.
/// The scaling slope/intercept is applied when the slope is nonzero.
pub fn read_nifti(path: &Path) -> Result<(Extents, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err(Error::format(
            path,
            "gzip-compressed NIfTI is not supported; decompress it first",
        ));
    }
    if bytes.len() < HEADER_SIZE as usize {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    let le = i32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"));
    let be = i32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    let little = match (le, be) {
        (HEADER_SIZE, _) => true,
        (_, HEADER_SIZE) => false,
        _ => return Err(Error::format(path, "sizeof_hdr is not 348; not NIfTI-1")),
    };
    let r = Reader { bytes: &bytes, little };
    if &bytes[344..347] != b"n+1" {
        return Err(Error::format(path, "only single-file NIfTI-1 (magic n+1) is supported"));
    }
    let rank = r.i16(40);
    let dims: Vec<i16> = (1..=7).map(|i| r.i16(40 + 2 * i)).collect();
    if !(3..=7).contains(&rank) || dims[3..rank as usize].iter().any(|&d| d > 1) {
        return Err(Error::format(
            path,
            format!("expected a 3-D volume, dim = {dims:?} (rank {rank})"),
        ));
    }
    if dims[..3].iter().any(|&d| d < 1) {
        return Err(Error::format(path, format!("non-positive extent in {:?}", &dims[..3])));
    }
    let [nx, ny, nz] = [dims[0], dims[1], dims[2]].map(|d| d as usize);
    let datatype = r.i16(70);
    let offset = r.f32(108);
    // also rejects NaN
    if offset.is_nan() || offset < HEADER_SIZE as f32 || offset.fract() != 0.0 {
        return Err(Error::format(path, format!("invalid vox_offset {offset}")));
    }
    let (slope, inter) = (r.f32(112), r.f32(116));
    let n = nx * ny * nz;
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(Error::format(path, format!("unsupported datatype code {other}"))),
    };
    let start = offset as usize;
    let body = bytes.get(start..start + n * width).ok_or_else(|| {
        Error::format(
            path,
            format!("expected {n} voxels of {width} bytes after offset {start}"),
        )
    })?;
    let body = Reader { bytes: body, little };
    let values: Vec<f32> = (0..n)
        .map(|i| {
            let at = i * width;
            match datatype {
                2 => body.bytes[at] as f32,
                256 => body.bytes[at] as i8 as f32,
                4 => i16::from_le_bytes(body.raw(at)) as f32,
                512 => u16::from_le_bytes(body.raw(at)) as f32,
                8 => i32::from_le_bytes(body.raw(at)) as f32,
                768 => u32::from_le_bytes(body.raw(at)) as f32,
                16 => f32::from_le_bytes(body.raw(at)),
                _ => f64::from_le_bytes(body.raw(at)) as f32,
            }
        })
        .map(|v| {
            if slope != 0.0 && slope.is_finite() {
                v * slope + inter
            } else {
                v
            }
        })
        .collect();
    Ok(([nz, ny, nx], values))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Builds a minimal NIfTI-1 file with the given datatype payload.
    pub(crate) fn nifti_bytes(dims: [i16; 3], datatype: i16, payload: &[u8], little: bool) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        let put16 = |h: &mut Vec<u8>, at: usize, v: i16| {
            let b = if little { v.to_le_bytes() } else { v.to_be_bytes() };
            h[at..at + 2].copy_from_slice(&b);
        };
        let s = if little {
            348i32.to_le_bytes()
        } else {
            348i32.to_be_bytes()
        };
        h[..4].copy_from_slice(&s);
        put16(&mut h, 40, 3);
        for (i, d) in dims.iter().enumerate() {
            put16(&mut h, 42 + 2 * i, *d);
        }
        put16(&mut h, 70, datatype);
        let off = if little {
            352f32.to_le_bytes()
        } else {
            352f32.to_be_bytes()
        };
        h[108..112].copy_from_slice(&off);
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(payload);
        h
    }

    #[test]
    fn reads_float_volume_in_x_fastest_order() {
        let vals: Vec<f32> = (0..24).map(|i| i as f32 * 0.5).collect();
        let payload: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.nii");
        std::fs::write(&path, nifti_bytes([4, 3, 2], 16, &payload, true)).unwrap();
        let (ext, got) = read_nifti(&path).unwrap();
        assert_eq!(ext, [2, 3, 4]);
        assert_eq!(got, vals);
    }

    #[test]
    fn reads_big_endian_i16() {
        let payload: Vec<u8> = [1i16, -2, 300, 4].iter().flat_map(|v| v.to_be_bytes()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.nii");
        std::fs::write(&path, nifti_bytes([2, 2, 1], 4, &payload, false)).unwrap();
        assert_eq!(read_nifti(&path).unwrap().1, vec![1.0, -2.0, 300.0, 4.0]);
    }

    #[test]
    fn rejects_gzip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let gz = dir.path().join("c.nii.gz");
        std::fs::write(&gz, [0x1f, 0x8b, 0, 0]).unwrap();
        assert!(read_nifti(&gz).unwrap_err().to_string().contains("gzip"));
        let short = dir.path().join("d.nii");
        std::fs::write(&short, nifti_bytes([2, 2, 2], 2, &[0; 7], true)).unwrap();
        assert!(read_nifti(&short).is_err());
    }
}
