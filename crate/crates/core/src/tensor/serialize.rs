//! Flat weight container.
//!
//! ```text
//! "DVW1" | count: u64
//! per tensor: name_len: u64 | name: utf-8 | rank: u64 | extents: u64 * rank | data: f32 * numel
//! ```
//! All integers and floats little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"DVW1";

/// A tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_weights<W: Write>(mut w: W, tensors: &[NamedTensor]) -> std::io::Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.name.len() as u64).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u64).to_le_bytes())?;
        for &e in &t.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Upper bound on a single length field; anything larger is a corrupt file.
const MAX_FIELD: u64 = 1 << 34;

pub fn read_weights<R: Read>(mut r: R) -> std::result::Result<Vec<NamedTensor>, String> {
    let io = |e: std::io::Error| e.to_string();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(format!("bad magic {magic:?}, expected DVW1"));
    }
    let count = read_u64(&mut r).map_err(io)?;
    if count > MAX_FIELD {
        return Err(format!("implausible tensor count {count}"));
    }
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let len = read_u64(&mut r).map_err(io)?;
        if len > 1 << 16 {
            return Err(format!("implausible name length {len}"));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| format!("tensor name: {e}"))?;
        let rank = read_u64(&mut r).map_err(io)?;
        if rank > 16 {
            return Err(format!("{name}: implausible rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u64(&mut r).map_err(io)? as usize);
        }
        let numel: u64 = shape.iter().map(|&e| e as u64).product();
        if numel > MAX_FIELD {
            return Err(format!("{name}: implausible element count {numel}"));
        }
        let mut bytes = vec![0u8; numel as usize * 4];
        r.read_exact(&mut bytes).map_err(|e| format!("{name}: {e}"))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io)? != 0 {
        return Err("trailing bytes after last tensor".into());
    }
    Ok(out)
}

pub fn save_weights(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_weights(BufWriter::new(file), tensors).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<Vec<NamedTensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_weights(BufReader::new(file)).map_err(|d| Error::format(path, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = NamedTensor {
            name: "w".into(),
            shape: vec![2],
            data: vec![1.0, -0.5],
        };
        let mut buf = Vec::new();
        write_weights(&mut buf, &[t]).unwrap();
        let mut expect = b"DVW1".to_vec();
        expect.extend(1u64.to_le_bytes());
        expect.extend(1u64.to_le_bytes());
        expect.push(b'w');
        expect.extend(1u64.to_le_bytes());
        expect.extend(2u64.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-0.5f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn truncated_and_foreign_files_rejected() {
        assert!(read_weights(&b"DVW2\0\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_weights(
            &mut buf,
            &[NamedTensor {
                name: "x".into(),
                shape: vec![3],
                data: vec![0.0; 3],
            }],
        )
        .unwrap();
        buf.pop();
        assert!(read_weights(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(entries in prop::collection::vec(
            ("[a-z.0-9]{1,12}", prop::collection::vec(1usize..4, 0..4)), 0..5)) {
            let tensors: Vec<NamedTensor> = entries.into_iter().enumerate().map(|(i, (name, shape))| {
                let n: usize = shape.iter().product();
                NamedTensor { name, shape, data: (0..n).map(|j| (i * 31 + j) as f32 * 0.37 - 1.0).collect() }
            }).collect();
            let mut buf = Vec::new();
            write_weights(&mut buf, &tensors).unwrap();
            prop_assert_eq!(read_weights(&buf[..]).unwrap(), tensors);
        }
    }
}
