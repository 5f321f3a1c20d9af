use std::io::{Read, Write};
use std::path::Path;

use super::ModelError;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"HGFA";
pub const WEIGHTS_VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor)>;

/// `HGFA`, version, then per tensor: name length, name, rank, extents
/// (u64) and f64 values, all little-endian.
pub fn write_weights(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_weights(path: &Path) -> Result<NamedTensors, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != WEIGHTS_MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| ModelError::Format("tensor name is not utf-8".into()))?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| ModelError::Format("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub(crate) fn take_tensor(
    tensors: &mut NamedTensors,
    name: &str,
    shape: &[usize],
) -> Result<Tensor, ModelError> {
    let idx = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| ModelError::Format(format!("missing tensor {name}")))?;
    let (_, t) = tensors.swap_remove(idx);
    if t.shape() != shape {
        return Err(ModelError::Format(format!(
            "tensor {name} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

/// Reads a rank-1 metadata tensor of non-negative integers.
pub(crate) fn take_meta(tensors: &mut NamedTensors, name: &str, len: usize) -> Result<Vec<usize>, ModelError> {
    let t = take_tensor(tensors, name, &[len])?;
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(ModelError::Format(format!("{name} holds a non-integer {v}")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let tensors = vec![
            ("a".to_string(), Tensor::new(&[2], vec![1.5, -2.0]).unwrap()),
            ("bb".to_string(), Tensor::scalar(0.25)),
        ];
        write_weights(&path, &tensors).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"HGFA");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        // name_len=1, "a", rank=1, extent 2, two values
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], b'a');
        assert_eq!(bytes.len(), 8 + (4 + 1 + 4 + 8 + 16) + (4 + 2 + 4 + 8));
        assert_eq!(read_weights(&path).unwrap(), tensors);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        std::fs::write(&path, b"NOPE\x01\0\0\0").unwrap();
        assert!(read_weights(&path).is_err());
        let tensors = vec![("x".to_string(), Tensor::zeros(&[3]))];
        write_weights(&path, &tensors).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_weights(&path).is_err());
    }
}
