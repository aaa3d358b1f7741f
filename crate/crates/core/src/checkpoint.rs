//! Versioned checkpoint container.
//!
//! Layout, all integers little-endian u32:
//! `DASSCKPT`, version byte, meta length, meta JSON, tensor count, then per
//! tensor: name length, name, rank, dims, f32 data.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{DassError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DASSCKPT";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<M> {
    pub meta: M,
    pub tensors: Vec<(String, Tensor)>,
}

impl<M> Checkpoint<M> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| DassError::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode<M: Serialize>(ckpt: &Checkpoint<M>) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ckpt.meta)?;
    let mut out = Vec::with_capacity(64 + meta.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(&meta);
    put_u32(&mut out, ckpt.tensors.len())?;
    for (name, t) in &ckpt.tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DassError::Format {
                offset: self.pos as u64,
                reason: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8]) -> Result<Checkpoint<M>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(DassError::Format {
            offset: 0,
            reason: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(DassError::Format {
            offset: 8,
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    let meta_len = r.u32("meta length")?;
    let meta_at = r.pos;
    let meta = serde_json::from_slice(r.take(meta_len, "meta")?).map_err(|e| DassError::Format {
        offset: meta_at as u64,
        reason: format!("bad checkpoint metadata: {e}"),
    })?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_at = r.pos;
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| DassError::Format {
                offset: name_at as u64,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dims")?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| DassError::Format {
            offset: name_at as u64,
            reason: format!("tensor {name} has an overflowing shape"),
        })?;
        let raw = r.take(numel.saturating_mul(4), "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| DassError::Format {
            offset: name_at as u64,
            reason: format!("tensor {name}: {e}"),
        })?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(DassError::Format {
            offset: r.pos as u64,
            reason: "trailing bytes after the last tensor".into(),
        });
    }
    Ok(Checkpoint { meta, tensors })
}

/// Writes through a temporary file so a crash never leaves a half-written checkpoint.
pub fn save_checkpoint<M: Serialize>(ckpt: &Checkpoint<M>, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| DassError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| DassError::io(&tmp, e))?;
    f.sync_all().map_err(|e| DassError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| DassError::io(path, e))
}

pub fn load_checkpoint<M: DeserializeOwned>(path: &Path) -> Result<Checkpoint<M>> {
    let bytes = std::fs::read(path).map_err(|e| DassError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    struct Meta {
        phase: String,
        epoch: usize,
    }

    fn sample() -> Checkpoint<Meta> {
        Checkpoint {
            meta: Meta { phase: "pretrained".into(), epoch: 3 },
            tensors: vec![
                ("a.theta".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, f32::MIN_POSITIVE, 7.0, -0.0]).unwrap()),
                ("scalar".into(), Tensor::scalar(4.25)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back: Checkpoint<Meta> = decode(&encode(&c).unwrap()).unwrap();
        assert_eq!(back.meta, c.meta);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = encode(&sample()).unwrap();
        for cut in [0, 5, 9, 20, bytes.len() - 1] {
            assert!(matches!(decode::<Meta>(&bytes[..cut]), Err(DassError::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[8] = 99;
        assert!(decode::<Meta>(&bytes).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(decode::<Meta>(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&sample(), &p).unwrap();
        let back: Checkpoint<Meta> = load_checkpoint(&p).unwrap();
        assert_eq!(back, sample());
    }
}
