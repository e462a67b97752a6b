//! Binary checkpoint format.
//!
//! ```text
//! "NORN" | u32 version | u32 tensor count
//! per tensor: u16 name length, name, u8 rank, u64 dims.., f64 values..
//! u32 length, UTF-8 `key=value` lines (config, `entities`, `relations`)
//! ```
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::path::Path;

use crate::tensor::Tensor;

use super::{Model, TrainConfig};

pub const MAGIC: &[u8; 4] = b"NORN";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    TruncatedFile,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint parameter {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut kv = String::new();
    for (k, v) in model.config().to_pairs() {
        kv.push_str(&format!("{k}={v}\n"));
    }
    kv.push_str(&format!("entities={}\n", model.entity_names().join("\t")));
    kv.push_str(&format!("relations={}\n", model.relation_names().join("\t")));
    out.extend_from_slice(&(kv.len() as u32).to_le_bytes());
    out.extend_from_slice(kv.as_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::TruncatedFile)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

fn split_names(v: &str) -> Vec<String> {
    if v.is_empty() {
        Vec::new()
    } else {
        v.split('\t').map(str::to_owned).collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 {
        return Err(if MAGIC.starts_with(bytes) { CheckpointError::TruncatedFile } else { CheckpointError::BadMagic });
    }
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?.to_owned();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(r.array()?) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::TruncatedFile)?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((name, shape, data));
    }
    let kv_len = r.u32()? as usize;
    let kv = std::str::from_utf8(r.take(kv_len)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }

    let mut pairs: HashMap<&str, &str> = HashMap::new();
    for line in kv.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| CheckpointError::Malformed(format!("bad metadata line {line:?}")))?;
        pairs.insert(k, v);
    }
    let entities = split_names(pairs.remove("entities").ok_or_else(|| CheckpointError::Malformed("missing entities".into()))?);
    let relations = split_names(pairs.remove("relations").ok_or_else(|| CheckpointError::Malformed("missing relations".into()))?);
    let mut config = TrainConfig::default();
    for (k, v) in pairs {
        config.set(k, v).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }

    let mut model = Model::new(config, entities, relations);
    if tensors.len() != model.store.len() {
        return Err(CheckpointError::Malformed(format!("{} tensors, model has {}", tensors.len(), model.store.len())));
    }
    for (name, shape, data) in tensors {
        let id = model.store.find(&name).ok_or_else(|| CheckpointError::Malformed(format!("unknown parameter {name}")))?;
        let slot = model.store.get_mut(id);
        if slot.shape() != shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: slot.shape().to_vec(),
                found: shape,
            });
        }
        let trainable = slot.requires_grad();
        let mut t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        t.set_requires_grad(trainable);
        *slot = t;
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::parse_triples;

    fn model() -> Model {
        let kg = parse_triples(b"a\tr\tb\nb\ts\tc\n").unwrap();
        let cfg = TrainConfig {
            dim: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        Model::for_graph(cfg, &kg)
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let mut m = model();
        m.store.get_mut(m.cls_bias).data_mut()[0] = -0.123456789e-7;
        let bytes = encode(&m);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&model());
        assert_eq!(&bytes[..4], b"NORN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = encode(&model());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(CheckpointError::UnsupportedVersion(2))));
        for cut in [2, 6, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(CheckpointError::TruncatedFile)), "cut {cut}");
        }
    }
}
