//! `.dkpt` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "DKPT"
//! version    u32      currently 1
//! config     u64 length + UTF-8 `key = value` text (model config plus `meta.*` keys)
//! count      u32      number of tensor records
//! record     u32 name length + UTF-8 name, u32 rank, rank × u64 extents,
//!            product(extents) × f64 values
//! ```
//!
//! Nothing may follow the last record.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::kv::KvMap;
use crate::model::{Model, ModelConfig};
use crate::tensor::{RngState, Tensor};

pub const MAGIC: &[u8; 4] = b"DKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "dkpt";

/// Training provenance stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epochs: usize,
    pub seed: u64,
    pub config_hash: String,
}

pub fn encode(model: &Model, meta: &CheckpointMeta) -> Vec<u8> {
    let mut kv = model.config().to_kv();
    kv.set("meta.epochs", meta.epochs);
    kv.set("meta.seed", meta.seed);
    kv.set("meta.config_hash", &meta.config_hash);
    let text = kv.to_text();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
                Error::Corruption(format!("checkpoint truncated at byte {} (needed {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Corruption(format!("{what} length {n} exceeds file size")))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Corruption(format!("{what} is not UTF-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::Format("file too short for checkpoint magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (this build reads version {FORMAT_VERSION})"
        )));
    }
    let text_len = r.len("config")?;
    let text = r.string(text_len, "config text")?;
    let kv = KvMap::parse(text).map_err(|e| Error::Corruption(format!("config text: {e}")))?;
    let config = ModelConfig::from_kv(&kv).map_err(|e| Error::Corruption(format!("config text: {e}")))?;
    let meta = CheckpointMeta {
        epochs: kv.parsed("meta.epochs").map_err(Error::Corruption)?.unwrap_or(0),
        seed: kv.parsed("meta.seed").map_err(Error::Corruption)?.unwrap_or(0),
        config_hash: kv.get("meta.config_hash").unwrap_or_default().to_string(),
    };
    let mut model = Model::build(&config, &mut RngState::new(0))
        .map_err(|e| Error::Corruption(format!("embedded config does not build: {e}")))?;

    let count = r.u32()? as usize;
    let expected = model.params().len();
    if count != expected {
        return Err(Error::Corruption(format!("checkpoint has {count} tensors, config implies {expected}")));
    }
    let mut params = model.params_mut();
    for (name, param) in params.iter_mut() {
        let name_len = r.u32()? as usize;
        let got = r.string(name_len, "tensor name")?;
        if got != name {
            return Err(Error::Corruption(format!("expected tensor {name}, found {got}")));
        }
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Corruption(format!("tensor {name} has implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.len("extent")).collect::<Result<Vec<_>>>()?;
        if shape != param.value.shape() {
            return Err(Error::Corruption(format!(
                "tensor {name} has shape {shape:?}, config implies {:?}",
                param.value.shape()
            )));
        }
        let raw = r.take(param.value.len() * 8)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        param.value = Tensor::from_vec(&shape, data).map_err(|e| Error::Corruption(format!("tensor {name}: {e}")))?;
        param.grad = param.value.zeros_like();
    }
    drop(params);
    if r.pos != bytes.len() {
        return Err(Error::Corruption(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
    }
    Ok((model, meta))
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_dsnet;

    fn model() -> Model {
        build_dsnet(&ModelConfig::dsnet_desk(), &mut RngState::new(3)).unwrap()
    }

    fn bits(m: &Model) -> Vec<(String, Vec<u64>)> {
        m.params().into_iter().map(|(n, p)| (n, p.value.data().iter().map(|v| v.to_bits()).collect())).collect()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let m = model();
        let meta = CheckpointMeta { epochs: 20, seed: 9, config_hash: "abc".into() };
        let (back, meta_back) = decode(&encode(&m, &meta)).unwrap();
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(back.config(), m.config());
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("student.dkpt");
        let m = model();
        save_checkpoint(&m, &CheckpointMeta::default(), &path).unwrap();
        let (back, _) = load_checkpoint(&path).unwrap();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn truncated_is_corruption() {
        let bytes = encode(&model(), &CheckpointMeta::default());
        for cut in [9, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Corruption(_))), "cut at {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&longer), Err(Error::Corruption(_))));
    }

    #[test]
    fn wrong_version_names_it() {
        let mut bytes = encode(&model(), &CheckpointMeta::default());
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        match decode(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("99"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn config_shape_mismatch_is_corruption() {
        let mut bytes = encode(&model(), &CheckpointMeta::default());
        let needle = b"conv_widths = 8,16,32";
        let pos = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        bytes[pos + needle.len() - 1] = b'3';
        assert!(matches!(decode(&bytes), Err(Error::Corruption(_))));
    }
}
