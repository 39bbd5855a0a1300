//! Binary checkpoint: the 8-byte magic `PRNNCKPT`, a little-endian `u32`
//! format version, the model config as length-prefixed JSON, then a `u32`
//! block count and one block per tensor (length-prefixed UTF-8 name, `u32`
//! rank, `u64` dims, little-endian `f64` data).

use std::fs;
use std::path::Path;

use nn::Tensor;
use polyrnn_nn as nn;
use sha2::{Digest, Sha256};

use super::params::Params;
use super::{FirstVertexNet, ModelConfig, ModelError, Models, PolygonRnn};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PRNNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(models: &Models) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&models.config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let blocks = models.named();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, t) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes the checkpoint and returns its SHA-256 (hex).
pub fn save_checkpoint(path: &Path, models: &Models) -> Result<String, ModelError> {
    let bytes = checkpoint_bytes(models);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Loads a checkpoint, returning the models and the file's SHA-256 (hex).
pub fn load_checkpoint(path: &Path) -> Result<(Models, String), ModelError> {
    let bytes = fs::read(path)?;
    let models = parse_checkpoint(&bytes)?;
    Ok((models, sha256_hex(&bytes)))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ModelError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Models, ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).map_err(|_| bad("not a checkpoint"))? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported format version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| bad("block name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| bad("dimension overflow"))?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("dimension overflow"))?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| bad("dimension overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        blocks.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let mut rnn = PolygonRnn::zeros(&config)?;
    let split = rnn.named().len();
    if blocks.len() < split {
        return Err(bad("missing parameter blocks"));
    }
    rnn.load_named(&blocks[..split])?;
    let mut first_vertex = FirstVertexNet::zeros(&config)?;
    first_vertex.load_named(&blocks[split..])?;
    Ok(Models {
        config,
        rnn,
        first_vertex,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rejections() {
        let m = Models::init(&ModelConfig::tiny(), 4).unwrap();
        let bytes = checkpoint_bytes(&m);
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(parse_checkpoint(&bytes).unwrap(), m);

        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(parse_checkpoint(&v2).unwrap_err().to_string().contains("version 2"));
        assert!(parse_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(parse_checkpoint(b"NOTACKPTxxxx").is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let h = save_checkpoint(&p, &m).unwrap();
        let (back, h2) = load_checkpoint(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(h, h2);
        assert_eq!(h.len(), 64);
    }
}
