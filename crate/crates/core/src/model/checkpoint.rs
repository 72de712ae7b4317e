//! Binary checkpoint format.
//!
//! Layout: magic "BDSC", format version u32, layer-size list, activation id,
//! parameters as little-endian f32 in layer order (weights row-major then
//! bias per layer), then a length-prefixed UTF-8 JSON metadata block.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::net::{Activation, DescriptorNet};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BDSC";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// "init", "preliminary" or "annealed".
    pub stage: String,
    pub config_hash: String,
}

pub fn save_checkpoint(net: &DescriptorNet, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(net.layer_sizes().len() as u32).to_le_bytes());
    for &s in net.layer_sizes() {
        buf.extend_from_slice(&(s as u32).to_le_bytes());
    }
    buf.extend_from_slice(&net.activation().id().to_le_bytes());
    for p in net.params_flat() {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| Error::Checkpoint(format!("metadata serialization: {e}")))?;
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated payload at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(DescriptorNet, CheckpointMeta)> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected BDSC".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let n_sizes = r.u32()? as usize;
    if n_sizes < 2 || n_sizes > 64 {
        return Err(Error::Format(format!("implausible layer count {n_sizes}")));
    }
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        sizes.push(r.u32()? as usize);
    }
    let activation = Activation::from_id(r.u32()?)?;
    let mut net = DescriptorNet::new_seeded(&sizes, activation, 0)?;
    let mut flat = Vec::with_capacity(net.param_count());
    for _ in 0..net.param_count() {
        flat.push(r.f32()? as f64);
    }
    net.set_params_flat(&flat)?;
    let meta_len = r.u32()? as usize;
    let meta_bytes = r.take(meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Format(format!("metadata block: {e}")))?;
    Ok((net, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            seed: 42,
            stage: "preliminary".into(),
            config_hash: "abc123".into(),
        }
    }

    #[test]
    fn round_trip_preserves_f32_params_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bdsc");
        let net = DescriptorNet::new_seeded(&[8, 12, 4], Activation::Tanh, 7).unwrap();
        save_checkpoint(&net, &meta(), &path).unwrap();
        let (loaded, m) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta());
        assert_eq!(loaded.layer_sizes(), net.layer_sizes());
        for (a, b) in loaded.params_flat().iter().zip(net.params_flat()) {
            assert_eq!(*a, b as f32 as f64);
        }
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bdsc");
        let net = DescriptorNet::new_seeded(&[4, 3], Activation::Tanh, 1).unwrap();
        save_checkpoint(&net, &meta(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn version_bump_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bdsc");
        let net = DescriptorNet::new_seeded(&[4, 3], Activation::Tanh, 1).unwrap();
        save_checkpoint(&net, &meta(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Version { found, expected }) => {
                assert_eq!(found, 99);
                assert_eq!(expected, CHECKPOINT_VERSION);
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bdsc");
        let net = DescriptorNet::new_seeded(&[4, 3], Activation::Tanh, 1).unwrap();
        save_checkpoint(&net, &meta(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
