//! Binary checkpoints: a `JULC` header followed by named little-endian `f64` blobs.

use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

use super::model::ModelBundle;

pub const MAGIC: &[u8; 4] = b"JULC";
pub const VERSION: u32 = 1;

/// Serialize every parameter set of the bundle, names prefixed by their set.
pub fn encode(bundle: &ModelBundle, config_hash: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash.to_le_bytes());
    for (prefix, params) in bundle.param_sets() {
        for (name, t) in params.iter() {
            let full = format!("{prefix}.{name}");
            out.extend_from_slice(&(full.len() as u32).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

pub fn save(path: &Path, bundle: &ModelBundle, config_hash: u64) -> Result<()> {
    fs::write(path, encode(bundle, config_hash))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parsed checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic, not a julkit checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let config_hash = r.u64()?;
    let mut tensors = Vec::new();
    while !r.done() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint(format!("`{name}`: implausible rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = count.filter(|&c| c > 0).ok_or_else(|| Error::Checkpoint(format!("`{name}`: bad shape")))?;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    Ok(Checkpoint { config_hash, tensors })
}

/// Load weights into `bundle`, requiring the stored hash to equal `config_hash`
/// and every parameter to be present exactly once.
pub fn load_into(path: &Path, bundle: &mut ModelBundle, config_hash: u64) -> Result<()> {
    let ckpt = decode(&fs::read(path)?)?;
    if ckpt.config_hash != config_hash {
        return Err(Error::Checkpoint(format!(
            "config hash {:016x} does not match {:016x}",
            ckpt.config_hash, config_hash
        )));
    }
    let expected: usize = bundle.param_sets().iter().map(|(_, p)| p.len()).sum();
    if ckpt.tensors.len() != expected {
        return Err(Error::Checkpoint(format!("{} tensors stored, model has {expected}", ckpt.tensors.len())));
    }
    for (full, t) in ckpt.tensors {
        let (prefix, name) =
            full.split_once('.').ok_or_else(|| Error::Checkpoint(format!("unprefixed parameter `{full}`")))?;
        let mut sets = bundle.param_sets_mut();
        let set = sets
            .iter_mut()
            .find(|(p, _)| *p == prefix)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter group `{prefix}`")))?;
        set.1.assign(name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let a = ModelBundle::new(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.julc");
        save(&path, &a, 77).unwrap();
        let mut b = ModelBundle::new(2);
        load_into(&path, &mut b, 77).unwrap();
        for ((_, p), (_, q)) in a.param_sets().iter().zip(b.param_sets().iter()) {
            assert_eq!(p, q);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&ModelBundle::new(1), 0x0102030405060708);
        assert_eq!(&bytes[..4], b"JULC");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &0x0102030405060708u64.to_le_bytes());
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = encode(&ModelBundle::new(1), 5);
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(decode(&bad_version), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(m)) if m.contains("truncated")));
        assert!(decode(&bytes[..2]).is_err());
    }

    #[test]
    fn hash_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.julc");
        save(&path, &ModelBundle::new(1), 5).unwrap();
        assert!(matches!(load_into(&path, &mut ModelBundle::new(1), 6), Err(Error::Checkpoint(_))));
    }
}
