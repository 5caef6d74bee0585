//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic        4 bytes   "IODC"
//! version      u32       CHECKPOINT_VERSION
//! spec_len     u32       length of the JSON network spec
//! spec         spec_len bytes, UTF-8 JSON of NetworkSpec
//! count        u32       number of tensor records
//! count x record:
//!   path_len   u32
//!   path       path_len bytes, UTF-8
//!   ndim       u32
//!   dims       ndim x u32
//!   data       prod(dims) x f32
//! ```
//!
//! Records are written in parameter-path order. Input normalization, when
//! present, is stored as `preprocess/mean` and `preprocess/std`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ChannelNorm, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::{Rng, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IODC";
pub const CHECKPOINT_VERSION: u32 = 1;

const NORM_MEAN: &str = "preprocess/mean";
const NORM_STD: &str = "preprocess/std";

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record(buf: &mut Vec<u8>, path: &str, shape: &[usize], data: impl Iterator<Item = f32>) -> Result<()> {
    put_u32(buf, path.len())?;
    buf.extend_from_slice(path.as_bytes());
    put_u32(buf, shape.len())?;
    for &d in shape {
        put_u32(buf, d)?;
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

impl<T: Scalar> Network<T> {
    /// Serializes the network; parameters are stored as `f32`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let spec = serde_json::to_vec(self.spec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        put_u32(&mut buf, spec.len())?;
        buf.extend_from_slice(&spec);

        let params = self.params();
        let extra = if self.norm().is_some() { 2 } else { 0 };
        put_u32(&mut buf, params.len() + extra)?;
        for (path, t) in &params {
            put_record(&mut buf, path, t.shape(), t.data().iter().map(|v| v.as_f64() as f32))?;
        }
        if let Some(n) = self.norm() {
            put_record(&mut buf, NORM_MEAN, &[n.mean.len()], n.mean.iter().copied())?;
            put_record(&mut buf, NORM_STD, &[n.std.len()], n.std.iter().copied())?;
        }
        Ok(buf)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated checkpoint while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)?;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

impl Network<f32> {
    /// Parses a checkpoint. Nothing is constructed unless the whole buffer
    /// is valid.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes, not an IODC checkpoint".into()));
        }
        let version = r.u32("version")? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let spec_json = r.string("network spec")?;
        let spec: NetworkSpec =
            serde_json::from_str(spec_json).map_err(|e| Error::Checkpoint(format!("invalid network spec: {e}")))?;
        spec.validate().map_err(|e| Error::Checkpoint(format!("invalid network spec: {e}")))?;

        let count = r.u32("record count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let path = r.string("record path")?.to_string();
            let ndim = r.u32("record rank")?;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u32("record shape")?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("record `{path}` is too large")))?;
            let raw = r.take(len, "record data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| Error::Checkpoint(format!("record `{path}`: {e}")))?;
            if tensors.insert(path.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate record `{path}`")));
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after last record", buf.len() - r.pos)));
        }

        let norm = match (tensors.remove(NORM_MEAN), tensors.remove(NORM_STD)) {
            (Some(m), Some(s)) => Some(ChannelNorm {
                mean: m.into_data(),
                std: s.into_data(),
            }),
            (None, None) => None,
            _ => return Err(Error::Checkpoint("incomplete input normalization records".into())),
        };
        let mut net = Network::build(spec, &mut Rng::new(0))?;
        if tensors.len() != net.params().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameter records, network expects {}",
                tensors.len(),
                net.params().len()
            )));
        }
        net.assign_params(&tensors)?;
        net.set_norm(norm);
        Ok(net)
    }
}

/// Writes a checkpoint via a temporary file and rename, so a failed write
/// never leaves a partial checkpoint at `path`.
pub fn save<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &net.to_bytes()?)
}

pub fn load(path: impl AsRef<Path>) -> Result<Network<f32>> {
    Network::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Task;

    fn net() -> Network {
        let mut n = Network::build(NetworkSpec::iod_tiny(), &mut Rng::new(11)).unwrap();
        n.set_norm(Some(ChannelNorm {
            mean: vec![0.1, 0.2, 0.3],
            std: vec![1.0, 2.0, 3.0],
        }));
        n
    }

    #[test]
    fn save_load_save_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.iodc");
        let a = net();
        save(&a, &p).unwrap();
        let b = load(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(fs::read(&p).unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn header_layout() {
        let bytes = net().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"IODC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn version_mismatch_and_truncation() {
        let mut bytes = net().to_bytes().unwrap();
        assert!(Network::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Network::from_bytes(&bytes[..10]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Network::from_bytes(&extra).is_err());
        bytes[4] = 2;
        let err = Network::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn single_task_warm_start() {
        let single: Network = Network::build(NetworkSpec::event_tiny(), &mut Rng::new(1)).unwrap();
        let restored = Network::from_bytes(&single.to_bytes().unwrap()).unwrap();
        let mut iod: Network = Network::build(NetworkSpec::iod_tiny(), &mut Rng::new(2)).unwrap();
        let copied = iod.transfer_shared_from(&restored).unwrap();
        let expect: Vec<String> = single
            .param_paths()
            .into_iter()
            .filter(|p| !p.starts_with("head-"))
            .collect();
        assert_eq!(copied, expect);
        assert!(iod.head(Task::Rigid).is_some());
    }
}
