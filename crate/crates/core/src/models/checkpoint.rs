//! Binary checkpoint container.
//!
//! Little-endian layout: an 8-byte magic string, a format version, the
//! architecture tag, training metadata (epoch, fold, seed), then one record
//! per tensor: name, shape, and 32-bit IEEE-754 data. Parameters are kept on
//! the `f32` grid during training, so a save/load round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Arch, ParamSet};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CGHNETCK";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: Arch,
    pub epoch: u32,
    pub fold: u32,
    pub seed: u64,
    pub params: ParamSet,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ckpt.version.to_le_bytes());
    let tag = ckpt.arch.tag().as_bytes();
    buf.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    buf.extend_from_slice(tag);
    buf.extend_from_slice(&ckpt.epoch.to_le_bytes());
    buf.extend_from_slice(&ckpt.fold.to_le_bytes());
    buf.extend_from_slice(&ckpt.seed.to_le_bytes());
    buf.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, tensor) in ckpt.params.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    // Atomic write: temp file in the same directory, then rename.
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(&buf)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(detail: &str) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {detail}"))
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| corrupt(&format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        if len > 4096 {
            return Err(corrupt(&format!("implausible {what} length {len}")));
        }
        let b = self.bytes(len, what)?;
        String::from_utf8(b).map_err(|_| corrupt(&format!("non-utf8 {what}")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader {
        inner: std::io::BufReader::new(file),
    };
    let magic = r.bytes(8, "magic")?;
    if magic != MAGIC {
        return Err(corrupt("bad magic string"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let arch = Arch::from_str(&r.string("architecture tag")?)?;
    let epoch = r.u32("epoch")?;
    let fold = r.u32("fold")?;
    let seed = r.u64("seed")?;
    let n_records = r.u32("record count")?;
    let mut params = ParamSet::new();
    for i in 0..n_records {
        let name = r.string(&format!("record {i} name"))?;
        let ndim = r.u32(&format!("record {i} rank"))? as usize;
        if ndim > 8 {
            return Err(corrupt(&format!("record {i} has rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&format!("record {i} shape"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.bytes(numel * 4, &format!("record {i} data"))?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(Checkpoint {
        version,
        arch,
        epoch,
        fold,
        seed,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::BilstmParams;
    use crate::rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut r = rng::stream(8, "ckpt", 0);
        let mut params = BilstmParams::init(5, 0.5, &mut r);
        params.params.round_to_f32_grid();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            arch: Arch::Bilstm,
            epoch: 7,
            fold: 2,
            seed: 99,
            params: params.params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.arch, ckpt.arch);
        assert_eq!(back.epoch, 7);
        assert_eq!(back.fold, 2);
        assert_eq!(back.seed, 99);
        assert_eq!(back.params.len(), ckpt.params.len());
        for ((n1, t1), (n2, t2)) in back.params.iter().zip(ckpt.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "parameter {n1} differs");
            }
        }
    }

    #[test]
    fn truncated_file_reports_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_file_name("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&cut).unwrap_err();
        assert!(err.to_string().contains("corrupt"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTMYFMT rest of file").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
