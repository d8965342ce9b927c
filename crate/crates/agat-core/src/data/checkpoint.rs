//! Checkpoint container: a little-endian binary layout of named f64
//! tensors plus the epoch counter, the generator state, and a fingerprint
//! of the resolved configuration.
//!
//! Layout: magic "AGCK", version u32, epoch u64, rng seed u64, rng counter
//! u64, fingerprint u64, tensor count u64; then per tensor name length u32,
//! name bytes, rank u32, dims u64 each, raw f64 values. Round-trips are
//! bitwise.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{AgatError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AGCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub epoch: u64,
    pub rng_state: (u64, u64),
    pub fingerprint: u64,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Fingerprint comparison is advisory: a mismatch is reported, never
    /// fatal.
    pub fn fingerprint_warning(&self, expected: u64) -> Option<String> {
        (self.fingerprint != expected).then(|| {
            format!(
                "checkpoint fingerprint {:016x} does not match configuration {:016x}",
                self.fingerprint, expected
            )
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.epoch.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng_state.0.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng_state.1.to_le_bytes());
    buf.extend_from_slice(&ckpt.fingerprint.to_le_bytes());
    buf.extend_from_slice(&(ckpt.tensors.len() as u64).to_le_bytes());
    for (name, t) in &ckpt.tensors {
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
    let mut f =
        fs::File::create(path).map_err(|e| AgatError::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| AgatError::io(path.display().to_string(), e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.off..self.off + n)
            .ok_or_else(|| AgatError::Data(format!("{}: truncated checkpoint", self.path)))?;
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| AgatError::io(path.display().to_string(), e))?;
    let mut r = Reader {
        buf: &buf,
        off: 0,
        path: path.display().to_string(),
    };
    if r.take(4)? != MAGIC {
        return Err(AgatError::Data(format!(
            "{}: not a checkpoint container",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(AgatError::Data(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            version
        )));
    }
    let epoch = r.u64()?;
    let rng_state = (r.u64()?, r.u64()?);
    let fingerprint = r.u64()?;
    let count = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| AgatError::Data("checkpoint tensor name is not utf-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint {
        tensors,
        epoch,
        rng_state,
        fingerprint,
    })
}

/// Human-readable listing for the dump command; stable ordering.
pub fn dump_checkpoint(ckpt: &Checkpoint) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "epoch {}\nrng seed {} counter {}\nfingerprint {:016x}\ntensors {}\n",
        ckpt.epoch,
        ckpt.rng_state.0,
        ckpt.rng_state.1,
        ckpt.fingerprint,
        ckpt.tensors.len()
    ));
    for (name, t) in &ckpt.tensors {
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for &v in t.data() {
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
        }
        out.push_str(&format!(
            "{}  shape {:?}  min {:.6e}  max {:.6e}  mean {:.6e}  fnv {:016x}\n",
            name,
            t.shape(),
            lo,
            hi,
            sum / t.len() as f64,
            t.fnv1a()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let mut rng = Rng::new(5);
        let mut t1 = Tensor::zeros(&[3, 4]);
        rng.fill_normal(t1.data_mut());
        let mut t2 = Tensor::zeros(&[7]);
        rng.fill_normal(t2.data_mut());
        let ckpt = Checkpoint {
            tensors: vec![("conv1.weight".into(), t1), ("conv1.bias".into(), t2)],
            epoch: 9,
            rng_state: (5, 12345),
            fingerprint: 0xdeadbeef,
        };
        save_checkpoint(&ckpt, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.epoch, 9);
        assert_eq!(back.rng_state, (5, 12345));
        for ((an, at), (bn, bt)) in ckpt.tensors.iter().zip(&back.tensors) {
            assert_eq!(an, bn);
            assert_eq!(at.shape(), bt.shape());
            assert_eq!(at.data(), bt.data());
        }
    }

    #[test]
    fn truncated_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let ckpt = Checkpoint {
            tensors: vec![("w".into(), Tensor::filled(&[10], 1.0))],
            epoch: 0,
            rng_state: (0, 0),
            fingerprint: 1,
        };
        save_checkpoint(&ckpt, &p).unwrap();
        let buf = fs::read(&p).unwrap();
        fs::write(&p, &buf[..buf.len() - 4]).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }

    #[test]
    fn fingerprint_mismatch_is_a_warning_not_an_error() {
        let ckpt = Checkpoint {
            tensors: vec![],
            epoch: 0,
            rng_state: (0, 0),
            fingerprint: 7,
        };
        assert!(ckpt.fingerprint_warning(7).is_none());
        assert!(ckpt.fingerprint_warning(8).is_some());
    }
}
