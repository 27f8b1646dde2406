//! Named-tensor archive.
//!
//! ```text
//! magic    8 bytes  "SSDRECCK"
//! version  u32 LE
//! count    u64 LE
//! per tensor:
//!   name_len u64 LE, name (UTF-8)
//!   rank     u64 LE, extents (u64 LE each)
//!   values   f32 LE, product(extents) of them
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSDRECCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: u64 = 8;
const MAX_NAME: u64 = 4096;

/// Tensors in archive order.
pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, &Tensor<f32>)]) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: impl Fn() -> String) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("{}: {e}", what())))?;
        Ok(buf)
    }

    fn u64(&mut self, what: impl Fn() -> String) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<NamedTensors> {
    let mut r = Reader { inner: r };
    let magic = r.bytes(8, || "checkpoint header".into())?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.bytes(4, || "checkpoint version".into())?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = r.u64(|| "tensor count".into())?;
    let mut out = Vec::new();
    for i in 0..count {
        let anon = move || format!("tensor #{i}");
        let name_len = r.u64(anon)?;
        if name_len > MAX_NAME {
            return Err(Error::Format(format!("tensor #{i}: name length {name_len} is implausible")));
        }
        let name = String::from_utf8(r.bytes(name_len as usize, anon)?)
            .map_err(|_| Error::Format(format!("tensor #{i}: name is not UTF-8")))?;
        let ctx = |what: &str| {
            let name = name.clone();
            let what = what.to_string();
            move || format!("tensor '{name}': truncated {what}")
        };
        let rank = r.u64(ctx("rank"))?;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("tensor '{name}': rank {rank} is implausible")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.u64(ctx("extents"))? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format(format!("tensor '{name}': extents {shape:?} overflow")))?;
        let raw = r.bytes(numel * 4, ctx("values"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor '{name}': {e}")))?;
        out.push((name, tensor));
    }
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), tensors).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NamedTensors> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        vec![
            ("emb.items".into(), Tensor::randn([5, 3], 1.0, &mut rng)),
            ("emb.mask".into(), Tensor::randn([3], 1.0, &mut rng)),
            ("scalar".into(), Tensor::scalar(f32::MIN_POSITIVE)),
            ("odd".into(), Tensor::new([2], vec![-0.0, f32::MAX]).unwrap()),
        ]
    }

    fn encode(ts: &[(String, Tensor<f32>)]) -> Vec<u8> {
        let refs: Vec<(String, &Tensor<f32>)> = ts.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &refs).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ts = sample();
        let back = read_checkpoint(&encode(&ts)[..]).unwrap();
        assert_eq!(back.len(), ts.len());
        for ((n0, t0), (n1, t1)) in ts.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let bits0: Vec<u32> = t0.data().iter().map(|v| v.to_bits()).collect();
            let bits1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits0, bits1);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let ts = sample();
        let refs: Vec<(String, &Tensor<f32>)> = ts.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_checkpoint(&path, &refs).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ts);
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn truncation_names_the_tensor() {
        let bytes = encode(&sample());
        // cut inside the values of the first tensor
        let cut = 8 + 4 + 8 + 8 + "emb.items".len() + 8 + 16 + 10;
        let err = read_checkpoint(&bytes[..cut]).unwrap_err().to_string();
        assert!(err.contains("emb.items"), "{err}");
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(read_checkpoint(&bytes[..]).is_err());
        let mut bytes = encode(&sample());
        bytes[8] = 9;
        assert!(read_checkpoint(&bytes[..]).unwrap_err().to_string().contains("version"));
        let mut bytes = encode(&sample());
        bytes.push(0);
        assert!(read_checkpoint(&bytes[..]).unwrap_err().to_string().contains("trailing"));
    }
}
