//! Little-endian binary parameter checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic    b"SRCK"
//! version  u32 (= 1)
//! arch     u32 length + UTF-8 architecture description
//! count    u32
//! count × { name: u32 length + UTF-8
//!           dtype: u8 (4 = f32, 8 = f64)
//!           ndim: u32, dims: ndim × u64
//!           data: prod(dims) little-endian floats }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SRCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub arch: String,
    pub tensors: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.arch);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(F::BYTES);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.to_le(&mut out);
            }
        }
        out
    }

    /// Parses a checkpoint, converting stored values to `F` if needed.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::parse("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::parse(
                "checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let arch = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::parse("checkpoint", format!("{ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data: Vec<F> = match dtype {
                4 => r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| F::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect(),
                8 => r
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| F::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
                d => return Err(Error::parse("checkpoint", format!("unknown dtype {d}"))),
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::parse("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint { arch, tensors })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::parse("checkpoint", "truncated"))?;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::parse("checkpoint", "invalid UTF-8"))
    }
}

/// Writes atomically: the bytes go to a sibling temp file that is then renamed.
pub fn save_checkpoint<F: Scalar>(path: &Path, ckpt: &Checkpoint<F>) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&fs::read(path)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f64> {
        Checkpoint {
            arch: "refiner depth=2 width=3 heads=4".into(),
            tensors: vec![
                ("a".into(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0)),
                ("b".into(), Tensor::scalar(7.25)),
            ],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn header_is_little_endian() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"SRCK");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
    }

    #[test]
    fn truncated_and_corrupt_inputs_fail() {
        let b = sample().to_bytes();
        for cut in [3, 10, b.len() - 1] {
            assert!(Checkpoint::<f64>::from_bytes(&b[..cut]).is_err());
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f64>::from_bytes(&bad).is_err());
    }

    #[test]
    fn file_round_trip_and_precision_conversion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back.get("b").unwrap().item(), 7.25f32);
        assert!(load_checkpoint::<f32>(&dir.path().join("missing")).is_err());
    }
}
