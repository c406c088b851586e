//! Binary checkpoints: parameters, Adam moments, generator positions and
//! the best validation record.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "W2VS" | u32 version | u64 step
//! params:    u32 count, then per tensor
//!            u16 name length, name, u8 dtype, u8 rank, rank x u64 dims, scalars
//! optimizer: same tensor encoding, names "m/<param>" and "v/<param>"
//! rng:       u32 count, then u16 name length, name, u64 seed, u64 stream id, u64 counter
//! best:      u8 present, f64 loss, u64 step
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::RngState;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"W2VS";
pub const VERSION: u32 = 1;

/// Lowest validation loss seen so far and the step it was measured at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BestRecord {
    pub loss: f64,
    pub step: u64,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    /// Completed optimization steps.
    pub step: u64,
    pub params: ParamSet<T>,
    /// First Adam moments, same names as `params`.
    pub m: ParamSet<T>,
    /// Second Adam moments.
    pub v: ParamSet<T>,
    pub rng: Vec<(String, RngState)>,
    pub best: Option<BestRecord>,
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::usage(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    put_name(out, name)?;
    out.push(T::DTYPE.code());
    let rank = u8::try_from(t.rank()).map_err(|_| Error::usage(format!("tensor {name} has rank {}", t.rank())))?;
    out.push(rank);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
    Ok(())
}

fn put_tensors<T: Scalar>(out: &mut Vec<u8>, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    let count = u32::try_from(tensors.len()).map_err(|_| Error::usage("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        put_tensor(out, name, t)?;
    }
    Ok(())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(12 * self.params.num_elements() + 1024);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let params: Vec<_> = self.params.iter().map(|(k, t)| (k.to_string(), t)).collect();
        put_tensors(&mut out, &params)?;
        let moments: Vec<_> = self
            .m
            .iter()
            .map(|(k, t)| (format!("m/{k}"), t))
            .chain(self.v.iter().map(|(k, t)| (format!("v/{k}"), t)))
            .collect();
        put_tensors(&mut out, &moments)?;
        let count = u32::try_from(self.rng.len()).map_err(|_| Error::usage("too many generators"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, s) in &self.rng {
            put_name(&mut out, name)?;
            for x in [s.seed, s.stream_id, s.counter] {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let (has, loss, step) = match self.best {
            Some(b) => (1u8, b.loss, b.step),
            None => (0, 0.0, 0),
        };
        out.push(has);
        out.extend_from_slice(&loss.to_le_bytes());
        out.extend_from_slice(&step.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("not a checkpoint: bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let step = r.u64()?;
        let mut params = ParamSet::new();
        for _ in 0..r.u32()? {
            let (name, t) = r.tensor::<T>()?;
            params.insert(name, t);
        }
        let (mut m, mut v) = (ParamSet::new(), ParamSet::new());
        for _ in 0..r.u32()? {
            let (name, t) = r.tensor::<T>()?;
            match name.split_once('/') {
                Some(("m", p)) => m.insert(p, t),
                Some(("v", p)) => v.insert(p, t),
                _ => return Err(Error::format(format!("unexpected optimizer entry '{name}'"))),
            }
        }
        let mut rng = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let state = RngState {
                seed: r.u64()?,
                stream_id: r.u64()?,
                counter: r.u64()?,
            };
            rng.push((name, state));
        }
        let has = r.take(1)?[0];
        let loss = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let best_step = r.u64()?;
        let best = match has {
            0 => None,
            1 => Some(BestRecord { loss, step: best_step }),
            x => return Err(Error::format(format!("bad best-record flag {x}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            step,
            params,
            m,
            v,
            rng,
            best,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(format!("truncated checkpoint: wanted {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes"));
        String::from_utf8(self.take(len as usize)?.to_vec()).map_err(|_| Error::format("name is not UTF-8"))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = self.name()?;
        let code = self.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::format(format!("tensor {name}: unknown dtype {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::format(format!(
                "tensor {name} is {}, expected {}",
                dtype.name(),
                T::DTYPE.name()
            )));
        }
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = usize::try_from(self.u64()?).map_err(|_| Error::format(format!("tensor {name}: dimension overflow")))?;
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::format(format!("tensor {name}: size overflow")))?;
        let data = self.take(n)?.chunks_exact(dtype.size()).map(T::read_le).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut params = ParamSet::new();
        params.insert("a.weight", Tensor::from_f64([2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-7, -0.25]).unwrap());
        params.insert("a.bias", Tensor::from_f64([3], &[0.5, 0.25, -1.0]).unwrap());
        let m = params.zeros_like();
        let v = params.zeros_like();
        Checkpoint {
            step: 17,
            params,
            m,
            v,
            rng: vec![(
                "mask".into(),
                RngState {
                    seed: 1,
                    stream_id: 2,
                    counter: 3,
                },
            )],
            best: Some(BestRecord { loss: 1.5, step: 10 }),
        }
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert!(back.params.bit_eq(&ck.params));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::Format(_))));
        for cut in [3, 11, 40, bytes.len() - 1] {
            assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(Error::Format(_))));
    }
}
