//! `AECK1` checkpoints.
//!
//! ```text
//! "AECK1\n"                         magic
//! u32 x4 channels, u32 bottleneck   architecture
//! u32 layer count
//! per layer: weight tensor, bias tensor
//! tensor: u32 ndim, u32 dims[ndim], f32 values (row-major)
//! ```
//!
//! Integers and floats are little-endian.

use super::{Arch, Autoencoder, Layer, Scalar};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"AECK1\n";

impl<T: Scalar> Autoencoder<T> {
    /// Serialises parameters as float32 tensors.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.param_count() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let arch = self.arch();
        for v in arch.channels.iter().chain(std::iter::once(&arch.bottleneck)) {
            out.extend_from_slice(&(*v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            write_tensor(&mut out, &layer.spec.weight_dims(), &layer.weight);
            write_tensor(&mut out, &[layer.bias.len()], &layer.bias);
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "missing AECK1 magic"));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let arch = Arch {
            channels: [dims[0], dims[1], dims[2], dims[3]],
            bottleneck: dims[4],
        };
        let specs = arch.validate()?;
        let at = r.pos;
        let count = r.u32()? as usize;
        if count != specs.len() {
            return Err(Error::format(
                at as u64,
                format!("expected {} layers, found {count}", specs.len()),
            ));
        }
        let mut layers = Vec::with_capacity(count);
        for spec in specs {
            let weight = r.tensor(&spec.weight_dims())?;
            let bias = r.tensor(&[spec.bias_len()])?;
            layers.push(Layer { spec, weight, bias });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after last tensor"));
        }
        Ok(Autoencoder { arch, layers })
    }
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, dims: &[usize], values: &[T]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated: needed {n} bytes at {}", self.pos),
            )),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor<T: Scalar>(&mut self, expected: &[usize]) -> Result<Vec<T>> {
        let at = self.pos as u64;
        let ndim = self.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != expected {
            return Err(Error::format(
                at,
                format!("tensor shape {dims:?}, expected {expected:?}"),
            ));
        }
        let n: usize = dims.iter().product();
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
            .collect())
    }
}
