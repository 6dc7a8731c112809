//! Binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "CSRNET01"
//! u32 layer_count
//! layer_count x { u8 kind, u32 in, u32 out, u32 kernel, u32 stride, u32 pad }
//! u64 rng_seed
//! for each of weights, adam_m, adam_v:
//!     for each parameter tensor: u64 len, len x f64
//! u64 step_count
//! ```

use std::path::Path;

use super::{param_shapes, validate_architecture, LayerKind, LayerSpec, NetState};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSRNET01";

fn kind_code(k: LayerKind) -> u8 {
    match k {
        LayerKind::Conv => 0,
        LayerKind::TransposedConv => 1,
        LayerKind::Relu => 2,
        LayerKind::HeadSplit => 3,
    }
}

fn kind_from(code: u8) -> Result<LayerKind> {
    Ok(match code {
        0 => LayerKind::Conv,
        1 => LayerKind::TransposedConv,
        2 => LayerKind::Relu,
        3 => LayerKind::HeadSplit,
        other => return Err(Error::Format(format!("unknown layer kind {other}"))),
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expected: usize) -> Result<Vec<f64>> {
        let len = self.u64()? as usize;
        if len != expected {
            return Err(Error::Format(format!("tensor length {len}, architecture expects {expected}")));
        }
        let bytes = self.take(len.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl NetState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.param_count() * 24);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.push(kind_code(l.kind));
            for v in [l.in_channels, l.out_channels, l.kernel, l.stride, l.pad] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        for block in [&self.weights, &self.adam_m, &self.adam_v] {
            for t in block {
                out.extend_from_slice(&(t.len() as u64).to_le_bytes());
                for v in t {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.step_count.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let n = r.u32()? as usize;
        if n > 4096 {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let kind = kind_from(r.u8()?)?;
            let mut f = [0usize; 5];
            for v in &mut f {
                *v = r.u32()? as usize;
            }
            layers.push(LayerSpec { kind, in_channels: f[0], out_channels: f[1], kernel: f[2], stride: f[3], pad: f[4] });
        }
        validate_architecture(&layers).map_err(|e| Error::Format(e.to_string()))?;
        let rng_seed = r.u64()?;
        let shapes = param_shapes(&layers);
        let mut blocks = Vec::with_capacity(3);
        for _ in 0..3 {
            let block: Vec<Vec<f64>> = shapes.iter().map(|&len| r.tensor(len)).collect::<Result<_>>()?;
            blocks.push(block);
        }
        let step_count = r.u64()?;
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let adam_v = blocks.pop().unwrap();
        let adam_m = blocks.pop().unwrap();
        let weights = blocks.pop().unwrap();
        if weights.iter().chain(&adam_m).chain(&adam_v).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite value in checkpoint".into()));
        }
        Ok(Self { layers, weights, adam_m, adam_v, step_count, rng_seed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    /// Reads a checkpoint; format problems surface as `InvalidData`.
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
