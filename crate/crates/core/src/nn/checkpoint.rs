//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TMCK" | version u8 | tensor count u32
//! per tensor: name len u32 | name utf-8 | ndim u32 | dims u64 * ndim | f32 payload
//! config len u64 | config JSON text
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::Array2;

use super::{NnError, Parameterized};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TMCK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub config: String,
}

fn format_err(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Snapshot of every parameter (frozen ones included) in visit order.
    pub fn from_params(module: &dyn Parameterized, config: String) -> Self {
        let mut tensors = Vec::new();
        module.visit(&mut |p| {
            tensors.push(NamedTensor {
                name: p.name().to_string(),
                shape: p.value.shape().to_vec(),
                data: p.value.iter().map(|&v| v as f32).collect(),
            });
        });
        Self { tensors, config }
    }

    /// Copies stored values into `module` by name. Every parameter must be present
    /// with a matching shape.
    pub fn load_into(&self, module: &mut dyn Parameterized) -> Result<(), NnError> {
        let by_name: HashMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut err = None;
        module.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match by_name.get(p.name()) {
                None => err = Some(format_err(format!("missing tensor '{}'", p.name()))),
                Some(t) if t.shape != p.value.shape() => {
                    err = Some(format_err(format!(
                        "tensor '{}' has shape {:?}, expected {:?}",
                        p.name(),
                        t.shape,
                        p.value.shape()
                    )))
                }
                Some(t) => {
                    let (r, c) = p.value.dim();
                    p.value = Array2::from_shape_vec((r, c), t.data.iter().map(|&v| f64::from(v)).collect())
                        .expect("shape checked");
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<(), NnError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.push(CHECKPOINT_VERSION);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        buf.extend_from_slice(self.config.as_bytes());
        sink.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut source: R) -> Result<Self, NnError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(format_err(format!(
                "bad magic {:?}, expected \"TMCK\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = cur.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!("TMCK version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| format_err("tensor name is not utf-8"))?;
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| format_err("tensor too large"))?;
            let payload = cur.take(numel.checked_mul(4).ok_or_else(|| format_err("tensor too large"))?)?;
            let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite(format!("checkpoint tensor '{name}'")));
            }
            tensors.push(NamedTensor { name, shape, data });
        }
        let config_len = cur.u64()? as usize;
        let config = String::from_utf8(cur.take(config_len)?.to_vec()).map_err(|_| format_err("config is not utf-8"))?;
        if cur.pos != bytes.len() {
            return Err(format_err(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Self { tensors, config })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| format_err("truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
