//! Checkpoint files and the byte reader shared with the dataset format.
//!
//! Checkpoints are little-endian:
//!
//! ```text
//! "AKDC" | u32 version=1 | u32 len | utf8 descriptor | u32 tensor count
//! | per tensor: u32 len | utf8 name | u32 rank | u32 dims[rank] | f32 values[prod(dims)]
//! ```
//!
//! Model checkpoints carry two extra tensors: `meta.input_shape` and,
//! for trained teachers, `meta.val_accuracy`.

use std::path::Path;

use crate::adapter::AdapterParams;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AKDC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const ADAPTER_DESCRIPTOR: &str = "adapter";

const META_INPUT_SHAPE: &str = "meta.input_shape";
const META_VAL_ACCURACY: &str = "meta.val_accuracy";

/// Cursor over a byte slice that reports positioned format errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("truncated {what}: expected {n} bytes, found {remaining}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::Format {
                offset: at,
                reason: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, expected: u32) -> Result<()> {
        let at = self.pos;
        let v = self.u32()?;
        if v != expected {
            return Err(Error::Format {
                offset: at,
                reason: format!("unsupported version {v}, expected {expected}"),
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "u8")?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4, "u32")?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        let b = self.take(4, "f32")?;
        Ok(f32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at,
            reason: format!("{what} is not valid UTF-8"),
        })
    }

    /// Requires exactly `n` bytes to remain.
    pub(crate) fn expect_exact(&self, n: usize) -> Result<()> {
        let remaining = self.bytes.len() - self.pos;
        if remaining != n {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("payload length mismatch: expected {n} bytes, found {remaining}"),
            });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: String,
    pub tensors: Vec<NamedTensor>,
}

fn u32_of(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Data(format!("{what} {v} does not fit in u32")))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(self.descriptor.len(), "descriptor length")?);
        out.extend_from_slice(self.descriptor.as_bytes());
        out.extend_from_slice(&u32_of(self.tensors.len(), "tensor count")?);
        for t in &self.tensors {
            if t.dims.iter().product::<usize>() != t.values.len() {
                return Err(Error::Data(format!(
                    "tensor {} has dims {:?} but {} values",
                    t.name,
                    t.dims,
                    t.values.len()
                )));
            }
            out.extend_from_slice(&u32_of(t.name.len(), "name length")?);
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&u32_of(t.dims.len(), "rank")?);
            for &d in &t.dims {
                out.extend_from_slice(&u32_of(d, "dimension")?);
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let descriptor = r.string("descriptor")?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let at = r.offset();
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Format {
                    offset: at,
                    reason: format!("tensor {name} declares impossible dims {dims:?}"),
                })?;
            let values = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            tensors.push(NamedTensor { name, dims, values });
        }
        r.finish()?;
        Ok(Checkpoint { descriptor, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn named(name: &str, t: &Tensor) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        dims: t.dims().to_vec(),
        values: t.values().iter().map(|&v| v as f32).collect(),
    }
}

fn tensor_of(nt: &NamedTensor) -> Result<Tensor> {
    Tensor::new(nt.dims.clone(), nt.values.iter().map(|&v| f64::from(v)).collect())
}

/// Serializes a model; parameters are stored as `f32`.
pub fn model_to_checkpoint(model: &Model, val_accuracy: Option<f64>) -> Checkpoint {
    let mut tensors: Vec<NamedTensor> = model.params().iter().map(|(n, t)| named(n, t)).collect();
    let shape: Vec<f64> = model.input_shape().iter().map(|&d| d as f64).collect();
    tensors.push(named(META_INPUT_SHAPE, &Tensor::from_vec(shape)));
    if let Some(acc) = val_accuracy {
        tensors.push(named(META_VAL_ACCURACY, &Tensor::from_vec(vec![acc])));
    }
    Checkpoint {
        descriptor: model.descriptor().to_string(),
        tensors,
    }
}

/// Rebuilds a model (and its stored validation accuracy, if any).
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Model, Option<f64>)> {
    let shape = ckpt
        .get(META_INPUT_SHAPE)
        .ok_or_else(|| Error::State(format!("checkpoint lacks {META_INPUT_SHAPE}")))?;
    let input_shape: Vec<usize> = shape.values.iter().map(|&v| v as usize).collect();
    let mut model = Model::from_descriptor(&ckpt.descriptor, &input_shape, 0)?;
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let stored = ckpt
            .get(&name)
            .ok_or_else(|| Error::State(format!("checkpoint lacks parameter {name}")))?;
        let param = model.param_mut(&name).expect("name taken from model");
        if stored.dims != param.dims() {
            return Err(Error::State(format!(
                "parameter {name}: checkpoint dims {:?}, model dims {:?}",
                stored.dims,
                param.dims()
            )));
        }
        for (dst, &src) in param.values_mut().iter_mut().zip(&stored.values) {
            *dst = f64::from(src);
        }
    }
    let acc = ckpt
        .get(META_VAL_ACCURACY)
        .and_then(|t| t.values.first())
        .map(|&v| f64::from(v));
    Ok((model, acc))
}

pub fn adapter_to_checkpoint(adapter: &AdapterParams) -> Checkpoint {
    let mut tensors: Vec<NamedTensor> = adapter
        .thetas()
        .iter()
        .enumerate()
        .map(|(t, theta)| named(&format!("theta.{t}"), theta))
        .collect();
    tensors.push(named("nu", adapter.nu()));
    Checkpoint {
        descriptor: ADAPTER_DESCRIPTOR.to_string(),
        tensors,
    }
}

pub fn adapter_from_checkpoint(ckpt: &Checkpoint) -> Result<AdapterParams> {
    if ckpt.descriptor != ADAPTER_DESCRIPTOR {
        return Err(Error::State(format!(
            "expected an adapter checkpoint, found descriptor {:?}",
            ckpt.descriptor
        )));
    }
    let nu = tensor_of(
        ckpt.get("nu")
            .ok_or_else(|| Error::State("adapter lacks nu".into()))?,
    )?;
    let mut thetas = Vec::new();
    while let Some(t) = ckpt.get(&format!("theta.{}", thetas.len())) {
        thetas.push(tensor_of(t)?);
    }
    AdapterParams::from_parts(thetas, nu)
}
