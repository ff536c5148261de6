//! Checkpoint container. Little-endian layout:
//!
//! ```text
//! "GBCK"  u32 version=1  u8 dtype (4 = f32, 8 = f64)  u32 config_hash
//! u32 len + config text (`key = value` lines)
//! u32 count + { u16 len + key, u32 len + value }         metadata
//! u32 count + { u16 len + name, u8 ndim, u32 dims[ndim], data }
//! u32 crc32 of everything before it
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::config::ModelConfig;
use super::model::Gabic;
use super::params::ParamStore;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"GBCK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn of<S: Real>() -> Self {
        if S::NAME == "f64" {
            Dtype::F64
        } else {
            Dtype::F32
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Values widened to f64; narrowing back to the stored dtype is exact.
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub dtype: Dtype,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model<S: Real>(model: &Gabic<S>) -> Self {
        let mut ck = Checkpoint {
            config: model.config().clone(),
            dtype: Dtype::of::<S>(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        };
        for (name, t) in model.params().iter() {
            ck.push(name, t);
        }
        ck
    }

    pub fn push<S: Real>(&mut self, name: &str, t: &Tensor<S>) {
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.f64()).collect(),
        });
    }

    pub fn tensor<S: Real>(&self, name: &str) -> Option<Tensor<S>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| {
            Tensor::new(&t.shape, t.data.iter().map(|&v| S::of(v)).collect()).expect("validated on load")
        })
    }

    /// Rebuild the model; tensors not belonging to it are ignored.
    pub fn to_model<S: Real>(&self) -> Result<Gabic<S>> {
        let template = Gabic::<S>::new(self.config.clone(), 0)?;
        let mut params: ParamStore<S> = ParamStore::new();
        for (name, t) in template.params().iter() {
            let stored = self
                .tensor::<S>(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter `{name}`")))?;
            if stored.shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter `{name}` is {:?} in the checkpoint, model expects {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            params.add(name, stored);
        }
        Gabic::from_params(self.config.clone(), params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype.width() as u8);
        out.extend_from_slice(&self.config.hash().to_le_bytes());
        let text = self.config.canonical_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                match self.dtype {
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("checkpoint shorter than its checksum".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error("bad magic, not a checkpoint"));
        }
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let dtype = match r.u8()? {
            4 => Dtype::F32,
            8 => Dtype::F64,
            w => return Err(r.error(format!("unknown dtype width {w}"))),
        };
        let hash = r.u32()?;
        let len = r.u32()? as usize;
        let text = r.string(len)?;
        let config = ModelConfig::from_kv(&KeyValues::parse(&text)?, ModelConfig::toy())?;
        if config.hash() != hash {
            return Err(Error::ConfigMismatch {
                stream: hash,
                model: config.hash(),
            });
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let kl = r.u16()? as usize;
            let k = r.string(kl)?;
            let vl = r.u32()? as usize;
            meta.insert(k, r.string(vl)?);
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nl = r.u16()? as usize;
            let name = r.string(nl)?;
            let ndim = r.u8()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            if ndim == 0 || shape.contains(&0) {
                return Err(r.error(format!("tensor `{name}` has empty shape {shape:?}")));
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| r.error("tensor too large"))?;
            let raw = r.take(n.checked_mul(dtype.width()).ok_or_else(|| r.error("tensor too large"))?)?;
            let data = match dtype {
                Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(r.error("trailing bytes after last tensor"));
        }
        Ok(Checkpoint {
            config,
            dtype,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(Error::at_path(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(Error::at_path(path))?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            kind: "checkpoint",
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "checkpoint needs {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let pos = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            kind: "checkpoint",
            pos,
            msg: "invalid UTF-8".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            channels: 8,
            latent_channels: 8,
            hyper_channels: 4,
            slices: 2,
            slice_hidden: 8,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Gabic::<f32>::new(small(), 3).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.meta.insert("step".into(), "42".into());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let m2: Gabic<f32> = back.to_model().unwrap();
        assert_eq!(m2.params(), model.params());
    }

    #[test]
    fn f64_round_trip() {
        let model = Gabic::<f64>::new(small(), 4).unwrap();
        let ck = Checkpoint::from_model(&model);
        assert_eq!(ck.dtype, Dtype::F64);
        let m2: Gabic<f64> = Checkpoint::from_bytes(&ck.to_bytes()).unwrap().to_model().unwrap();
        assert_eq!(m2.params(), model.params());
    }

    #[test]
    fn corruption_is_detected() {
        let model = Gabic::<f32>::new(small(), 5).unwrap();
        let bytes = Checkpoint::from_model(&model).to_bytes();
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checksum { .. })));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
        assert!(Checkpoint::from_bytes(b"GBC").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { pos: 4, .. })));
    }
}
