//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SCTKCKPT"
//! version    u32      1
//! config     u64 length + UTF-8 TOML (the full run configuration)
//! step       u64      optimizer steps taken
//! bytes_seen u64      training bytes consumed
//! adam_step  u64
//! count      u64      number of tensors
//! tensor*    u32 name length, UTF-8 name, u32 ndim, ndim x u64 dims,
//!            prod(dims) x f64 payload
//! ```
//!
//! Tensors are the model parameters in store order, then `adam.m/<name>` and
//! `adam.v/<name>` for each parameter.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SCTKCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub bytes_seen: u64,
    pub params: ParamStore,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend(VERSION.to_le_bytes());
        let cfg = self.config.to_toml()?;
        out.extend((cfg.len() as u64).to_le_bytes());
        out.extend(cfg.as_bytes());
        out.extend(self.step.to_le_bytes());
        out.extend(self.bytes_seen.to_le_bytes());
        out.extend(self.adam.step.to_le_bytes());
        out.extend((3 * self.params.len() as u64).to_le_bytes());
        for (name, t) in self.params.iter() {
            write_tensor(&mut out, name, t.shape(), t.data());
        }
        for (prefix, bufs) in [("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)] {
            for ((name, t), buf) in self.params.iter().zip(bufs) {
                write_tensor(&mut out, &format!("{prefix}{name}"), t.shape(), buf);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(bytes);
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = RunConfig::from_toml(text)?;
        let step = r.u64()?;
        let bytes_seen = r.u64()?;
        let adam_step = r.u64()?;
        let count = r.u64()? as usize;
        if count % 3 != 0 {
            return Err(Error::Checkpoint(format!("{count} tensors is not params + two moments")));
        }
        let mut params = ParamStore::new();
        let mut moments = Vec::with_capacity(2 * count / 3);
        for i in 0..count {
            let (name, t) = read_tensor(&mut r)?;
            if i < count / 3 {
                if params.id(&name).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
                }
                params.add(name, t);
            } else {
                let k = (i - count / 3) % (count / 3);
                let prefix = if i < 2 * count / 3 { "adam.m/" } else { "adam.v/" };
                let param = params.tensors()[k].shape();
                let want = format!("{prefix}{}", params.name(params.ids().nth(k).expect("k < len")));
                if name != want || t.shape() != param {
                    return Err(Error::Checkpoint(format!("expected {want}, found {name}")));
                }
                moments.push(t.into_data());
            }
        }
        if !r.0.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let v = moments.split_off(count / 3);
        let ckpt = Self {
            config,
            step,
            bytes_seen,
            params,
            adam: AdamState {
                step: adam_step,
                m: moments,
                v,
            },
        };
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend((d as u64).to_le_bytes());
    }
    for x in data {
        out.extend(x.to_le_bytes());
    }
}

fn read_tensor(r: &mut Reader<'_>) -> Result<(String, Tensor)> {
    let len = r.u32()? as usize;
    let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
    let ndim = r.u32()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    let numel: usize = shape.iter().product();
    let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
