//! Binary checkpoint of a finished run.
//!
//! Layout, all integers little-endian `u64` unless noted:
//!
//! ```text
//! "SQWM"  version:u32
//! config_len  config JSON bytes
//! n_params    tensor × n_params
//! n_moments   tensor × n_moments      m.<name> ..., then v.<name> ...
//! adam_t      adam_config_len  adam config JSON bytes
//! step  tokens_consumed
//!
//! tensor := name_len  name bytes  rank  dim × rank  f64 × numel
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SQWM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub adam: AdamState,
    pub step: u64,
    pub tokens_consumed: u64,
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_bytes(out, name.as_bytes());
    put_u64(out, t.rank() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_bytes(&mut out, &serde_json::to_vec(self.params.config())?);

        let names = self.params.names();
        put_u64(&mut out, names.len() as u64);
        for (name, t) in names.iter().zip(self.params.tensors()) {
            put_tensor(&mut out, name, t);
        }

        put_u64(&mut out, (self.adam.m.len() + self.adam.v.len()) as u64);
        for (prefix, bufs) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for (name, t) in names.iter().zip(bufs) {
                put_tensor(&mut out, &format!("{prefix}.{name}"), t);
            }
        }
        put_u64(&mut out, self.adam.t);
        put_bytes(&mut out, &serde_json::to_vec(&self.adam.config)?);

        put_u64(&mut out, self.step);
        put_u64(&mut out, self.tokens_consumed);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Data("not a checkpoint: bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let config: ModelConfig = serde_json::from_slice(r.bytes()?)?;
        config.validate()?;

        let n = r.u64()? as usize;
        let mut named = Vec::with_capacity(n);
        for _ in 0..n {
            named.push(r.tensor()?);
        }
        let params = Parameters::from_named(config, named)?;

        let n_moments = r.u64()? as usize;
        if n_moments != 2 * params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {n_moments} moment tensors for {} parameters",
                params.len()
            )));
        }
        let mut moments = Vec::with_capacity(n_moments);
        for i in 0..n_moments {
            let (name, t) = r.tensor()?;
            let k = i % params.len();
            let prefix = if i < params.len() { "m" } else { "v" };
            let want = format!("{prefix}.{}", params.names()[k]);
            if name != want || t.shape() != params.tensors()[k].shape() {
                return Err(Error::Data(format!(
                    "moment tensor {name} {:?} does not match {want} {:?}",
                    t.shape(),
                    params.tensors()[k].shape()
                )));
            }
            moments.push(t);
        }
        let v = moments.split_off(params.len());
        let t = r.u64()?;
        let adam_config: AdamConfig = serde_json::from_slice(r.bytes()?)?;
        let adam = AdamState {
            config: adam_config,
            m: moments,
            v,
            t,
        };

        let step = r.u64()?;
        let tokens_consumed = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Data(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            params,
            adam,
            step,
            tokens_consumed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Data(format!("checkpoint truncated at byte {}", self.pos))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
        let rank = self.u64()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Data(format!("tensor {name} shape overflows")))?;
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| {
            Error::Data(format!("tensor {name} shape overflows"))
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}
