//! Binary checkpoint container.
//!
//! ```text
//! magic "DCONVCKP" | u32 version
//! u64 len | config JSON
//! u64 len | state-normalization JSON ("null" when absent)
//! u64 step
//! u32 count, then per parameter:
//!     u32 len | name, u32 ndim, u64 dims..., f64 values
//! u8 has_optimizer, then when 1:
//!     u64 len | optimizer config JSON, u64 optimizer step,
//!     first moments and second moments as f64 runs in parameter order
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Model, ModelConfig, ModelError};
use crate::data::NormStats;
use crate::tensor::{AdamWConfig, OptimState, Tensor};

const MAGIC: &[u8; 8] = b"DCONVCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {msg} (byte offset {offset})")]
    Corrupt { path: String, offset: u64, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type OptimSnapshot = OptimState;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub norm: Option<NormStats>,
    /// Completed updates.
    pub step: u64,
    pub optim: Option<OptimSnapshot>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_bytes(&mut out, &serde_json::to_vec(self.model.config()).expect("config serializes"));
        put_bytes(&mut out, &serde_json::to_vec(&self.norm).expect("stats serialize"));
        put_u64(&mut out, self.step);
        put_u32(&mut out, self.model.params().len() as u32);
        for (name, t) in self.model.param_names().iter().zip(self.model.params()) {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &e in t.shape() {
                put_u64(&mut out, e as u64);
            }
            put_f64s(&mut out, t.data());
        }
        match &self.optim {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                put_bytes(&mut out, &serde_json::to_vec(&o.config).expect("optimizer config serializes"));
                put_u64(&mut out, o.step_count());
                for m in o.first_moments().iter().chain(o.second_moments()) {
                    put_f64s(&mut out, m);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let config: ModelConfig = r.json()?;
        let norm: Option<NormStats> = r.json()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("parameter name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = r.f64s(n)?;
            named.push((name, Tensor::new(shape, data).map_err(|e| r.err(&e.to_string()))?));
        }
        let optim = match r.take(1)?[0] {
            0 => None,
            1 => {
                let oc: AdamWConfig = r.json()?;
                let ostep = r.u64()?;
                let lens: Vec<usize> = named.iter().map(|(_, t)| t.len()).collect();
                let first = lens.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>, _>>()?;
                let second = lens.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>, _>>()?;
                Some(OptimState::from_parts(oc, ostep, first, second).map_err(|e| r.err(&e.to_string()))?)
            }
            b => return Err(r.err(&format!("bad optimizer flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        let model = Model::from_named(config, named)?;
        Ok(Self { model, norm, step, optim })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Reader<'_> {
    fn err(&self, msg: &str) -> CheckpointError {
        CheckpointError::Corrupt {
            path: self.path.to_string(),
            offset: self.pos as u64,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(&format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self) -> Result<T, CheckpointError> {
        let len = self.u64()? as usize;
        let raw = self.take(len)?;
        serde_json::from_slice(raw).map_err(|e| {
            let msg = format!("bad JSON block: {e}");
            self.err(&msg)
        })
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    // write to a sibling then rename so a crash never leaves half a file
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(&ckpt.to_bytes()).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = vec![];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}
