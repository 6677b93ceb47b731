//! Flat little-endian checkpoint of a run: config, progress counters and
//! every named parameter with its Adam moments.
//!
//! Layout: magic `DAVC`, `u32` version, `u32` config length + config JSON,
//! `u64` step, `u64` epochs done, `f64` best validation avg mAP, `u32`
//! parameter count, then per parameter `u32` name length, name, `u32` rank,
//! `u32` dims, `u64` Adam step count and three `f32` payloads (value, first
//! moment, second moment).

use std::fs;
use std::path::Path;

use davel_tensor::{ParamStore, Tensor};

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 4] = b"DAVC";
const VERSION: u32 = 1;

/// Progress counters stored alongside the parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    pub step: u64,
    pub epochs_done: u64,
    /// Best validation score so far; `-inf` before the first evaluation.
    pub best_val: f64,
}

impl Default for Progress {
    fn default() -> Self {
        Self {
            step: 0,
            epochs_done: 0,
            best_val: f64::NEG_INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    step_count: u64,
    value: Vec<f32>,
    adam_m: Vec<f32>,
    adam_v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub progress: Progress,
    params: Vec<StoredParam>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.fail("size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, progress: Progress, store: &ParamStore<f32>) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| StoredParam {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                step_count: p.step_count,
                value: p.value.data().to_vec(),
                adam_m: p.adam_m.clone(),
                adam_v: p.adam_v.clone(),
            })
            .collect();
        Self {
            config: config.clone(),
            progress,
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = MAGIC.to_vec();
        put_u32(&mut buf, VERSION);
        let json = serde_json::to_vec(&self.config)?;
        put_u32(&mut buf, json.len() as u32);
        buf.extend_from_slice(&json);
        buf.extend_from_slice(&self.progress.step.to_le_bytes());
        buf.extend_from_slice(&self.progress.epochs_done.to_le_bytes());
        buf.extend_from_slice(&self.progress.best_val.to_bits().to_le_bytes());
        put_u32(&mut buf, self.params.len() as u32);
        for p in &self.params {
            put_u32(&mut buf, p.name.len() as u32);
            buf.extend_from_slice(p.name.as_bytes());
            put_u32(&mut buf, p.shape.len() as u32);
            for &d in &p.shape {
                put_u32(&mut buf, d as u32);
            }
            buf.extend_from_slice(&p.step_count.to_le_bytes());
            put_f32s(&mut buf, &p.value);
            put_f32s(&mut buf, &p.adam_m);
            put_f32s(&mut buf, &p.adam_v);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            r.pos = 0;
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let json_len = r.u32()? as usize;
        let config: RunConfig = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::Version(format!("unreadable embedded config: {e}")))?;
        let step = r.u64()?;
        let epochs_done = r.u64()?;
        let best_val = f64::from_bits(r.u64()?);
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.fail("parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let step_count = r.u64()?;
            let value = r.f32s(n)?;
            let adam_m = r.f32s(n)?;
            let adam_v = r.f32s(n)?;
            params.push(StoredParam { name, shape, step_count, value, adam_m, adam_v });
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes"));
        }
        Ok(Self {
            config,
            progress: Progress { step, epochs_done, best_val },
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies the stored parameters into `store`, which must have exactly
    /// the same names and shapes.
    pub fn restore(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Version(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for sp in &self.params {
            let id = store
                .id(&sp.name)
                .ok_or_else(|| Error::Version(format!("model has no parameter {}", sp.name)))?;
            let p = store.get_mut(id);
            if p.value.shape() != sp.shape.as_slice() {
                return Err(Error::Version(format!(
                    "parameter {} has shape {:?} in checkpoint, {:?} in model",
                    sp.name,
                    sp.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(sp.shape.clone(), sp.value.clone())?;
            p.adam_m.clone_from(&sp.adam_m);
            p.adam_v.clone_from(&sp.adam_v);
            p.step_count = sp.step_count;
        }
        Ok(())
    }
}
