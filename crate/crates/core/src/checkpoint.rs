//! Binary checkpoint format.
//!
//! ```text
//! "CDPK"  u32 version
//! u64 config length, canonical config JSON
//! u32 dim, dim × f64 action min, dim × f64 action max
//! u64 optimizer step
//! u64 tensor count, then per tensor:
//!   u32 name length, UTF-8 name, u32 rank, rank × u64 dims, f32 data
//! ```
//!
//! All integers and floats are little-endian. Optimizer moments, when saved,
//! are ordinary tensors named `optim.m.<param>` and `optim.v.<param>`.

use std::path::Path;

use crate::config::RunConfig;
use crate::dataset::Normalizer;
use crate::error::{CdpError, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::training::TrainState;

pub const MAGIC: &[u8; 4] = b"CDPK";
pub const FORMAT_VERSION: u32 = 1;
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub normalizer: Normalizer,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn bad(msg: impl Into<String>) -> CdpError {
    CdpError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflows usize"))
    }
}

impl Checkpoint {
    pub fn from_state(config: &RunConfig, state: &TrainState, with_optimizer: bool) -> Self {
        let params = state.model.params();
        let mut tensors: Vec<(String, Tensor<f32>)> =
            params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        if with_optimizer {
            for (n, m) in params.names().iter().zip(&state.optim.m) {
                tensors.push((format!("{OPTIM_M}{n}"), m.clone()));
            }
            for (n, v) in params.names().iter().zip(&state.optim.v) {
                tensors.push((format!("{OPTIM_V}{n}"), v.clone()));
            }
        }
        Self {
            config: config.clone(),
            normalizer: state.normalizer.clone(),
            step: state.step,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = self.config.canonical_json();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.normalizer.dim() as u32).to_le_bytes());
        for v in self.normalizer.min.iter().chain(&self.normalizer.max) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let n = r.len()?;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| bad("config is not UTF-8"))?;
        let config = RunConfig::from_json(text)?;
        let dim = r.u32()? as usize;
        let min = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let max = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let step = r.u64()?;
        let count = r.len()?;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nl = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nl)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or_else(|| bad("tensor size overflows"))?;
            let bytes = r.take(numel.checked_mul(4).ok_or_else(|| bad("tensor size overflows"))?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            config,
            normalizer: Normalizer { min, max },
            step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }

    /// Fail unless `live` describes the same architecture as the echo.
    pub fn check_config(&self, live: &RunConfig) -> Result<()> {
        if self.config.architecture_json() != live.architecture_json() {
            return Err(bad(format!(
                "checkpoint config {} does not match live config {}",
                self.config.architecture_json(),
                live.architecture_json()
            )));
        }
        Ok(())
    }

    fn split(&self) -> (Vec<(String, Tensor<f32>)>, Vec<Tensor<f32>>, Vec<Tensor<f32>>) {
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (n, t) in &self.tensors {
            if n.starts_with(OPTIM_M) {
                m.push(t.clone());
            } else if n.starts_with(OPTIM_V) {
                v.push(t.clone());
            } else {
                params.push((n.clone(), t.clone()));
            }
        }
        (params, m, v)
    }

    pub fn model(&self) -> Result<Model<f32>> {
        let (params, _, _) = self.split();
        Model::from_params(self.config.model_config()?, params)
    }

    /// Rebuild training state; missing optimizer moments start at zero.
    pub fn train_state(&self) -> Result<TrainState> {
        let (params, m, v) = self.split();
        let model = Model::from_params(self.config.model_config()?, params)?;
        let mut optim = Adam::new(model.params().tensors());
        if !m.is_empty() {
            if m.len() != optim.m.len() || v.len() != optim.v.len() {
                return Err(bad("optimizer state does not match parameters"));
            }
            for (dst, src) in optim.m.iter_mut().chain(optim.v.iter_mut()).zip(m.into_iter().chain(v)) {
                if dst.shape() != src.shape() {
                    return Err(bad("optimizer tensor shape mismatch"));
                }
                *dst = src;
            }
        }
        optim.step = self.step;
        Ok(TrainState {
            model,
            normalizer: self.normalizer.clone(),
            optim,
            step: self.step,
        })
    }
}
