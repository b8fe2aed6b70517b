//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CAAI1"  u8 float width (4 or 8)
//! u32 len, config text
//! u64 seed, u64 epochs done
//! u64 count, f64 × count          loss history
//! u64 count, then per parameter:
//!     u32 len, name, u8 rank, u64 × rank dims, data
//! u8 has_velocity, then per parameter (if set): data
//! ```
//!
//! Tensor data is stored at the float width in the header and converted on
//! load.

use std::fs;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::CaaiNet;
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};
use crate::train::{Sgd, TrainState};

pub const MAGIC: &[u8; 5] = b"CAAI1";

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: Config,
    pub seed: u64,
    pub epochs_done: usize,
    pub loss_history: Vec<f64>,
    pub params: Vec<(String, Tensor<T>)>,
    pub velocity: Option<Vec<Tensor<T>>>,
}

impl<T: Float> Checkpoint<T> {
    pub fn capture(config: &Config, model: &CaaiNet<T>, state: Option<&TrainState<T>>) -> Self {
        Self {
            config: config.clone(),
            seed: config.train.seed,
            epochs_done: state.map_or(0, |s| s.epochs_done),
            loss_history: state.map_or_else(Vec::new, |s| s.loss_history.clone()),
            params: model
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            velocity: state.map(|s| s.optimizer.velocity.clone()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(T::BYTES as u8);
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.epochs_done as u64).to_le_bytes());
        out.extend_from_slice(&(self.loss_history.len() as u64).to_le_bytes());
        for l in &self.loss_history {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            write_floats(&mut out, t.data());
        }
        match &self.velocity {
            Some(vs) => {
                out.push(1);
                for v in vs {
                    write_floats(&mut out, v.data());
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let width = r.u8()? as usize;
        if width != 4 && width != 8 {
            return Err(Error::Checkpoint(format!("unsupported float width {width}")));
        }
        let len = r.u32()? as usize;
        let text =
            std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let config = Config::parse(text)?;
        let seed = r.u64()?;
        let epochs_done = r.u64()? as usize;
        let n_hist = r.count()?;
        let loss_history = (0..n_hist)
            .map(|_| Ok(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"))))
            .collect::<Result<_>>()?;
        let n_params = r.count()?;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = r.floats(numel, width)?;
            params.push((name, Tensor::new(shape, data)?));
        }
        let velocity = match r.u8()? {
            0 => None,
            1 => Some(
                params
                    .iter()
                    .map(|(_, p)| Tensor::new(p.shape().to_vec(), r.floats(p.numel(), width)?))
                    .collect::<Result<_>>()?,
            ),
            b => return Err(Error::Checkpoint(format!("bad velocity flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            seed,
            epochs_done,
            loss_history,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model with the stored weights.
    pub fn model(&self) -> Result<CaaiNet<T>> {
        let mut model = CaaiNet::new(&self.config.model, self.seed)?;
        restore_params(&mut model.params, &self.params)?;
        Ok(model)
    }

    /// Rebuilds the model and the training state for resuming.
    pub fn resume(&self) -> Result<(CaaiNet<T>, TrainState<T>)> {
        let model = self.model()?;
        let mut optimizer = Sgd::new(&self.config.train, &model.params);
        if let Some(v) = &self.velocity {
            optimizer.velocity = v.clone();
        }
        let state = TrainState {
            epochs_done: self.epochs_done,
            loss_history: self.loss_history.clone(),
            optimizer,
        };
        Ok((model, state))
    }
}

fn write_floats<T: Float>(out: &mut Vec<u8>, data: &[T]) {
    for &v in data {
        v.to_le_bytes_vec(out);
    }
}

fn restore_params<T: Float>(store: &mut ParamStore<T>, saved: &[(String, Tensor<T>)]) -> Result<()> {
    if saved.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            saved.len(),
            store.len()
        )));
    }
    for (name, value) in saved {
        let id = store
            .id(name)
            .map_err(|_| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
        store
            .set_value(id, value.clone())
            .map_err(|_| Error::Checkpoint(format!("shape mismatch for `{name}`")))?;
    }
    Ok(())
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
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A length prefix, sanity-checked against the remaining bytes.
    fn count(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > self.bytes.len() as u64 {
            return Err(Error::Checkpoint(format!("implausible count {n}")));
        }
        Ok(n as usize)
    }

    fn floats<T: Float>(&mut self, n: usize, width: usize) -> Result<Vec<T>> {
        let raw = self.take(
            n.checked_mul(width)
                .ok_or_else(|| Error::Checkpoint("overflow".into()))?,
        )?;
        Ok(match width {
            4 => raw
                .chunks_exact(4)
                .map(|b| T::c(f64::from(f32::from_le_slice(b))))
                .collect(),
            _ => raw.chunks_exact(8).map(|b| T::c(f64::from_le_slice(b))).collect(),
        })
    }
}
