//! Binary checkpoints: `FAME\x01`, a length-prefixed config block, then
//! tensor records. Integers and floats are little-endian 64-bit.

use std::path::Path;

use super::config::{parse_config, RunConfig};
use crate::error::{FameError, Result};
use crate::model::{FameConfig, FameModel};
use crate::synthdata::write_bytes;
use crate::tensor::{Precision, Scalar, Tensor};
use crate::training::OptimState;

pub const MAGIC: &[u8; 5] = b"FAME\x01";
const OPTIM_M: &str = "optim.m/";
const OPTIM_V: &str = "optim.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: FameConfig,
    pub seed: u64,
    pub epoch: usize,
    /// Hash of the run config that produced the checkpoint.
    pub config_hash: String,
    /// Parameters and buffers in store order.
    pub tensors: Vec<NamedTensor>,
    pub optim: Option<OptimState>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(
        model: &FameModel<S>,
        seed: u64,
        epoch: usize,
        config_hash: &str,
        optim: Option<&OptimState>,
    ) -> Self {
        let tensors = model
            .store
            .entries()
            .iter()
            .map(|e| NamedTensor { name: e.name.clone(), shape: e.value.shape().to_vec(), data: e.value.to_f64_vec() })
            .collect();
        Checkpoint {
            model: model.config.clone(),
            seed,
            epoch,
            config_hash: config_hash.to_string(),
            tensors,
            optim: optim.cloned(),
        }
    }

    /// Rebuilds the model at the stored precision `S`.
    pub fn to_model<S: Scalar>(&self) -> Result<FameModel<S>> {
        let mut model = FameModel::<S>::build(&self.model, 0)?;
        self.check_layout()?;
        for (id, t) in model.store.ids().collect::<Vec<_>>().into_iter().zip(&self.tensors) {
            *model.store.get_mut(id) = Tensor::from_f64(&t.shape, &t.data)?;
        }
        Ok(model)
    }

    /// Names and shapes must match the architecture described by the config.
    pub fn check_layout(&self) -> Result<()> {
        let reference = FameModel::<f64>::build(&FameConfig { precision: Precision::F64, ..self.model.clone() }, 0)
            .map_err(|e| FameError::Format(format!("embedded config: {e}")))?;
        let entries = reference.store.entries();
        if entries.len() != self.tensors.len() {
            return Err(FameError::Format(format!(
                "config implies {} tensors, checkpoint has {}",
                entries.len(),
                self.tensors.len()
            )));
        }
        for (e, t) in entries.iter().zip(&self.tensors) {
            if e.name != t.name || e.value.shape() != t.shape.as_slice() {
                return Err(FameError::Format(format!(
                    "tensor {} {:?} does not match config ({} {:?})",
                    t.name,
                    t.shape,
                    e.name,
                    e.value.shape()
                )));
            }
        }
        if let Some(o) = &self.optim {
            if o.m.len() != entries.len() || o.v.len() != entries.len() {
                return Err(FameError::Format("optimizer state does not match parameters".into()));
            }
        }
        Ok(())
    }

    fn config_block(&self) -> String {
        let run = RunConfig { model: self.model.clone(), ..RunConfig::default() };
        let mut text = run.lines_with_prefix("model.");
        text.push_str(&format!(
            "checkpoint.seed = {}\ncheckpoint.epoch = {}\ncheckpoint.config_hash = {}\n",
            self.seed, self.epoch, self.config_hash
        ));
        if let Some(o) = &self.optim {
            text.push_str(&format!("checkpoint.optim_step = {}\n", o.step));
        }
        text
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let block = self.config_block();
        put_u64(&mut out, block.len() as u64);
        out.extend_from_slice(block.as_bytes());

        let mut records: Vec<(String, &[usize], &[f64])> =
            self.tensors.iter().map(|t| (t.name.clone(), t.shape.as_slice(), t.data.as_slice())).collect();
        if let Some(o) = &self.optim {
            for (prefix, moments) in [(OPTIM_M, &o.m), (OPTIM_V, &o.v)] {
                for (t, m) in self.tensors.iter().zip(moments) {
                    if !m.is_empty() {
                        records.push((format!("{prefix}{}", t.name), t.shape.as_slice(), m.as_slice()));
                    }
                }
            }
        }
        put_u64(&mut out, records.len() as u64);
        for (name, shape, data) in records {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, shape.len() as u64);
            for &d in shape {
                put_u64(&mut out, d as u64);
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(FameError::Format("not a checkpoint (bad magic or version)".into()));
        }
        let block_len = r.len("config block length")?;
        let block = std::str::from_utf8(r.take(block_len, "config block")?)
            .map_err(|_| FameError::Format("config block is not UTF-8".into()))?;
        let mut model_lines = String::new();
        let (mut seed, mut epoch, mut hash, mut step) = (None, None, None, None);
        for line in block.lines() {
            let bad = || FameError::Format(format!("bad config block line {line:?}"));
            match line.strip_prefix("checkpoint.").and_then(|l| l.split_once(" = ")) {
                Some(("seed", v)) => seed = Some(v.parse::<u64>().map_err(|_| bad())?),
                Some(("epoch", v)) => epoch = Some(v.parse::<usize>().map_err(|_| bad())?),
                Some(("config_hash", v)) => hash = Some(v.to_string()),
                Some(("optim_step", v)) => step = Some(v.parse::<u64>().map_err(|_| bad())?),
                Some(_) => return Err(bad()),
                None if line.starts_with("model.") => {
                    model_lines.push_str(line);
                    model_lines.push('\n');
                }
                None => return Err(bad()),
            }
        }
        let model = parse_config(&model_lines).map_err(|e| FameError::Format(format!("config block: {e}")))?.model;
        let missing = |what: &str| FameError::Format(format!("config block lacks checkpoint.{what}"));

        let count = r.len("tensor count")?;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.len("name length")?;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| FameError::Format("tensor name is not UTF-8".into()))?;
            let rank = r.len("rank")?;
            let shape: Vec<usize> = (0..rank).map(|_| r.len("dimension")).collect::<Result<_>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or_else(|| FameError::Format(format!("truncated data for tensor {name}")))?;
            let raw = r.take(numel * 8, "tensor data")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            records.push(NamedTensor { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(FameError::Format(format!("{} trailing bytes", r.remaining())));
        }

        let split = records.iter().position(|t| t.name.starts_with("optim.")).unwrap_or(records.len());
        let optim_records = records.split_off(split);
        let optim = match step {
            None if optim_records.is_empty() => None,
            None => return Err(missing("optim_step")),
            Some(step) => {
                let moments = |prefix: &str| -> Vec<Vec<f64>> {
                    records
                        .iter()
                        .map(|t| {
                            let key = format!("{prefix}{}", t.name);
                            optim_records.iter().find(|o| o.name == key).map(|o| o.data.clone()).unwrap_or_default()
                        })
                        .collect()
                };
                Some(OptimState { step, m: moments(OPTIM_M), v: moments(OPTIM_V) })
            }
        };
        let ckpt = Checkpoint {
            model,
            seed: seed.ok_or_else(|| missing("seed"))?,
            epoch: epoch.ok_or_else(|| missing("epoch"))?,
            config_hash: hash.ok_or_else(|| missing("config_hash"))?,
            tensors: records,
            optim,
        };
        ckpt.check_layout()?;
        if ckpt.to_bytes() != bytes {
            return Err(FameError::Format("checkpoint is not in canonical form".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| FameError::io(path, e))?)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(FameError::Format(format!("truncated checkpoint while reading {what}")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let raw = self.take(8, what)?;
        usize::try_from(u64::from_le_bytes(raw.try_into().expect("8 bytes")))
            .map_err(|_| FameError::Format(format!("{what} out of range")))
    }
}
