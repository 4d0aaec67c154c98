//! Binary checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "VDPC" | version: u32
//! config_len: u32 | config: UTF-8 key=value lines
//! tensor_count: u32
//! per tensor: name_len: u32 | name | rank: u32 | dims: u64 * rank | f64 * numel
//! crc32: u32 over every byte between the version and the checksum
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::prior::PriorKind;
use crate::tensor::Tensor;
use crate::training::{build_model, VaeWithPrior};

pub const MAGIC: &[u8; 4] = b"VDPC";
pub const FORMAT_VERSION: u32 = 1;

const META_PREFIX: &str = "ckpt.";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub data_dim: usize,
    /// Number of completed epochs.
    pub epoch: usize,
    pub adam_step: u64,
    pub val_history: Vec<f64>,
    /// Model parameters followed by optimizer moments.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        model: &VaeWithPrior,
        adam: &Adam,
        epoch: usize,
        val_history: &[f64],
    ) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = model
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, t.detach()))
            .collect();
        for (kind, moments) in [("m", adam.first_moments()), ("v", adam.second_moments())] {
            for (i, m) in moments.iter().enumerate() {
                let t = Tensor::new(m.clone(), vec![m.len()]).expect("flat moment buffer");
                tensors.push((format!("optim.{kind}.{i}"), t));
            }
        }
        Checkpoint {
            config: config.clone(),
            data_dim: model.vae.data_dim(),
            epoch,
            adam_step: adam.step_count(),
            val_history: val_history.to_vec(),
            tensors,
        }
    }

    pub fn prior_kind(&self) -> PriorKind {
        self.config.prior
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn header_block(&self) -> String {
        let history: Vec<String> = self.val_history.iter().map(ToString::to_string).collect();
        format!(
            "{}{META_PREFIX}data_dim={}\n{META_PREFIX}epoch={}\n{META_PREFIX}adam_step={}\n{META_PREFIX}val_history={}\n",
            self.config.to_kv(),
            self.data_dim,
            self.epoch,
            self.adam_step,
            history.join(",")
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = self.header_block();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[8..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 8 {
            return Err(if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                CheckpointError::BadMagic.into()
            } else {
                CheckpointError::Truncated.into()
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let mut r = Reader { bytes, pos: 8 };
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| CheckpointError::Malformed("config block is not UTF-8".into()))?
            .to_string();
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| {
                    CheckpointError::Malformed(format!("tensor `{name}` is too large"))
                })?;
            let raw = r.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(data, shape)
                .map_err(|e| CheckpointError::Malformed(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        let remaining = bytes.len() - r.pos;
        if remaining < 4 {
            return Err(CheckpointError::Truncated.into());
        }
        if remaining > 4 {
            return Err(CheckpointError::Malformed(format!(
                "{} unexpected trailing bytes",
                remaining - 4
            ))
            .into());
        }
        let stored = u32::from_le_bytes(bytes[r.pos..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[8..r.pos]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed }.into());
        }
        let (config_text, meta) = split_meta(&header);
        let config = TrainConfig::parse(&config_text)
            .map_err(|e| CheckpointError::Malformed(format!("stored config: {e}")))?;
        let meta_value = |key: &str| -> Result<&str> {
            meta.get(key).copied().ok_or_else(|| {
                CheckpointError::Malformed(format!("missing `{META_PREFIX}{key}`")).into()
            })
        };
        let parse_meta = |key: &str| -> Result<u64> {
            meta_value(key)?
                .parse()
                .map_err(|_| CheckpointError::Malformed(format!("bad `{META_PREFIX}{key}`")).into())
        };
        let history = meta_value("val_history")?;
        let val_history = if history.is_empty() {
            Vec::new()
        } else {
            history
                .split(',')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| CheckpointError::Malformed("bad validation history".into()))?
        };
        Ok(Checkpoint {
            config,
            data_dim: parse_meta("data_dim")? as usize,
            epoch: parse_meta("epoch")? as usize,
            adam_step: parse_meta("adam_step")?,
            val_history,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model and fills in every stored parameter.
    pub fn model(&self) -> Result<VaeWithPrior> {
        let mut model = build_model(&self.config, self.data_dim)?;
        let stored: HashMap<&str, &Tensor> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let params = model
            .named_params()
            .into_iter()
            .map(|(name, fresh)| {
                let t = stored
                    .get(name.as_str())
                    .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
                if t.shape() != fresh.shape() {
                    return Err(CheckpointError::Malformed(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        fresh.shape()
                    ))
                    .into());
                }
                Ok(t.as_param())
            })
            .collect::<Result<Vec<_>>>()?;
        model.set_params(&params)?;
        Ok(model)
    }

    /// Like [`Checkpoint::model`] but refuses a checkpoint of another prior.
    pub fn model_expecting(&self, kind: PriorKind) -> Result<VaeWithPrior> {
        if self.prior_kind() != kind {
            return Err(CheckpointError::PriorKindMismatch {
                expected: kind.name().into(),
                found: self.prior_kind().name().into(),
            }
            .into());
        }
        self.model()
    }

    pub fn optimizer(&self) -> Result<Adam> {
        let config = AdamConfig {
            lr: self.config.learning_rate,
            ..AdamConfig::default()
        };
        let collect = |kind: &str| -> Vec<Vec<f64>> {
            (0..)
                .map_while(|i| self.tensor(&format!("optim.{kind}.{i}")))
                .map(Tensor::to_vec)
                .collect()
        };
        Adam::from_state(config, self.adam_step, collect("m"), collect("v"))
    }
}

fn split_meta(header: &str) -> (String, HashMap<&str, &str>) {
    let mut config = String::new();
    let mut meta = HashMap::new();
    for line in header.lines() {
        match line
            .strip_prefix(META_PREFIX)
            .and_then(|rest| rest.split_once('='))
        {
            Some((k, v)) => {
                meta.insert(k, v);
            }
            None => {
                config.push_str(line);
                config.push('\n');
            }
        }
    }
    (config, meta)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        // Leave room for the trailing checksum.
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.bytes.len().saturating_sub(4) {
            return Err(Error::Checkpoint(CheckpointError::Truncated));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
