//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IBCK"                    4 bytes
//! version                   1 byte
//! header length             u32
//! header                    UTF-8 JSON (stage, digests, vocabulary, architecture,
//!                           schedule, tensor table, adapter and optimizer descriptors)
//! parameters                f64 LE, tensors in header order, row-major
//! adapter values            f64 LE (if present)
//! optimizer m, then v       f64 LE (if present)
//! checksum                  SHA-256 of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{AdamWConfig, Architecture, DenoiserParams, LoraSet, OptimizerState};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::toyworld::World;
use crate::vocab::Token;

pub const MAGIC: &[u8; 4] = b"IBCK";
pub const VERSION: u8 = 1;

/// Pipeline stage that produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Base,
    Personalized,
    RlFinetuned,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::Personalized => "personalized",
            Stage::RlFinetuned => "rl-finetuned",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Hex SHA-256 of the world manifest the model was trained against.
    pub manifest_digest: String,
    pub config_hash: String,
    pub schedule: ScheduleSpec,
    pub params: DenoiserParams,
    pub adapters: Option<LoraSet>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: Stage,
    manifest_digest: String,
    config_hash: String,
    vocabulary: Vec<String>,
    architecture: Architecture,
    schedule: ScheduleSpec,
    tensors: Vec<TensorEntry>,
    adapters: Option<AdapterHeader>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterHeader {
    layers: Vec<usize>,
    rank: usize,
    alpha: f64,
    enabled: bool,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
    len: usize,
}

fn vocabulary() -> Vec<String> {
    Token::ALL.iter().map(|t| t.word().to_string()).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arch = self.params.arch();
        let header = Header {
            stage: self.stage,
            manifest_digest: self.manifest_digest.clone(),
            config_hash: self.config_hash.clone(),
            vocabulary: vocabulary(),
            architecture: arch.clone(),
            schedule: self.schedule,
            tensors: self
                .params
                .layout()
                .tensors(arch)
                .into_iter()
                .map(|(name, _, shape)| TensorEntry { name, shape })
                .collect(),
            adapters: self.adapters.as_ref().map(|a| AdapterHeader {
                layers: a.selection(),
                rank: a.rank(),
                alpha: a.alpha(),
                enabled: a.enabled(),
                len: a.values().len(),
            }),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
                len: o.m.len(),
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(64 + json.len() + 8 * self.params.values().len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |values: &[f64]| {
            values
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
        };
        // tensors are stored contiguously in declared order
        put(self.params.values());
        if let Some(a) = &self.adapters {
            put(a.values());
        }
        if let Some(o) = &self.optimizer {
            put(&o.m);
            put(&o.v);
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Error::Checkpoint(m);
        if bytes.len() < 4 + 1 + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(err("not an IBCK checkpoint".into()));
        }
        if bytes[4] != VERSION {
            return Err(err(format!(
                "unsupported checkpoint version {} (this build reads version {VERSION})",
                bytes[4]
            )));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(err("checksum mismatch: file is corrupted".into()));
        }
        let json_len = u32::from_le_bytes(body[5..9].try_into().expect("4 bytes")) as usize;
        let json = body
            .get(9..9 + json_len)
            .ok_or_else(|| err("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| err(format!("bad header: {e}")))?;
        if header.vocabulary != vocabulary() {
            return Err(err(format!("vocabulary mismatch: {:?}", header.vocabulary)));
        }
        let mut params =
            DenoiserParams::zeros(header.architecture.clone()).map_err(|e| err(e.to_string()))?;
        let expected: Vec<(String, Vec<usize>)> = params
            .layout()
            .tensors(&header.architecture)
            .into_iter()
            .map(|(name, _, shape)| (name, shape))
            .collect();
        let declared: Vec<(String, Vec<usize>)> = header
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect();
        if declared != expected {
            return Err(err(
                "tensor table does not match the architecture descriptor".into(),
            ));
        }
        let mut floats = body[9 + json_len..]
            .chunks(8)
            .map(|c| c.try_into().map(f64::from_le_bytes));
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v: std::result::Result<Vec<f64>, _> = floats.by_ref().take(n).collect();
            match v {
                Ok(v) if v.len() == n => Ok(v),
                _ => Err(err("payload shorter than the header declares".into())),
            }
        };
        let n = params.values().len();
        params.values_mut().copy_from_slice(&take(n)?);
        let adapters = match &header.adapters {
            Some(a) => {
                let values = take(a.len)?;
                Some(
                    LoraSet::from_values(&params, &a.layers, a.rank, a.alpha, a.enabled, values)
                        .map_err(|e| err(format!("adapters: {e}")))?,
                )
            }
            None => None,
        };
        let optimizer = match &header.optimizer {
            Some(o) => Some(OptimizerState {
                config: o.config,
                step: o.step,
                m: take(o.len)?,
                v: take(o.len)?,
            }),
            None => None,
        };
        if floats.next().is_some() {
            return Err(err("payload longer than the header declares".into()));
        }
        if !params.is_finite() {
            return Err(Error::Numeric(
                "checkpoint parameters are not finite".into(),
            ));
        }
        Ok(Self {
            stage: header.stage,
            manifest_digest: header.manifest_digest,
            config_hash: header.config_hash,
            schedule: header.schedule,
            params,
            adapters,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Load and check that the checkpoint belongs to `world` and is at one of `stages`.
    pub fn load_for(path: &Path, world: &World, stages: &[Stage]) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.manifest_digest != world.digest_hex() {
            return Err(Error::Checkpoint(format!(
                "{} was trained against world manifest {} but the loaded manifest is {}",
                path.display(),
                ck.manifest_digest,
                world.digest_hex()
            )));
        }
        if !stages.contains(&ck.stage) {
            let want: Vec<String> = stages.iter().map(Stage::to_string).collect();
            return Err(Error::StageOrder(format!(
                "{} is a {} checkpoint; expected {}",
                path.display(),
                ck.stage,
                want.join(" or ")
            )));
        }
        Ok(ck)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }
}
