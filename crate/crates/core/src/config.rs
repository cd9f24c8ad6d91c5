//! Run configuration: a TOML file with one table per pipeline stage.
//!
//! Every key has a default, so a file containing only `seed = 7` is valid.
//! Unknown keys are rejected with their name and position.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{AdamWConfig, Architecture};
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::image::Shape;
use crate::toyworld::{World, WorldManifest};
use crate::vocab::{Token, TokenKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub personalize: PersonalizeConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// JSON world manifest; the built-in world when absent.
    pub manifest: Option<PathBuf>,
    /// Drop the identifier before scoring. When false it counts as one
    /// attribute no detector recognizes (score 0).
    pub strip_identifier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub steps: usize,
    pub guidance_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Probability of replacing an example's prompt by the null prompt.
    pub null_prob: f64,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonalizeConfig {
    pub identifier: Token,
    pub class: Token,
    /// Detail word added to the identifier prompt, e.g. `triangular`.
    pub description: Option<Token>,
    pub steps: usize,
    pub prior_set_size: usize,
    pub prior_preservation: bool,
    /// Also update the token embedding table. RL never touches it.
    pub train_token_embeddings: bool,
    pub optimizer: OptimizerConfig,
    pub sampler: SamplingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    /// Context word appended to both RL prompts.
    pub activity: Token,
    pub epochs: usize,
    pub rollouts: usize,
    pub minibatch: usize,
    pub grad_steps: usize,
    pub clip_range: f64,
    /// Probability that a rollout uses the identifier prompt.
    pub mixing: f64,
    /// Weight of a squared-mean-distance penalty toward the pre-RL model.
    pub kl_coef: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Adapted layer indices; every layer when empty.
    pub lora_layers: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub sampler: SamplingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples per (checkpoint, prompt, seed).
    pub samples: usize,
    /// Prompt texts; empty means the identifier and class prompts for every context.
    pub prompts: Vec<String>,
    pub seeds: Vec<u64>,
    pub sampler: SamplingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            personalize: PersonalizeConfig::default(),
            rl: RlConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            strip_identifier: true,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            timesteps: 50,
            beta_start: 1e-3,
            beta_end: 0.3,
            embed_dim: 16,
            time_dim: 16,
            hidden: vec![128, 128],
        }
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 7.5,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            weight_decay: a.weight_decay,
            eps: a.eps,
        }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 32,
            null_prob: 0.1,
            optimizer: OptimizerConfig {
                lr: 1e-3,
                weight_decay: 0.0,
                ..Default::default()
            },
        }
    }
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        Self {
            identifier: Token::Identifier,
            class: Token::Plushie,
            description: None,
            steps: 400,
            prior_set_size: 32,
            prior_preservation: true,
            train_token_embeddings: true,
            optimizer: OptimizerConfig::default(),
            sampler: SamplingConfig::default(),
        }
    }
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            activity: Token::Pens,
            epochs: 40,
            rollouts: 16,
            minibatch: 8,
            grad_steps: 2,
            clip_range: 1e-4,
            mixing: 0.5,
            kl_coef: 0.0,
            lora_rank: 4,
            lora_alpha: 4.0,
            lora_layers: Vec::new(),
            optimizer: OptimizerConfig::default(),
            sampler: SamplingConfig::default(),
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            prompts: Vec::new(),
            seeds: vec![0],
            sampler: SamplingConfig::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.eps,
        }
    }
}

impl SamplingConfig {
    pub fn sampler(&self, record_trajectory: bool) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            guidance_scale: self.guidance_scale,
            record_trajectory,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, image: Shape) -> Architecture {
        Architecture::new(
            image,
            self.timesteps,
            self.embed_dim,
            self.time_dim,
            self.hidden.clone(),
        )
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML, seed excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        hex::encode(&Sha256::digest(c.to_toml().as_bytes())[..8])
    }

    pub fn world(&self) -> Result<World> {
        let manifest = match &self.world.manifest {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                serde_json::from_str::<WorldManifest>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => WorldManifest::default(),
        };
        Ok(World::new(manifest)?.with_identifier_stripping(self.world.strip_identifier))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config(format!("{key}: {msg}")));
        if let Some(p) = &self.world.manifest {
            if !p.exists() {
                return bad("world.manifest", &format!("{} does not exist", p.display()));
            }
        }
        let m = &self.model;
        if m.timesteps == 0 {
            return bad("model.timesteps", "must be >= 1");
        }
        if !(0.0 < m.beta_start && m.beta_start <= m.beta_end && m.beta_end < 1.0) {
            return bad("model.beta_start", "need 0 < beta_start <= beta_end < 1");
        }
        if m.embed_dim == 0 || m.hidden.iter().any(|h| *h == 0) {
            return bad("model.hidden", "layer widths must be positive");
        }
        for (key, s) in [
            ("personalize.sampler", &self.personalize.sampler),
            ("rl.sampler", &self.rl.sampler),
            ("eval.sampler", &self.eval.sampler),
        ] {
            if s.steps == 0 || m.timesteps % s.steps != 0 {
                return bad(
                    key,
                    &format!(
                        "steps {} must divide model.timesteps {}",
                        s.steps, m.timesteps
                    ),
                );
            }
            if !(s.guidance_scale >= 0.0) {
                return bad(key, "guidance_scale must be >= 0");
            }
        }
        for (key, o) in [
            ("pretrain.optimizer", &self.pretrain.optimizer),
            ("personalize.optimizer", &self.personalize.optimizer),
            ("rl.optimizer", &self.rl.optimizer),
        ] {
            if !(o.lr >= 0.0
                && (0.0..1.0).contains(&o.beta1)
                && (0.0..1.0).contains(&o.beta2)
                && o.eps > 0.0)
            {
                return bad(key, "invalid AdamW hyperparameters");
            }
        }
        let p = &self.pretrain;
        if p.batch_size == 0 || !(0.0..=1.0).contains(&p.null_prob) {
            return bad(
                "pretrain",
                "batch_size must be >= 1 and null_prob in [0, 1]",
            );
        }
        let q = &self.personalize;
        if q.identifier != Token::Identifier {
            return bad(
                "personalize.identifier",
                "must be the reserved identifier [*]",
            );
        }
        if q.class.kind() != TokenKind::Class {
            return bad("personalize.class", "must be a class noun");
        }
        if let Some(d) = q.description {
            if d.kind() != TokenKind::Modifier {
                return bad("personalize.description", "must be a modifier word");
            }
        }
        if q.prior_preservation && q.prior_set_size == 0 {
            return bad(
                "personalize.prior_set_size",
                "must be >= 1 with prior preservation",
            );
        }
        let r = &self.rl;
        if r.activity.kind() != TokenKind::Context {
            return bad("rl.activity", "must be a context word");
        }
        if r.minibatch == 0 || r.minibatch > r.rollouts {
            return bad("rl.minibatch", "need 1 <= minibatch <= rollouts");
        }
        if !(r.clip_range > 0.0) {
            return bad("rl.clip_range", "must be > 0");
        }
        if !(0.0..=1.0).contains(&r.mixing) {
            return bad("rl.mixing", "must lie in [0, 1]");
        }
        if r.kl_coef < 0.0 || r.lora_rank == 0 {
            return bad("rl", "kl_coef must be >= 0 and lora_rank >= 1");
        }
        let n_layers = m.hidden.len() + 1;
        if let Some(l) = r.lora_layers.iter().find(|l| **l >= n_layers) {
            return bad(
                "rl.lora_layers",
                &format!("layer {l} does not exist ({n_layers} layers)"),
            );
        }
        if self.eval.samples == 0 || self.eval.seeds.is_empty() {
            return bad("eval", "need samples >= 1 and at least one seed");
        }
        Ok(())
    }

    /// Every key with its effective value, one `key = value` per line.
    pub fn describe(&self) -> Vec<String> {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        if self.world.manifest.is_none() {
            out.push("world.manifest = <built-in>".into());
        }
        if self.personalize.description.is_none() {
            out.push("personalize.description = <none>".into());
        }
        out.sort();
        out
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_only_config_materializes_defaults() {
        let cfg = RunConfig::parse("seed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.rl.rollouts, 16);
        assert_eq!(cfg.rl.clip_range, 1e-4);
        assert_eq!(cfg.personalize.prior_set_size, 32);
        assert_eq!(cfg.personalize.optimizer.lr, 2e-5);
        assert_eq!(cfg.rl.sampler.guidance_scale, 7.5);
        let lines = cfg.describe();
        assert!(lines.iter().any(|l| l == "rl.mixing = 0.5"), "{lines:?}");
    }

    #[test]
    fn misspelled_key_is_named_with_its_line() {
        let err = RunConfig::parse("seed = 1\n[rl]\nrollots = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rollots"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn type_mismatch_is_a_config_error() {
        let err = RunConfig::parse("[pretrain]\nsteps = \"many\"\n").unwrap_err();
        assert!(err.to_string().contains("steps"), "{err}");
    }

    #[test]
    fn unknown_token_in_config() {
        assert!(RunConfig::parse("[rl]\nactivity = \"beach\"\n").is_err());
        assert!(RunConfig::parse("[rl]\nactivity = \"cup\"\n").is_err());
        let c = RunConfig::parse("[personalize]\ndescription = \"triangular\"\n").unwrap();
        assert_eq!(c.personalize.description, Some(Token::Triangular));
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        cfg.personalize.description = Some(Token::Triangular);
        cfg.rl.lora_layers = vec![0, 2];
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 5;
        assert_eq!(a.hash(), b.hash());
        b.rl.epochs += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn missing_manifest_file() {
        let err =
            RunConfig::parse("[world]\nmanifest = \"/nonexistent/world.json\"\n").unwrap_err();
        assert!(err.to_string().contains("world.manifest"));
    }

    #[test]
    fn invalid_values() {
        assert!(RunConfig::parse("[rl]\nminibatch = 20\n").is_err());
        assert!(RunConfig::parse("[rl.sampler]\nsteps = 7\n").is_err());
        assert!(RunConfig::parse("[rl]\nmixing = 1.5\n").is_err());
    }
}
