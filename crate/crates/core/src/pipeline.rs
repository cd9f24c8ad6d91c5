//! Stage orchestration: run directories, artifacts and the five pipeline steps.
//!
//! A run directory is `<out>/<config hash>-s<seed>/`. Every stage reads the
//! previous stage's checkpoint from the same directory, so one config file
//! drives the whole pipeline. Artifacts are never overwritten unless forced.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{Checkpoint, ScheduleSpec, Stage};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{ablation_report, sample_images, write_metric_csv, Candidate, MetricRow};
use crate::image::{read_grid_text, write_grid_png, write_grid_text, Image};
use crate::personalization::{
    build_personalization_prompt, generate_prior_set, pretrain_base, run_personalization,
};
use crate::rl::run_rl;
use crate::toyworld::World;
use crate::vocab::{tokenize, PromptTokens, Token};

pub const BASE: &str = "base.ibck";
pub const PERSONALIZED: &str = "personalized.ibck";
pub const RL: &str = "rl.ibck";
pub const RL_MERGED: &str = "rl-merged.ibck";
pub const PRIOR_SET: &str = "prior-set.txt";

#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
    config_hash: String,
    force: bool,
}

impl RunDir {
    /// Creates `<out>/<hash>-s<seed>/` and records the effective config there.
    pub fn open(out: &Path, cfg: &RunConfig, force: bool) -> Result<Self> {
        let config_hash = cfg.hash();
        let path = out.join(format!("{config_hash}-s{}", cfg.seed));
        fs::create_dir_all(&path)?;
        let dir = Self {
            path,
            config_hash,
            force,
        };
        let config_path = dir.path.join("config.toml");
        let text = cfg.to_toml();
        match fs::read_to_string(&config_path) {
            Ok(existing) if existing == text => {}
            Ok(_) if !force => return Err(Error::Exists(config_path)),
            _ => fs::write(&config_path, text)?,
        }
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Path for a new artifact; errors if it exists and the run is not forced.
    pub fn artifact(&self, name: &str) -> Result<PathBuf> {
        let p = self.file(name);
        if p.exists() && !self.force {
            return Err(Error::Exists(p));
        }
        Ok(p)
    }

    /// CSV with a leading `# config_hash=<hash>` line.
    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let path = self.artifact(name)?;
        let mut buf = format!("# config_hash={}\n", self.config_hash).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        fs::write(&path, buf)?;
        Ok(path)
    }

    pub fn write_metrics(&self, name: &str, rows: &[MetricRow]) -> Result<PathBuf> {
        let path = self.artifact(name)?;
        let mut buf = format!("# config_hash={}\n", self.config_hash).into_bytes();
        write_metric_csv(&mut buf, rows)?;
        fs::write(&path, buf)?;
        Ok(path)
    }

    pub fn write_grid(&self, name: &str, images: &[Image]) -> Result<PathBuf> {
        let path = self.artifact(name)?;
        let mut buf = format!("# config_hash={}\n", self.config_hash).into_bytes();
        write_grid_text(&mut buf, images)?;
        fs::write(&path, buf)?;
        Ok(path)
    }

    fn save_checkpoint(&self, name: &str, ck: &Checkpoint) -> Result<PathBuf> {
        let path = self.artifact(name)?;
        ck.save(&path)?;
        Ok(path)
    }

    fn load(&self, name: &str, world: &World, stages: &[Stage]) -> Result<Checkpoint> {
        let path = self.file(name);
        if !path.exists() {
            let want: Vec<String> = stages.iter().map(Stage::to_string).collect();
            return Err(Error::StageOrder(format!(
                "{} not found; run the {} stage first",
                path.display(),
                want.join("/")
            )));
        }
        Checkpoint::load_for(&path, world, stages)
    }
}

fn schedule_spec(cfg: &RunConfig) -> ScheduleSpec {
    ScheduleSpec {
        timesteps: cfg.model.timesteps,
        beta_start: cfg.model.beta_start,
        beta_end: cfg.model.beta_end,
    }
}

pub fn pretrain(cfg: &RunConfig, run: &RunDir) -> Result<PathBuf> {
    let world = cfg.world()?;
    let sched = cfg.model.schedule()?;
    let ck_path = run.artifact(BASE)?;
    run.artifact("pretrain-loss.csv")?;
    let (params, log) = pretrain_base(
        &world,
        cfg.model.architecture(world.shape()),
        &sched,
        &cfg.pretrain,
        cfg.seed,
    )?;
    run.write_csv("pretrain-loss.csv", &log)?;
    let ck = Checkpoint {
        stage: Stage::Base,
        manifest_digest: world.digest_hex(),
        config_hash: run.config_hash().to_string(),
        schedule: schedule_spec(cfg),
        params,
        adapters: None,
        optimizer: None,
    };
    ck.save(&ck_path)?;
    Ok(ck_path)
}

/// Prior images for the class prompt, read from the run directory when cached.
fn prior_set(
    cfg: &RunConfig,
    run: &RunDir,
    base: &Checkpoint,
    class_prompt: &PromptTokens,
) -> Result<Vec<Image>> {
    let path = run.file(PRIOR_SET);
    let n = cfg.personalize.prior_set_size;
    if path.exists() && !run.force {
        let images = read_grid_text(&fs::read_to_string(&path)?)?;
        if images.len() == n {
            log::info!("reusing cached prior set {}", path.display());
            return Ok(images);
        }
    }
    let sched = base.noise_schedule()?;
    let images = generate_prior_set(
        &base.params,
        class_prompt,
        n,
        &cfg.personalize.sampler,
        &sched,
        cfg.seed,
    )?;
    let mut buf = format!("# config_hash={}\n", run.config_hash()).into_bytes();
    write_grid_text(&mut buf, &images)?;
    fs::write(&path, buf)?;
    Ok(images)
}

pub fn personalize(cfg: &RunConfig, run: &RunDir) -> Result<PathBuf> {
    let world = cfg.world()?;
    let base = run.load(BASE, &world, &[Stage::Base])?;
    let sched = base.noise_schedule()?;
    let ck_path = run.artifact(PERSONALIZED)?;
    run.artifact("personalize-loss.csv")?;
    let q = &cfg.personalize;
    let (_, c_pr) = build_personalization_prompt(q.identifier, q.class, q.description)?;
    let priors = if q.prior_preservation {
        prior_set(cfg, run, &base, &c_pr)?
    } else {
        Vec::new()
    };
    let (params, log) = run_personalization(
        &base.params,
        &world.reference_images(),
        &priors,
        &sched,
        q,
        cfg.seed,
    )?;
    run.write_csv("personalize-loss.csv", &log)?;
    let ck = Checkpoint {
        stage: Stage::Personalized,
        params,
        config_hash: run.config_hash().to_string(),
        ..base
    };
    ck.save(&ck_path)?;
    Ok(ck_path)
}

pub fn rl_finetune(cfg: &RunConfig, run: &RunDir) -> Result<PathBuf> {
    let world = cfg.world()?;
    let pers = run.load(PERSONALIZED, &world, &[Stage::Personalized])?;
    let sched = pers.noise_schedule()?;
    let ck_path = run.artifact(RL)?;
    run.artifact(RL_MERGED)?;
    run.artifact("learning-curve.csv")?;
    let out = run_rl(
        &world,
        &pers.params,
        cfg.personalize.class,
        &cfg.rl,
        &sched,
        cfg.seed,
    )?;
    run.write_csv("learning-curve.csv", &out.curve)?;
    let merged = out.adapters.merge_into(&pers.params)?;
    let ck = Checkpoint {
        stage: Stage::RlFinetuned,
        config_hash: run.config_hash().to_string(),
        adapters: Some(out.adapters),
        ..pers
    };
    run.save_checkpoint(RL, &ck)?;
    run.save_checkpoint(
        RL_MERGED,
        &Checkpoint {
            params: merged,
            adapters: None,
            ..ck
        },
    )?;
    Ok(ck_path)
}

/// Stage selector for `sample`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Base,
    Personalized,
    Rl,
}

impl Which {
    fn file(self) -> (&'static str, Stage) {
        match self {
            Which::Base => (BASE, Stage::Base),
            Which::Personalized => (PERSONALIZED, Stage::Personalized),
            Which::Rl => (RL, Stage::RlFinetuned),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleRow {
    pub index: usize,
    pub reward: f64,
}

/// `n` samples of `prompt` from a stage checkpoint (or an explicit file),
/// written as a text grid, a reward CSV and optionally a PNG.
pub fn sample(
    cfg: &RunConfig,
    run: &RunDir,
    prompt_text: &str,
    n: usize,
    which: Which,
    checkpoint: Option<&Path>,
    png: bool,
) -> Result<(PathBuf, Vec<SampleRow>)> {
    let world = cfg.world()?;
    let prompt = tokenize(prompt_text)?;
    if prompt.is_null() || n == 0 {
        return Err(Error::Parameter(
            "sample needs a non-empty prompt and n >= 1".into(),
        ));
    }
    let all = [Stage::Base, Stage::Personalized, Stage::RlFinetuned];
    let ck = match checkpoint {
        Some(p) => Checkpoint::load_for(p, &world, &all)?,
        None => {
            let (file, stage) = which.file();
            run.load(file, &world, &[stage])?
        }
    };
    let slug: String = prompt
        .tokens()
        .iter()
        .map(|t| {
            if *t == Token::Identifier {
                "id"
            } else {
                t.word()
            }
        })
        .collect::<Vec<_>>()
        .join("-");
    let stem = format!("samples-{}-{slug}", ck.stage);
    let images = sample_images(
        &ck.params,
        ck.adapters.as_ref(),
        &prompt,
        n,
        &cfg.eval.sampler.sampler(false),
        &ck.noise_schedule()?,
        cfg.seed,
    )?;
    let rows = images
        .iter()
        .enumerate()
        .map(|(index, img)| {
            Ok(SampleRow {
                index,
                reward: world.reward(img, &prompt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = run.write_grid(&format!("{stem}.txt"), &images)?;
    run.write_csv(&format!("{stem}-rewards.csv"), &rows)?;
    if png {
        write_grid_png(&run.artifact(&format!("{stem}.png"))?, &images, 8, 8)?;
    }
    Ok((grid, rows))
}

/// The configured prompt suite, or the identifier and class prompts with
/// every context word when none is configured.
pub fn eval_prompts(cfg: &RunConfig) -> Result<Vec<PromptTokens>> {
    if !cfg.eval.prompts.is_empty() {
        return cfg.eval.prompts.iter().map(|p| tokenize(p)).collect();
    }
    let class = cfg.personalize.class;
    let mut out = Vec::new();
    for ctx in Token::CONTEXTS {
        out.push(PromptTokens::new(vec![Token::Identifier, class, ctx])?);
        out.push(PromptTokens::new(vec![class, ctx])?);
    }
    Ok(out)
}

/// Metric report over every stage checkpoint present in the run directory.
pub fn evaluate(cfg: &RunConfig, run: &RunDir) -> Result<PathBuf> {
    let world = cfg.world()?;
    let mut loaded = Vec::new();
    for (label, which) in [
        ("base", Which::Base),
        ("personalized", Which::Personalized),
        ("rl", Which::Rl),
    ] {
        let (file, stage) = which.file();
        if run.file(file).exists() {
            loaded.push((label, run.load(file, &world, &[stage])?));
        }
    }
    if loaded.is_empty() {
        return Err(Error::StageOrder(
            "no checkpoints to evaluate; run pretrain first".into(),
        ));
    }
    let path = run.artifact("eval-report.csv")?;
    let sched = loaded[0].1.noise_schedule()?;
    let candidates: Vec<Candidate<'_>> = loaded
        .iter()
        .map(|(label, ck)| Candidate {
            label,
            params: &ck.params,
            adapters: ck.adapters.as_ref(),
        })
        .collect();
    let rows = ablation_report(
        &world,
        &candidates,
        &eval_prompts(cfg)?,
        &world.reference_images(),
        cfg.eval.samples,
        &cfg.eval.seeds,
        &cfg.eval.sampler.sampler(false),
        &sched,
    )?;
    run.write_metrics("eval-report.csv", &rows)?;
    Ok(path)
}

/// Logs every effective config value.
pub fn log_config(cfg: &RunConfig) {
    for line in cfg.describe() {
        log::info!("config {line}");
    }
}
