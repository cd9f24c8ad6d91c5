//! Reward fine-tuning of LoRA adapters with a clipped importance-sampled
//! policy gradient over denoising trajectories.
//!
//! Each reverse step `z_t -> z_{t-1}` is one action of a policy
//! `p_θ(z_{t-1} | z_t, c)`. The objective is the mean over stochastic steps of
//! `min(ρ A, clip(ρ, 1 - ε, 1 + ε) A)` with `ρ` the per-step likelihood ratio
//! against the sampling-time policy and `A` the trajectory advantage.

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RlConfig;
use crate::denoiser::{
    accumulate_logprob, adamw_step, guided_backward, guided_forward, Denoiser, DenoiserParams,
    Gradient, LoraSet, OptimizerState, Trainable,
};
use crate::diffusion::{ancestral_sample, NoiseSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::toyworld::World;
use crate::train::{accumulate, mean};
use crate::vocab::{PromptTokens, Token, TokenKind};

/// The identifier prompt and the plain class prompt, both with the activity.
pub fn build_rl_prompts(
    identifier: Token,
    class: Token,
    activity: Token,
) -> Result<(PromptTokens, PromptTokens)> {
    if identifier != Token::Identifier {
        return Err(Error::Prompt(format!(
            "{} is not the identifier token",
            identifier.word()
        )));
    }
    if class.kind() != TokenKind::Class {
        return Err(Error::Prompt(format!(
            "{} is not a class noun",
            class.word()
        )));
    }
    if activity.kind() != TokenKind::Context {
        return Err(Error::Prompt(format!(
            "{} is not an activity descriptor",
            activity.word()
        )));
    }
    Ok((
        PromptTokens::new(vec![identifier, class, activity])?,
        PromptTokens::new(vec![class, activity])?,
    ))
}

#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub epoch: usize,
    pub trajectories: Vec<Trajectory>,
    /// Set by [`normalize_advantages`].
    pub advantages: Option<Vec<f64>>,
}

impl RolloutBatch {
    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories
            .iter()
            .map(|t| t.reward.expect("rollouts are scored"))
            .collect()
    }

    /// Mean reward over rollouts whose prompt carries (or lacks) the identifier.
    pub fn mean_reward(&self, identifier: Option<bool>) -> Option<f64> {
        let r: Vec<f64> = self
            .trajectories
            .iter()
            .filter(|t| identifier.map_or(true, |id| t.prompt.has_identifier() == id))
            .map(|t| t.reward.expect("rollouts are scored"))
            .collect();
        (!r.is_empty()).then(|| mean(&r))
    }
}

/// Sample `cfg.rollouts` scored trajectories from a frozen snapshot.
///
/// Rollout `i` of epoch `e` uses its own generator, so the batch does not
/// depend on how the work is scheduled.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    world: &World,
    params: &DenoiserParams,
    adapters: Option<&LoraSet>,
    prompts: &(PromptTokens, PromptTokens),
    cfg: &RlConfig,
    sched: &NoiseSchedule,
    seed: u64,
    epoch: usize,
) -> Result<RolloutBatch> {
    let model = Denoiser::new(params, adapters);
    let sampler = cfg.sampler.sampler(true);
    let trajectories = (0..cfg.rollouts)
        .into_par_iter()
        .map(|i| {
            let index = (epoch * cfg.rollouts + i) as u64;
            let mut rng = stream(seed, "rollout", index);
            let prompt = if rng.gen_bool(cfg.mixing) {
                &prompts.0
            } else {
                &prompts.1
            };
            let mut traj = ancestral_sample(&model, prompt, &sampler, sched, &mut rng, index)?;
            let r = world.reward(&traj.image(), prompt)?;
            traj.reward = Some(r);
            Ok(traj)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutBatch {
        epoch,
        trajectories,
        advantages: None,
    })
}

/// Standardize rewards within the identifier and non-identifier groups.
///
/// Uses the population standard deviation plus `1e-8`; a group of one gets 0.
pub fn normalize_advantages(batch: &mut RolloutBatch) {
    let rewards = batch.rewards();
    let mut adv = vec![0.0; rewards.len()];
    for group in [true, false] {
        let idx: Vec<usize> = (0..rewards.len())
            .filter(|&i| batch.trajectories[i].prompt.has_identifier() == group)
            .collect();
        if idx.len() < 2 {
            continue;
        }
        let r: Vec<f64> = idx.iter().map(|&i| rewards[i]).collect();
        let m = mean(&r);
        let sd = (r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / r.len() as f64).sqrt();
        for &i in &idx {
            adv[i] = (rewards[i] - m) / (sd + 1e-8);
        }
    }
    batch.advantages = Some(adv);
}

/// Value and `∂/∂logp` of `min(ρ A, clip(ρ, 1-ε, 1+ε) A)` at `ρ = exp(logp - logp_old)`.
///
/// The derivative is `ρ A` where the unclipped branch is the minimum and 0
/// where the clipped branch is.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    let unclipped_value = ratio * advantage;
    let clipped_value = clipped * advantage;
    if unclipped_value <= clipped_value {
        (unclipped_value, ratio * advantage)
    } else {
        (clipped_value, 0.0)
    }
}

pub fn is_clipped(ratio: f64, clip: f64) -> bool {
    (ratio - 1.0).abs() > clip
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PgStats {
    pub objective: f64,
    pub mean_ratio: f64,
    /// Fraction of per-step ratios with `|ρ - 1| > ε`.
    pub clip_fraction: f64,
    pub mean_reward: f64,
    pub terms: usize,
}

/// One trajectory of a minibatch with its advantage.
#[derive(Debug, Clone, Copy)]
pub struct PgItem<'a> {
    pub trajectory: &'a Trajectory,
    pub advantage: f64,
}

/// Ascent direction of the clipped surrogate, averaged over every stochastic
/// step of every trajectory, with respect to the adapters. Also returns the
/// ratios in (trajectory, step) order.
pub fn surrogate_gradient(
    params: &DenoiserParams,
    adapters: &LoraSet,
    items: &[PgItem<'_>],
    clip: f64,
    kl_coef: f64,
) -> Result<(Gradient, Vec<f64>, PgStats)> {
    let mut terms = Vec::new();
    for (j, item) in items.iter().enumerate() {
        if !item.trajectory.is_recorded() {
            return Err(Error::Parameter(
                "policy gradient needs recorded trajectories".into(),
            ));
        }
        terms.extend(item.trajectory.stochastic_steps().map(|k| (j, k)));
    }
    if terms.is_empty() {
        return Err(Error::Parameter("minibatch has no stochastic steps".into()));
    }
    let n = terms.len() as f64;
    let (grad, ratios) = accumulate(
        &terms,
        Trainable::Adapters,
        params,
        Some(adapters),
        |_, &(j, k), g| {
            let item = &items[j];
            let traj = item.trajectory;
            let step = &traj.plan[k];
            let old = traj.logprobs[k];
            let mut ratio = f64::NAN;
            accumulate_logprob(
                params,
                Some(adapters),
                step,
                &traj.states[k],
                &traj.states[k + 1],
                &traj.prompt,
                traj.guidance_scale,
                |lp| {
                    ratio = (lp - old).exp();
                    if !ratio.is_finite() {
                        return 0.0;
                    }
                    clipped_surrogate(ratio, item.advantage, clip).1 / n
                },
                g,
            )?;
            if !ratio.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite importance ratio at trajectory {j}, step t = {}",
                    step.t
                )));
            }
            if kl_coef > 0.0 {
                kl_gradient(params, adapters, traj, k, -kl_coef / n, g)?;
            }
            Ok(ratio)
        },
    )?;
    let objective: f64 = terms
        .iter()
        .zip(&ratios)
        .map(|(&(j, _), &r)| clipped_surrogate(r, items[j].advantage, clip).0)
        .sum();
    let clipped = ratios.iter().filter(|r| is_clipped(**r, clip)).count();
    let stats = PgStats {
        objective: objective / n,
        mean_ratio: mean(&ratios),
        clip_fraction: clipped as f64 / n,
        mean_reward: mean(
            &items
                .iter()
                .map(|i| i.trajectory.reward.unwrap_or(f64::NAN))
                .collect::<Vec<_>>(),
        ),
        terms: terms.len(),
    };
    Ok((grad, ratios, stats))
}

/// Adds `weight · ∇ ‖μ_θ - μ_ref‖² / (2σ²)` for step `k`, where `μ_ref` is the
/// mean without adapters (the Gaussian KL between the two transitions).
fn kl_gradient(
    params: &DenoiserParams,
    adapters: &LoraSet,
    traj: &Trajectory,
    k: usize,
    weight: f64,
    grad: &mut Gradient,
) -> Result<()> {
    let step = &traj.plan[k];
    let z_t = &traj.states[k];
    let fwd = guided_forward(
        params,
        Some(adapters),
        step,
        z_t,
        &traj.prompt,
        traj.guidance_scale,
    )?;
    let reference = guided_forward(params, None, step, z_t, &traj.prompt, traj.guidance_scale)?;
    let var = step.sigma * step.sigma;
    let upstream: Vec<f64> = fwd
        .mean
        .as_slice()
        .iter()
        .zip(reference.mean.as_slice())
        .map(|(m, r)| weight * (m - r) / var)
        .collect();
    guided_backward(
        params,
        Some(adapters),
        &fwd,
        step,
        z_t,
        &traj.prompt,
        traj.guidance_scale,
        &upstream,
        grad,
    )
}

/// One AdamW step on the adapters to maximize the clipped surrogate.
///
/// An identically zero gradient (e.g. every advantage is 0) carries no
/// learning signal and leaves the adapters and optimizer state untouched.
pub fn pg_step(
    params: &DenoiserParams,
    adapters: &mut LoraSet,
    items: &[PgItem<'_>],
    clip: f64,
    kl_coef: f64,
    opt: &mut OptimizerState,
) -> Result<PgStats> {
    let (mut grad, _, stats) = surrogate_gradient(params, adapters, items, clip, kl_coef)?;
    if grad.max_abs() == 0.0 {
        return Ok(stats);
    }
    grad.scale(-1.0);
    let mask = adapters.decay_mask();
    adamw_step(adapters.values_mut(), &grad.values, &mask, opt)?;
    if !adapters.values().iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("adapters became non-finite".into()));
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveRow {
    pub epoch: usize,
    /// `None` when no rollout of the epoch used the identifier prompt.
    pub mean_reward_id: Option<f64>,
    pub mean_reward_all: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub adapters: LoraSet,
    pub curve: Vec<CurveRow>,
}

/// Fresh adapters on the configured layers (every layer when none are listed).
pub fn attach_adapters(params: &DenoiserParams, cfg: &RlConfig, seed: u64) -> Result<LoraSet> {
    let layers: Vec<usize> = if cfg.lora_layers.is_empty() {
        (0..params.layout().layers.len()).collect()
    } else {
        cfg.lora_layers.clone()
    };
    let mut set = LoraSet::attach(
        params,
        &layers,
        cfg.lora_rank,
        cfg.lora_alpha,
        &mut stream(seed, "lora", 0),
    )?;
    set.set_enabled(true);
    Ok(set)
}

/// The full fine-tuning loop. `params` is never modified.
pub fn run_rl(
    world: &World,
    params: &DenoiserParams,
    class: Token,
    cfg: &RlConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<RlOutcome> {
    let prompts = build_rl_prompts(Token::Identifier, class, cfg.activity)?;
    let mut adapters = attach_adapters(params, cfg, seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer.adamw(), adapters.values().len());
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut batch = collect_rollouts(
            world,
            params,
            Some(&adapters),
            &prompts,
            cfg,
            sched,
            seed,
            epoch,
        )?;
        normalize_advantages(&mut batch);
        let adv = batch.advantages.clone().expect("normalized");
        let (mut ratio_sum, mut clipped, mut terms) = (0.0, 0.0, 0usize);
        for g in 0..cfg.grad_steps {
            let mut rng = stream(seed, "minibatch", (epoch * cfg.grad_steps + g) as u64);
            let picks = sample(&mut rng, cfg.rollouts, cfg.minibatch).into_vec();
            let items: Vec<PgItem<'_>> = picks
                .iter()
                .map(|&i| PgItem {
                    trajectory: &batch.trajectories[i],
                    advantage: adv[i],
                })
                .collect();
            let stats = pg_step(
                params,
                &mut adapters,
                &items,
                cfg.clip_range,
                cfg.kl_coef,
                &mut opt,
            )?;
            ratio_sum += stats.mean_ratio * stats.terms as f64;
            clipped += stats.clip_fraction * stats.terms as f64;
            terms += stats.terms;
        }
        let denom = terms.max(1) as f64;
        let row = CurveRow {
            epoch,
            mean_reward_id: batch.mean_reward(Some(true)),
            mean_reward_all: batch.mean_reward(None).unwrap_or(0.0),
            clip_fraction: clipped / denom,
            mean_ratio: if terms == 0 { 1.0 } else { ratio_sum / denom },
        };
        log::debug!(
            "rl epoch {epoch}: reward id {:?} all {:.4} clip {:.3}",
            row.mean_reward_id,
            row.mean_reward_all,
            row.clip_fraction
        );
        curve.push(row);
    }
    Ok(RlOutcome { adapters, curve })
}
