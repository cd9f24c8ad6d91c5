//! Base pretraining and subject personalization with prior preservation.

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{PersonalizeConfig, PretrainConfig, SamplingConfig};
use crate::denoiser::{
    accumulate_mse, adamw_step, Architecture, Denoiser, DenoiserParams, Gradient, OptimizerState,
    Trainable,
};
use crate::diffusion::{ancestral_sample, forward_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{normal_vec, stream, Rng};
use crate::toyworld::World;
use crate::train::{accumulate, mean};
use crate::vocab::{PromptTokens, Token, TokenKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PretrainRow {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PersonalizeRow {
    pub step: usize,
    pub loss_subject: f64,
    /// `None` when the prior term is disabled.
    pub loss_prior: Option<f64>,
}

/// A noised training example: `z_t` at timestep `t` with target noise `ε`.
#[derive(Debug, Clone)]
pub struct NoisedExample {
    pub prompt: PromptTokens,
    pub t: usize,
    pub eps: Image,
    pub z_t: Image,
}

/// Draw `t ~ U{1..T}` then `ε ~ N(0, I)` and noise `z0`.
pub fn noise_example(
    z0: &Image,
    prompt: PromptTokens,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<NoisedExample> {
    let t = rng.gen_range(1..=sched.len());
    let eps = Image::from_vec(z0.shape(), normal_vec(rng, z0.len()))?;
    let z_t = forward_noise(z0, t, &eps, sched)?;
    Ok(NoisedExample {
        prompt,
        t,
        eps,
        z_t,
    })
}

/// Initial parameters for a run.
///
/// Skip gains start at `1 / sqrt(1 - ᾱ_t)`, the exact noise predictor for a
/// pixel whose clean value is 0. Starting from 1 leaves the small-`t` gains
/// (up to ~30) badly underfit and the samples visibly noisy.
pub fn initial_params(
    arch: Architecture,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<DenoiserParams> {
    if arch.timesteps != sched.len() {
        return Err(Error::Parameter(format!(
            "architecture has {} timesteps but the schedule has {}",
            arch.timesteps,
            sched.len()
        )));
    }
    let mut params = DenoiserParams::init(arch, &mut stream(seed, "init", 0))?;
    let gains = params.layout().skip_gain.clone();
    for (t, g) in (1..=sched.len()).zip(&mut params.values_mut()[gains]) {
        *g = 1.0 / (1.0 - sched.alpha_bar(t)).sqrt();
    }
    Ok(params)
}

/// Train a fresh denoiser on the pretraining distribution.
///
/// Each example's prompt is replaced by the null prompt with probability
/// `null_prob`, so the model also learns the unconditional prediction used by
/// guidance.
pub fn pretrain_base(
    world: &World,
    arch: Architecture,
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(DenoiserParams, Vec<PretrainRow>)> {
    let mut params = initial_params(arch, sched, seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer.adamw(), params.values().len());
    let mask = params.layout().decay_mask();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|i| {
                let mut rng = stream(seed, "pretrain", (step * cfg.batch_size + i) as u64);
                let (img, prompt) = world.sample_pretrain_example(&mut rng);
                let prompt = if rng.gen_bool(cfg.null_prob) {
                    PromptTokens::null()
                } else {
                    prompt
                };
                noise_example(&img, prompt, sched, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut grad, losses) = accumulate(&batch, Trainable::Full, &params, None, |_, ex, g| {
            accumulate_mse(&params, None, &ex.z_t, ex.t, &ex.prompt, &ex.eps, 1.0, g)
        })?;
        grad.scale(1.0 / cfg.batch_size as f64);
        adamw_step(params.values_mut(), &grad.values, &mask, &mut opt)?;
        log.push(PretrainRow {
            step,
            loss: mean(&losses),
        });
    }
    if !params.is_finite() {
        return Err(Error::Numeric(
            "pretraining produced non-finite parameters".into(),
        ));
    }
    Ok((params, log))
}

/// `(c, c_pr)`: the identifier prompt and the bare class prompt.
pub fn build_personalization_prompt(
    identifier: Token,
    class: Token,
    description: Option<Token>,
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
    let mut c = vec![identifier];
    if let Some(d) = description {
        if d.kind() != TokenKind::Modifier {
            return Err(Error::Prompt(format!(
                "{} is not a description word",
                d.word()
            )));
        }
        c.push(d);
    }
    c.push(class);
    Ok((PromptTokens::new(c)?, PromptTokens::new(vec![class])?))
}

/// `n` independent guided samples under the class prompt.
pub fn generate_prior_set(
    params: &DenoiserParams,
    class_prompt: &PromptTokens,
    n: usize,
    sampling: &SamplingConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Image>> {
    if class_prompt.has_identifier() {
        return Err(Error::Prompt(
            "prior images are generated without the identifier".into(),
        ));
    }
    let model = Denoiser::new(params, None);
    let cfg = sampling.sampler(false);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "prior", i as u64);
            Ok(ancestral_sample(&model, class_prompt, &cfg, sched, &mut rng, seed)?.image())
        })
        .collect()
}

/// Gradient mask that zeroes the token embedding table unless it is trainable.
fn embedding_freeze(
    params: &DenoiserParams,
    train_embeddings: bool,
) -> Option<std::ops::Range<usize>> {
    (!train_embeddings).then(|| params.layout().token_embedding.clone())
}

/// One step on `L = ‖ε - ε(z_t, t, c)‖² + ‖ε' - ε(z'_t', t', c_pr)‖²`.
///
/// The two noise draws are independent; with `prior` absent only the subject
/// term is used. Returns the two losses.
#[allow(clippy::too_many_arguments)]
pub fn personalize_step(
    params: &mut DenoiserParams,
    subject: &Image,
    prior: Option<&Image>,
    c: &PromptTokens,
    c_pr: &PromptTokens,
    sched: &NoiseSchedule,
    opt: &mut OptimizerState,
    train_embeddings: bool,
    rng: &mut Rng,
) -> Result<(f64, Option<f64>)> {
    let ex_subject = noise_example(subject, c.clone(), sched, rng)?;
    let ex_prior = prior
        .map(|img| noise_example(img, c_pr.clone(), sched, rng))
        .transpose()?;
    let (grad, loss_subject, loss_prior) =
        personalization_gradient(params, &ex_subject, ex_prior.as_ref())?;
    let mut grad = grad;
    if let Some(range) = embedding_freeze(params, train_embeddings) {
        grad.values[range].iter_mut().for_each(|g| *g = 0.0);
    }
    let mask = params.layout().decay_mask();
    adamw_step(params.values_mut(), &grad.values, &mask, opt)?;
    Ok((loss_subject, loss_prior))
}

/// Gradient of the summed (unit-weight) personalization loss.
pub fn personalization_gradient(
    params: &DenoiserParams,
    subject: &NoisedExample,
    prior: Option<&NoisedExample>,
) -> Result<(Gradient, f64, Option<f64>)> {
    let mut grad = Gradient::zeros(Trainable::Full, params, None)?;
    let ls = accumulate_mse(
        params,
        None,
        &subject.z_t,
        subject.t,
        &subject.prompt,
        &subject.eps,
        1.0,
        &mut grad,
    )?;
    let lp = match prior {
        Some(ex) => Some(accumulate_mse(
            params, None, &ex.z_t, ex.t, &ex.prompt, &ex.eps, 1.0, &mut grad,
        )?),
        None => None,
    };
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite personalization gradient".into()));
    }
    Ok((grad, ls, lp))
}

/// Fine-tune every network parameter on the reference images, cycling through
/// references and prior images one of each per step.
pub fn run_personalization(
    base: &DenoiserParams,
    references: &[Image],
    priors: &[Image],
    sched: &NoiseSchedule,
    cfg: &PersonalizeConfig,
    seed: u64,
) -> Result<(DenoiserParams, Vec<PersonalizeRow>)> {
    if references.is_empty() {
        return Err(Error::Parameter(
            "personalization needs at least one reference image".into(),
        ));
    }
    if cfg.prior_preservation && priors.is_empty() {
        return Err(Error::Parameter(
            "prior preservation needs a prior set".into(),
        ));
    }
    let (c, c_pr) = build_personalization_prompt(cfg.identifier, cfg.class, cfg.description)?;
    let mut params = base.clone();
    let mut opt = OptimizerState::new(cfg.optimizer.adamw(), params.values().len());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = stream(seed, "personalize", step as u64);
        let subject = &references[step % references.len()];
        let prior = cfg.prior_preservation.then(|| &priors[step % priors.len()]);
        let (loss_subject, loss_prior) = personalize_step(
            &mut params,
            subject,
            prior,
            &c,
            &c_pr,
            sched,
            &mut opt,
            cfg.train_token_embeddings,
            &mut rng,
        )?;
        log.push(PersonalizeRow {
            step,
            loss_subject,
            loss_prior,
        });
    }
    if !params.is_finite() {
        return Err(Error::Numeric(
            "personalization produced non-finite parameters".into(),
        ));
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::image::Shape;

    fn tiny() -> (World, Architecture, NoiseSchedule) {
        let world = World::new(Default::default()).unwrap();
        let arch = Architecture::new(world.shape(), 10, 4, 4, vec![8]);
        (world, arch, NoiseSchedule::linear(10, 1e-3, 0.3).unwrap())
    }

    #[test]
    fn prompt_construction() {
        let (c, c_pr) =
            build_personalization_prompt(Token::Identifier, Token::Plushie, None).unwrap();
        assert_eq!(c.tokens(), &[Token::Identifier, Token::Plushie]);
        assert_eq!(c_pr.tokens(), &[Token::Plushie]);
        let (c, c_pr) = build_personalization_prompt(
            Token::Identifier,
            Token::Plushie,
            Some(Token::Triangular),
        )
        .unwrap();
        assert_eq!(
            c.tokens(),
            &[Token::Identifier, Token::Triangular, Token::Plushie]
        );
        assert_eq!(c_pr.tokens(), &[Token::Plushie]);
        assert!(!c_pr.has_identifier());
        assert!(build_personalization_prompt(Token::Identifier, Token::Grass, None).is_err());
        assert!(
            build_personalization_prompt(Token::Identifier, Token::Cup, Some(Token::Snow)).is_err()
        );
    }

    #[test]
    fn zero_steps_return_the_initialization() {
        let (world, arch, sched) = tiny();
        let cfg = PretrainConfig {
            steps: 0,
            ..Default::default()
        };
        let (p, log) = pretrain_base(&world, arch.clone(), &sched, &cfg, 3).unwrap();
        assert_eq!(p, initial_params(arch, &sched, 3).unwrap());
        assert!(log.is_empty());
    }

    #[test]
    fn pretraining_is_deterministic_and_reduces_loss() {
        let (world, arch, sched) = tiny();
        let cfg = PretrainConfig {
            steps: 200,
            batch_size: 8,
            ..Default::default()
        };
        let (a, log) = pretrain_base(&world, arch.clone(), &sched, &cfg, 1).unwrap();
        let (b, _) = pretrain_base(&world, arch.clone(), &sched, &cfg, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(log.len(), 200);
        // the per-step losses are heavy-tailed in t, so compare on a fixed held-out set
        let held_out = |p: &DenoiserParams| {
            let model = Denoiser::new(p, None);
            let losses: Vec<f64> = (0..256)
                .map(|i| {
                    let mut rng = stream(99, "held-out", i);
                    let (img, prompt) = world.sample_pretrain_example(&mut rng);
                    crate::diffusion::ddpm_loss(&model, &img, &prompt, &sched, &mut rng)
                        .unwrap()
                        .loss
                })
                .collect();
            mean(&losses)
        };
        let before = held_out(&initial_params(arch, &sched, 1).unwrap());
        let after = held_out(&a);
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn removing_the_prior_term_leaves_the_plain_subject_gradient() {
        let (world, arch, sched) = tiny();
        let params = initial_params(arch, &sched, 5).unwrap();
        let refs = world.reference_images();
        let (c, c_pr) =
            build_personalization_prompt(Token::Identifier, Token::Plushie, None).unwrap();
        let mut rng = stream(0, "t", 0);
        let ex = noise_example(&refs[0], c.clone(), &sched, &mut rng).unwrap();
        let pr = noise_example(&refs[1], c_pr, &sched, &mut rng).unwrap();
        let (g_alone, ls, lp) = personalization_gradient(&params, &ex, None).unwrap();
        assert!(lp.is_none());
        let (plain_loss, plain) = crate::denoiser::backprop_mse(
            &params,
            None,
            &ex.z_t,
            ex.t,
            &c,
            &ex.eps,
            Trainable::Full,
        )
        .unwrap();
        assert_eq!(ls, plain_loss);
        assert_eq!(g_alone.values, plain.values);
        // with the prior, the gradient is the plain sum of both terms
        let (g_both, _, _) = personalization_gradient(&params, &ex, Some(&pr)).unwrap();
        let (_, g_prior) = crate::denoiser::backprop_mse(
            &params,
            None,
            &pr.z_t,
            pr.t,
            &pr.prompt,
            &pr.eps,
            Trainable::Full,
        )
        .unwrap();
        for ((b, s), p) in g_both.values.iter().zip(&plain.values).zip(&g_prior.values) {
            assert!((b - (s + p)).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn zero_personalization_steps_return_the_base() {
        let (world, arch, sched) = tiny();
        let base = initial_params(arch, &sched, 2).unwrap();
        let cfg = PersonalizeConfig {
            steps: 0,
            prior_preservation: false,
            ..Default::default()
        };
        let (p, log) =
            run_personalization(&base, &world.reference_images(), &[], &sched, &cfg, 0).unwrap();
        assert_eq!(p, base);
        assert!(log.is_empty());
    }

    #[test]
    fn embeddings_move_only_when_trainable() {
        let (world, arch, sched) = tiny();
        let base = initial_params(arch, &sched, 2).unwrap();
        let priors = vec![Image::zeros(Shape::new(16, 16, 3)); 2];
        let mut cfg = PersonalizeConfig {
            steps: 5,
            train_token_embeddings: false,
            optimizer: crate::config::OptimizerConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..RunConfig::default().personalize
        };
        let (p, log) =
            run_personalization(&base, &world.reference_images(), &priors, &sched, &cfg, 0)
                .unwrap();
        let r = base.layout().token_embedding.clone();
        assert_eq!(p.values()[r.clone()], base.values()[r.clone()]);
        assert_ne!(p.values(), base.values());
        assert_eq!(log.len(), 5);
        assert!(log.iter().all(|row| row.loss_prior.is_some()));
        cfg.train_token_embeddings = true;
        let (p, _) =
            run_personalization(&base, &world.reference_images(), &priors, &sched, &cfg, 0)
                .unwrap();
        assert_ne!(p.values()[r.clone()], base.values()[r]);
    }
}
