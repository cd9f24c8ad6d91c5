//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use glyphbooth::config::RunConfig;
use glyphbooth::denoiser::{
    backprop_logprob, backprop_mse, predict_eps, Architecture, Denoiser, DenoiserParams, LoraSet,
    Trainable,
};
use glyphbooth::diffusion::{step_mean, transition_logprob, NoiseSchedule, ReverseStep};
use glyphbooth::image::{Image, Shape};
use glyphbooth::rng::{normal, normal_vec, Rng};
use glyphbooth::vocab::{PromptTokens, Token};
use rand::seq::SliceRandom;
use rand::Rng as _;

#[derive(Debug, Clone)]
pub enum Objective {
    Mse {
        z: Image,
        t: usize,
        target: Image,
    },
    Logprob {
        step: ReverseStep,
        z_t: Image,
        z_prev: Image,
        scale: f64,
    },
}

#[derive(Debug, Clone)]
pub struct GradInstance {
    pub params: DenoiserParams,
    pub adapters: Option<LoraSet>,
    pub trainable: Trainable,
    pub prompt: PromptTokens,
    pub objective: Objective,
}

pub fn random_prompt(rng: &mut Rng) -> PromptTokens {
    if rng.gen_bool(0.15) {
        return PromptTokens::null();
    }
    let mut pool: Vec<Token> = Token::ALL[2..].to_vec();
    pool.shuffle(rng);
    let mut tokens: Vec<Token> = pool[..rng.gen_range(1..=3)].to_vec();
    if rng.gen_bool(0.4) {
        tokens.insert(0, Token::Identifier);
    }
    PromptTokens::new(tokens).expect("valid prompt")
}

fn random_image(rng: &mut Rng, shape: Shape, scale: f64) -> Image {
    let v = normal_vec(rng, shape.len())
        .into_iter()
        .map(|x| scale * x)
        .collect();
    Image::from_vec(shape, v).unwrap()
}

/// A small random network, optionally with enabled non-trivial adapters, and
/// either the noise-prediction loss or a guided transition log-density.
pub fn random_instance(rng: &mut Rng, trainable: Trainable, logprob: bool) -> GradInstance {
    let shape = Shape::new(
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
    );
    let timesteps = rng.gen_range(2..=6);
    let hidden: Vec<usize> = (0..rng.gen_range(1..=2))
        .map(|_| rng.gen_range(2..=5))
        .collect();
    let arch = Architecture::new(
        shape,
        timesteps,
        rng.gen_range(2..=4),
        rng.gen_range(1..=3),
        hidden,
    );
    let mut params = DenoiserParams::init(arch, rng).unwrap();
    for v in params.values_mut() {
        *v += 0.3 * normal(rng);
    }
    let n_layers = params.layout().layers.len();
    let adapters = if trainable == Trainable::Adapters || rng.gen_bool(0.3) {
        let mut layers: Vec<usize> = (0..n_layers).filter(|_| rng.gen_bool(0.6)).collect();
        if layers.is_empty() {
            layers.push(rng.gen_range(0..n_layers));
        }
        let mut set = LoraSet::attach(
            &params,
            &layers,
            rng.gen_range(1..=3),
            rng.gen_range(0.5..4.0),
            rng,
        )
        .unwrap();
        for v in set.values_mut() {
            *v += 0.5 * normal(rng);
        }
        set.set_enabled(true);
        Some(set)
    } else {
        None
    };
    let prompt = random_prompt(rng);
    let objective = if logprob {
        let sched = NoiseSchedule::linear(
            timesteps,
            rng.gen_range(0.01..0.05),
            rng.gen_range(0.2..0.4),
        )
        .unwrap();
        let plan = sched.reverse_plan(timesteps).unwrap();
        let stochastic: Vec<&ReverseStep> = plan.iter().filter(|s| s.is_stochastic()).collect();
        let step = **stochastic.choose(rng).unwrap();
        let scale = *[0.0, 1.0, rng.gen_range(0.0..8.0)].choose(rng).unwrap();
        let z_t = random_image(rng, shape, 1.0);
        // z_prev drawn from the transition itself, as in a recorded trajectory.
        let model = Denoiser::new(&params, adapters.as_ref());
        let cond = params.embed_prompt(&prompt);
        let mean = step_mean(&model, &step, &z_t, &cond, &vec![0.0; cond.len()], scale).unwrap();
        let z_prev = mean
            .lincomb(1.0, &random_image(rng, shape, 1.0), step.sigma)
            .unwrap();
        Objective::Logprob {
            step,
            z_t,
            z_prev,
            scale,
        }
    } else {
        Objective::Mse {
            z: random_image(rng, shape, 1.0),
            t: rng.gen_range(1..=timesteps),
            target: random_image(rng, shape, 1.0),
        }
    };
    GradInstance {
        params,
        adapters,
        trainable,
        prompt,
        objective,
    }
}

/// The objective recomputed from the forward pass only.
pub fn objective_value(
    params: &DenoiserParams,
    adapters: Option<&LoraSet>,
    inst: &GradInstance,
) -> f64 {
    match &inst.objective {
        Objective::Mse { z, t, target } => {
            let eps =
                predict_eps(params, adapters, z, *t, &params.embed_prompt(&inst.prompt)).unwrap();
            let n = eps.len() as f64;
            eps.as_slice()
                .iter()
                .zip(target.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n
        }
        Objective::Logprob {
            step,
            z_t,
            z_prev,
            scale,
        } => {
            let model = Denoiser::new(params, adapters);
            let cond = params.embed_prompt(&inst.prompt);
            let null = vec![0.0; cond.len()];
            let mean = step_mean(&model, step, z_t, &cond, &null, *scale).unwrap();
            transition_logprob(z_prev, &mean, step.sigma).unwrap()
        }
    }
}

pub fn analytic(inst: &GradInstance) -> (f64, Vec<f64>) {
    let (value, grad) = match &inst.objective {
        Objective::Mse { z, t, target } => backprop_mse(
            &inst.params,
            inst.adapters.as_ref(),
            z,
            *t,
            &inst.prompt,
            target,
            inst.trainable,
        ),
        Objective::Logprob {
            step,
            z_t,
            z_prev,
            scale,
        } => backprop_logprob(
            &inst.params,
            inst.adapters.as_ref(),
            step,
            z_t,
            z_prev,
            &inst.prompt,
            *scale,
            inst.trainable,
        ),
    }
    .unwrap();
    (value, grad.values)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Largest relative error between the analytic gradient and central
/// differences with step `h`, over every trainable coordinate.
///
/// The denominator floor is `1e-5 * max(1, max|grad|)`: entries more than five
/// orders below the largest one sit under the difference quotient's roundoff.
pub fn max_gradient_error(inst: &GradInstance, h: f64) -> f64 {
    let (value, grad) = analytic(inst);
    let base = objective_value(&inst.params, inst.adapters.as_ref(), inst);
    assert!(
        (value - base).abs() <= 1e-9 * base.abs().max(1.0),
        "{value} vs {base}"
    );
    let floor = 1e-5 * grad.iter().fold(1.0f64, |m, g| m.max(g.abs()));
    let mut worst = 0.0f64;
    for (i, a) in grad.iter().enumerate() {
        let eval = |delta: f64| match inst.trainable {
            Trainable::Full => {
                let mut p = inst.params.clone();
                p.values_mut()[i] += delta;
                objective_value(&p, inst.adapters.as_ref(), inst)
            }
            Trainable::Adapters => {
                let mut set = inst.adapters.clone().unwrap();
                set.values_mut()[i] += delta;
                objective_value(&inst.params, Some(&set), inst)
            }
        };
        let n = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max(relative_error(*a, n, floor));
    }
    worst
}

/// A full pipeline configuration small enough to run in about a second.
pub fn tiny_pipeline_config() -> RunConfig {
    let mut cfg = RunConfig {
        seed: 4,
        ..Default::default()
    };
    cfg.model.timesteps = 10;
    cfg.model.embed_dim = 4;
    cfg.model.time_dim = 4;
    cfg.model.hidden = vec![16];
    cfg.pretrain.steps = 20;
    cfg.pretrain.batch_size = 4;
    cfg.personalize.steps = 10;
    cfg.personalize.prior_set_size = 4;
    cfg.personalize.sampler.steps = 10;
    cfg.rl.epochs = 2;
    cfg.rl.rollouts = 4;
    cfg.rl.minibatch = 2;
    cfg.rl.clip_range = 0.2;
    cfg.rl.sampler.steps = 10;
    cfg.eval.samples = 2;
    cfg.eval.sampler.steps = 10;
    cfg.eval.prompts = vec!["[*] plushie with pens".into(), "plushie with pens".into()];
    cfg
}
