//! Diffusion-process mathematics: noise schedule, forward noising, the reverse
//! transition, its log-density, and the guided ancestral sampler.
//!
//! Timesteps are 1-based (`1..=T`); index 0 denotes the clean sample and
//! `alpha_bar(0) == 1`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::rng::{normal_vec, Rng};
use crate::vocab::PromptTokens;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Precomputed β, α, ᾱ and reverse-step σ tables.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β schedule with DDPM posterior variances `σ_t² = β_t (1-ᾱ_{t-1}) / (1-ᾱ_t)`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("schedule needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (i as f64) / ((steps - 1) as f64) * (beta_end - beta_start)
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])).sqrt()
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Parameter(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    /// The reverse steps visited by a sampler with `steps` inference steps.
    ///
    /// `steps` must divide `T`; with stride `k = T / steps` the visited
    /// timesteps are `T, T-k, …, k`, each transitioning to `t - k`, with β and
    /// σ re-derived from the strided ᾱ ratio.
    pub fn reverse_plan(&self, steps: usize) -> Result<Vec<ReverseStep>> {
        let total = self.len();
        if steps == 0 || steps > total || total % steps != 0 {
            return Err(Error::Parameter(format!(
                "inference steps {steps} must divide T = {total}"
            )));
        }
        let stride = total / steps;
        Ok((1..=steps)
            .rev()
            .map(|i| {
                let t = i * stride;
                let t_prev = t - stride;
                let ab = self.alpha_bar(t);
                let ab_prev = self.alpha_bar(t_prev);
                let (alpha, beta) = if stride == 1 {
                    (self.alpha(t), self.beta(t))
                } else {
                    let a = ab / ab_prev;
                    (a, 1.0 - a)
                };
                let sigma = if stride == 1 {
                    self.sigma(t)
                } else {
                    (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
                };
                ReverseStep {
                    t,
                    t_prev,
                    alpha,
                    beta,
                    alpha_bar: ab,
                    sigma,
                }
            })
            .collect())
    }
}

/// One reverse transition `z_t -> z_{t_prev}` with its effective constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseStep {
    pub t: usize,
    pub t_prev: usize,
    pub alpha: f64,
    pub beta: f64,
    pub alpha_bar: f64,
    pub sigma: f64,
}

impl ReverseStep {
    pub fn is_stochastic(&self) -> bool {
        self.sigma > 0.0
    }

    /// Coefficient of ε̂ in the posterior mean: `-β / (√α √(1-ᾱ))`.
    pub fn eps_coefficient(&self) -> f64 {
        -self.beta / (self.alpha.sqrt() * (1.0 - self.alpha_bar).sqrt())
    }

    pub fn mean(&self, z_t: &Image, eps: &Image) -> Result<Image> {
        z_t.ensure_same_shape(eps)?;
        let inv = 1.0 / self.alpha.sqrt();
        let k = self.beta / (1.0 - self.alpha_bar).sqrt();
        let data = z_t
            .as_slice()
            .iter()
            .zip(eps.as_slice())
            .map(|(z, e)| inv * (z - k * e))
            .collect();
        Image::from_vec(z_t.shape(), data)
    }
}

/// `√ᾱ_t z0 + √(1-ᾱ_t) ε`.
pub fn forward_noise(z0: &Image, t: usize, eps: &Image, sched: &NoiseSchedule) -> Result<Image> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    z0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Mean of `p(z_{t-1} | z_t, c)` given the predicted noise.
pub fn posterior_mean(
    z_t: &Image,
    t: usize,
    eps_pred: &Image,
    sched: &NoiseSchedule,
) -> Result<Image> {
    sched.check_t(t)?;
    ReverseStep {
        t,
        t_prev: t - 1,
        alpha: sched.alpha(t),
        beta: sched.beta(t),
        alpha_bar: sched.alpha_bar(t),
        sigma: sched.sigma(t),
    }
    .mean(z_t, eps_pred)
}

/// Log-density of `z_prev` under the isotropic Gaussian `N(mean, σ² I)`.
pub fn transition_logprob(z_prev: &Image, mean: &Image, sigma: f64) -> Result<f64> {
    z_prev.ensure_same_shape(mean)?;
    if !(sigma > 0.0) {
        return Err(Error::Degenerate(format!(
            "transition with sigma = {sigma} has no density"
        )));
    }
    let var = sigma * sigma;
    let norm = -0.5 * (LN_2PI + var.ln());
    let sq: f64 = z_prev
        .as_slice()
        .iter()
        .zip(mean.as_slice())
        .map(|(x, m)| (x - m) * (x - m))
        .sum();
    Ok(norm * z_prev.len() as f64 - sq / (2.0 * var))
}

/// Score of the Gaussian with respect to its mean: `(z_prev - mean) / σ²`.
pub fn gaussian_mean_score(z_prev: &Image, mean: &Image, sigma: f64) -> Result<Vec<f64>> {
    z_prev.ensure_same_shape(mean)?;
    if !(sigma > 0.0) {
        return Err(Error::Degenerate(format!(
            "transition with sigma = {sigma} has no density"
        )));
    }
    let var = sigma * sigma;
    Ok(z_prev
        .as_slice()
        .iter()
        .zip(mean.as_slice())
        .map(|(x, m)| (x - m) / var)
        .collect())
}

/// A conditional noise predictor `ε(z, t, c)`.
pub trait NoisePredictor: Sync {
    fn image_shape(&self) -> Shape;

    /// Conditioning vector for a prompt.
    fn condition(&self, prompt: &PromptTokens) -> Vec<f64>;

    /// The reserved unconditional (null) conditioning.
    fn null_condition(&self) -> Vec<f64>;

    fn predict(&self, z: &Image, t: usize, cond: &[f64]) -> Result<Image>;
}

/// Classifier-free guided noise `ε_u + s (ε_c - ε_u)`.
///
/// `s = 0` and `s = 1` short-circuit to exactly `ε_u` and `ε_c`.
pub fn guided_eps<P: NoisePredictor + ?Sized>(
    model: &P,
    z: &Image,
    t: usize,
    cond: &[f64],
    null: &[f64],
    scale: f64,
) -> Result<Image> {
    if scale == 1.0 {
        return model.predict(z, t, cond);
    }
    let uncond = model.predict(z, t, null)?;
    if scale == 0.0 {
        return Ok(uncond);
    }
    let cond_eps = model.predict(z, t, cond)?;
    let data = uncond
        .as_slice()
        .iter()
        .zip(cond_eps.as_slice())
        .map(|(u, c)| u + scale * (c - u))
        .collect();
    Image::from_vec(z.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub record_trajectory: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 7.5,
            record_trajectory: true,
        }
    }
}

/// A denoising chain `z_T … z_0` viewed as an MDP episode.
///
/// `logprobs[k]` is the behavior log-density of `states[k + 1]` given
/// `states[k]`; deterministic steps (σ = 0) carry `0.0` and are excluded from
/// every policy-gradient sum. When the sampler ran without recording, `states`
/// holds only the final sample and `logprobs` is empty.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub prompt: PromptTokens,
    pub states: Vec<Image>,
    pub logprobs: Vec<f64>,
    pub plan: Vec<ReverseStep>,
    pub reward: Option<f64>,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Trajectory {
    pub fn is_recorded(&self) -> bool {
        self.states.len() == self.plan.len() + 1
    }

    /// Final sample `z_0`, unclamped.
    pub fn final_state(&self) -> &Image {
        self.states
            .last()
            .expect("trajectory has at least one state")
    }

    /// `z_0` clamped into the image range; this is what gets scored.
    pub fn image(&self) -> Image {
        self.final_state().clamped()
    }

    /// Indices of reverse steps that carry a log-probability.
    pub fn stochastic_steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.plan
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_stochastic())
            .map(|(k, _)| k)
    }
}

/// Guided Gaussian of reverse step `k` of a plan, evaluated at `z_t`.
pub fn step_mean<P: NoisePredictor + ?Sized>(
    model: &P,
    step: &ReverseStep,
    z_t: &Image,
    cond: &[f64],
    null: &[f64],
    scale: f64,
) -> Result<Image> {
    let eps = guided_eps(model, z_t, step.t, cond, null, scale)?;
    step.mean(z_t, &eps)
}

/// Log-probability of the recorded transition `k` under `model`.
pub fn recompute_logprob<P: NoisePredictor + ?Sized>(
    model: &P,
    traj: &Trajectory,
    k: usize,
    cond: &[f64],
    null: &[f64],
) -> Result<f64> {
    let step = &traj.plan[k];
    let mean = step_mean(
        model,
        step,
        &traj.states[k],
        cond,
        null,
        traj.guidance_scale,
    )?;
    transition_logprob(&traj.states[k + 1], &mean, step.sigma)
}

/// Guided ancestral sampling from `z_T ~ N(0, I)`.
pub fn ancestral_sample<P: NoisePredictor + ?Sized>(
    model: &P,
    prompt: &PromptTokens,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    seed: u64,
) -> Result<Trajectory> {
    let plan = sched.reverse_plan(cfg.steps)?;
    let shape = model.image_shape();
    let cond = model.condition(prompt);
    let null = model.null_condition();

    let mut z = Image::from_vec(shape, normal_vec(rng, shape.len()))?;
    let mut states = Vec::with_capacity(if cfg.record_trajectory {
        plan.len() + 1
    } else {
        1
    });
    let mut logprobs = Vec::new();
    for step in &plan {
        let mean = step_mean(model, step, &z, &cond, &null, cfg.guidance_scale)?;
        let next = if step.is_stochastic() {
            let noise = normal_vec(rng, shape.len());
            let data = mean
                .as_slice()
                .iter()
                .zip(&noise)
                .map(|(m, n)| m + step.sigma * n)
                .collect();
            let next = Image::from_vec(shape, data)?;
            if cfg.record_trajectory {
                logprobs.push(transition_logprob(&next, &mean, step.sigma)?);
            }
            next
        } else {
            if cfg.record_trajectory {
                logprobs.push(0.0);
            }
            mean
        };
        if cfg.record_trajectory {
            states.push(std::mem::replace(&mut z, next));
        } else {
            z = next;
        }
    }
    states.push(z);
    Ok(Trajectory {
        prompt: prompt.clone(),
        states,
        logprobs,
        plan,
        reward: None,
        guidance_scale: cfg.guidance_scale,
        seed,
    })
}

/// One draw of the denoising objective.
#[derive(Debug, Clone)]
pub struct DdpmDraw {
    pub loss: f64,
    pub t: usize,
    pub eps: Image,
    pub z_t: Image,
}

/// Draw `t ~ U{1..T}` and `ε ~ N(0, I)`, then score `‖ε - ε(z_t, t, c)‖²`
/// averaged over entries.
pub fn ddpm_loss<P: NoisePredictor + ?Sized>(
    model: &P,
    z0: &Image,
    prompt: &PromptTokens,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<DdpmDraw> {
    let cond = model.condition(prompt);
    ddpm_loss_with_condition(model, z0, &cond, sched, rng)
}

pub fn ddpm_loss_with_condition<P: NoisePredictor + ?Sized>(
    model: &P,
    z0: &Image,
    cond: &[f64],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<DdpmDraw> {
    let t = rng.gen_range(1..=sched.len());
    let eps = Image::from_vec(z0.shape(), normal_vec(rng, z0.len()))?;
    let z_t = forward_noise(z0, t, &eps, sched)?;
    let pred = model.predict(&z_t, t, cond)?;
    let loss = mse(&pred, &eps);
    Ok(DdpmDraw { loss, t, eps, z_t })
}

pub(crate) fn mse(a: &Image, b: &Image) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}
