//! Analytic gradients through the network, the guided posterior mean, and the
//! Gaussian transition density.

use super::{dot, forward, DenoiserParams, ForwardCache, LoraSet};
use crate::diffusion::{mse, transition_logprob, ReverseStep};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::vocab::PromptTokens;

/// Which parameter set receives gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    /// Every entry of the flat network store.
    Full,
    /// Only the LoRA `A` and `B` matrices; base parameters are frozen.
    Adapters,
}

/// Gradient laid out like the selected trainable store.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub trainable: Trainable,
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(
        trainable: Trainable,
        params: &DenoiserParams,
        adapters: Option<&LoraSet>,
    ) -> Result<Self> {
        let len = match trainable {
            Trainable::Full => params.values().len(),
            Trainable::Adapters => adapters
                .ok_or_else(|| {
                    Error::Parameter("adapter gradient requested without adapters".into())
                })?
                .values()
                .len(),
        };
        Ok(Self {
            trainable,
            values: vec![0.0; len],
        })
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        debug_assert_eq!(self.trainable, other.trainable);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Accumulate `∂(upstream · ε)/∂θ` for one forward pass into `grad`.
#[allow(clippy::too_many_arguments)]
fn backward(
    params: &DenoiserParams,
    adapters: Option<&LoraSet>,
    cache: &ForwardCache,
    z: &Image,
    t: usize,
    prompt: &PromptTokens,
    upstream: &[f64],
    grad: &mut Gradient,
) -> Result<()> {
    let full = grad.trainable == Trainable::Full;
    let active = adapters.filter(|a| a.enabled());
    if !full && active.is_none() {
        return Err(Error::Parameter(
            "adapter gradient requested but adapters are not enabled".into(),
        ));
    }
    let layout = params.layout();
    let arch = params.arch();
    let values = params.values();
    let g_out = &mut grad.values;

    if full {
        g_out[layout.skip_gain.start + t - 1] += dot(upstream, z.as_slice());
    }

    let mut g = upstream.to_vec();
    for li in (0..layout.layers.len()).rev() {
        let l = &layout.layers[li];
        let x = &cache.inputs[li];
        if full {
            for (i, gi) in g.iter().enumerate() {
                if *gi != 0.0 {
                    let w0 = l.weight.start + i * l.cols;
                    axpy(*gi, x, &mut g_out[w0..w0 + l.cols]);
                }
                g_out[l.bias.start + i] += gi;
            }
        }
        let lora = active.and_then(|set| set.layer(li).map(|ll| (set, ll)));
        let mut u = Vec::new();
        if let Some((set, ll)) = lora {
            let r = set.rank();
            let s = set.scaling();
            let ax = cache.lora_hidden[li]
                .as_ref()
                .expect("forward cached the adapter activations");
            let b = set.b(ll);
            u = vec![0.0; r];
            for (i, gi) in g.iter().enumerate() {
                axpy(s * gi, &b[i * r..(i + 1) * r], &mut u);
            }
            if !full {
                for (i, gi) in g.iter().enumerate() {
                    let b0 = ll.b.start + i * r;
                    axpy(s * gi, ax, &mut g_out[b0..b0 + r]);
                }
                for (k, uk) in u.iter().enumerate() {
                    let a0 = ll.a.start + k * ll.cols;
                    axpy(*uk, x, &mut g_out[a0..a0 + ll.cols]);
                }
            }
        }
        if li == 0 && !full {
            break;
        }
        let w = &values[l.weight.clone()];
        let mut gx = vec![0.0; l.cols];
        for (i, gi) in g.iter().enumerate() {
            if *gi != 0.0 {
                axpy(*gi, &w[i * l.cols..(i + 1) * l.cols], &mut gx);
            }
        }
        if let Some((set, ll)) = lora {
            let a = set.a(ll);
            for (k, uk) in u.iter().enumerate() {
                axpy(*uk, &a[k * ll.cols..(k + 1) * ll.cols], &mut gx);
            }
        }
        if li > 0 {
            // inputs[li] = tanh(pre_{li-1})
            g = gx.iter().zip(x).map(|(gv, h)| gv * (1.0 - h * h)).collect();
        } else {
            let d_img = arch.image.len();
            let d_e = arch.embed_dim;
            let d_t = arch.time_dim;
            let g_cond = &gx[d_img..d_img + d_e];
            if !prompt.is_null() {
                let n = prompt.tokens().len() as f64;
                for tok in prompt.tokens() {
                    let r0 = layout.token_embedding.start + tok.id() * d_e;
                    axpy(1.0 / n, g_cond, &mut g_out[r0..r0 + d_e]);
                }
            }
            let t0 = layout.time_embedding.start + (t - 1) * d_t;
            axpy(1.0, &gx[d_img + d_e..], &mut g_out[t0..t0 + d_t]);
        }
    }
    Ok(())
}

/// Squared-error loss against `target` (averaged over entries) and its gradient.
pub fn backprop_mse(
    params: &DenoiserParams,
    adapters: Option<&LoraSet>,
    z: &Image,
    t: usize,
    prompt: &PromptTokens,
    target: &Image,
    trainable: Trainable,
) -> Result<(f64, Gradient)> {
    let mut grad = Gradient::zeros(trainable, params, adapters)?;
    let loss = accumulate_mse(params, adapters, z, t, prompt, target, 1.0, &mut grad)?;
    Ok((loss, grad))
}

/// Adds `weight · ∇loss` into `grad` and returns the loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_mse(
    params: &DenoiserParams,
    adapters: Option<&LoraSet>,
    z: &Image,
    t: usize,
    prompt: &PromptTokens,
    target: &Image,
    weight: f64,
    grad: &mut Gradient,
) -> Result<f64> {
    if target.shape() != params.arch().image {
        return Err(Error::shape(params.arch().image, target.shape()));
    }
    let cond = params.embed_prompt(prompt);
    let cache = forward(params, adapters, z, t, &cond)?;
    let pred = Image::from_vec(params.arch().image, cache.output.clone())?;
    let loss = mse(&pred, target);
    let d = target.len() as f64;
    let upstream: Vec<f64> = cache
        .output
        .iter()
        .zip(target.as_slice())
        .map(|(o, y)| weight * 2.0 * (o - y) / d)
        .collect();
    backward(params, adapters, &cache, z, t, prompt, &upstream, grad)?;
    Ok(loss)
}

/// Forward passes for one guided reverse step.
pub(crate) struct GuidedStep {
    cond: Option<ForwardCache>,
    uncond: Option<ForwardCache>,
    pub mean: Image,
}

pub(crate) fn guided_forward(
    params: &DenoiserParams,
    adapters: Option<&LoraSet>,
    step: &ReverseStep,
    z_t: &Image,
    prompt: &PromptTokens,
    scale: f64,
) -> Result<GuidedStep> {
    let shape = params.arch().image;
    let null = vec![0.0; params.arch().embed_dim];
    let (cond, uncond, eps) = if scale == 1.0 {
        let c = forward(params, adapters, z_t, step.t, &params.embed_prompt(prompt))?;
        let eps = Image::from_vec(shape, c.output.clone())?;
        (Some(c), None, eps)
    } else {
        let u = forward(params, adapters, z_t, step.t, &null)?;
        if scale == 0.0 {
            let eps = Image::from_vec(shape, u.output.clone())?;
            (None, Some(u), eps)
        } else {
            let c = forward(params, adapters, z_t, step.t, &params.embed_prompt(prompt))?;
            let data = u
                .output
                .iter()
                .zip(&c.output)
                .map(|(uv, cv)| uv + scale * (cv - uv))
                .collect();
            (Some(c), Some(u), Image::from_vec(shape, data)?)
        }
    };
    let mean = step.mean(z_t, &eps)?;
    Ok(GuidedStep { cond, uncond, mean })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn guided_backward(
    params: &DenoiserParams,
    adapters: Option<&LoraSet>,
    fwd: &GuidedStep,
    step: &ReverseStep,
    z_t: &Image,
    prompt: &PromptTokens,
    scale: f64,
    upstream_mean: &[f64],
    grad: &mut Gradient,
) -> Result<()> {
    let k = step.eps_coefficient();
    if let Some(c) = &fwd.cond {
        let w = if fwd.uncond.is_some() { scale * k } else { k };
        let up: Vec<f64> = upstream_mean.iter().map(|g| w * g).collect();
        backward(params, adapters, c, z_t, step.t, prompt, &up, grad)?;
    }
    if let Some(u) = &fwd.uncond {
        let w = if fwd.cond.is_some() {
            (1.0 - scale) * k
        } else {
            k
        };
        let up: Vec<f64> = upstream_mean.iter().map(|g| w * g).collect();
        backward(
            params,
            adapters,
            u,
            z_t,
            step.t,
            &PromptTokens::null(),
            &up,
            grad,
        )?;
    }
    Ok(())
}

/// Gradient of `upstream · μ(z_t)` where μ is the guided posterior mean.
#[allow(clippy::too_many_arguments)]
pub fn backprop_guided_mean(
    params: &DenoiserParams,
    adapters: Option<&LoraSet>,
    step: &ReverseStep,
    z_t: &Image,
    prompt: &PromptTokens,
    scale: f64,
    upstream_mean: &[f64],
    trainable: Trainable,
) -> Result<(Image, Gradient)> {
    let mut grad = Gradient::zeros(trainable, params, adapters)?;
    let fwd = guided_forward(params, adapters, step, z_t, prompt, scale)?;
    guided_backward(
        params,
        adapters,
        &fwd,
        step,
        z_t,
        prompt,
        scale,
        upstream_mean,
        &mut grad,
    )?;
    Ok((fwd.mean, grad))
}

/// Log-density of the transition `z_t -> z_prev` and its gradient.
#[allow(clippy::too_many_arguments)]
pub fn backprop_logprob(
    params: &DenoiserParams,
    adapters: Option<&LoraSet>,
    step: &ReverseStep,
    z_t: &Image,
    z_prev: &Image,
    prompt: &PromptTokens,
    scale: f64,
    trainable: Trainable,
) -> Result<(f64, Gradient)> {
    let mut grad = Gradient::zeros(trainable, params, adapters)?;
    let lp = accumulate_logprob(
        params,
        adapters,
        step,
        z_t,
        z_prev,
        prompt,
        scale,
        |_| 1.0,
        &mut grad,
    )?;
    Ok((lp, grad))
}

/// Computes the current log-probability, asks `weight_of` for a weight given
/// it, and adds `weight · ∇logp` into `grad`. Returns the log-probability.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_logprob<F: FnOnce(f64) -> f64>(
    params: &DenoiserParams,
    adapters: Option<&LoraSet>,
    step: &ReverseStep,
    z_t: &Image,
    z_prev: &Image,
    prompt: &PromptTokens,
    scale: f64,
    weight_of: F,
    grad: &mut Gradient,
) -> Result<f64> {
    if !step.is_stochastic() {
        return Err(Error::Degenerate(format!(
            "reverse step at t = {} is deterministic",
            step.t
        )));
    }
    let fwd = guided_forward(params, adapters, step, z_t, prompt, scale)?;
    let lp = transition_logprob(z_prev, &fwd.mean, step.sigma)?;
    let weight = weight_of(lp);
    if weight != 0.0 {
        let var = step.sigma * step.sigma;
        let upstream: Vec<f64> = z_prev
            .as_slice()
            .iter()
            .zip(fwd.mean.as_slice())
            .map(|(x, m)| weight * (x - m) / var)
            .collect();
        guided_backward(
            params, adapters, &fwd, step, z_t, prompt, scale, &upstream, grad,
        )?;
    }
    Ok(lp)
}
