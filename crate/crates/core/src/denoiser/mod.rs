//! Conditional noise predictor `ε(z, t, c)`.
//!
//! A fully connected network over `[flatten(z); c; e_t]` with tanh hidden
//! layers and a linear output, plus a learned per-timestep gain on `z` added
//! to the output. The conditioning `c` is the mean of the prompt's token
//! embedding rows; the null prompt conditions on the zero vector.
//!
//! All parameters live in one flat `f64` store; [`Layout`] maps tensor names
//! to ranges of it.

mod adamw;
mod backprop;
mod lora;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};
pub(crate) use backprop::{accumulate_logprob, accumulate_mse, guided_backward, guided_forward};
pub use backprop::{backprop_guided_mean, backprop_logprob, backprop_mse, Gradient, Trainable};
pub use lora::{LoraLayer, LoraSet};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::rng::{normal, Rng};
use crate::vocab::{PromptTokens, Token, VOCAB_SIZE};

/// Shapes of every tensor in the network.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub image: Shape,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub timesteps: usize,
    /// Widths of the tanh hidden layers; the network has `hidden.len() + 1` layers.
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn new(
        image: Shape,
        timesteps: usize,
        embed_dim: usize,
        time_dim: usize,
        hidden: Vec<usize>,
    ) -> Self {
        Self {
            image,
            vocab_size: VOCAB_SIZE,
            embed_dim,
            time_dim,
            timesteps,
            hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.image.len() + self.embed_dim + self.time_dim
    }

    /// `(rows, cols)` of each layer's weight matrix.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim();
        for &h in &self.hidden {
            dims.push((h, fan_in));
            fan_in = h;
        }
        dims.push((self.image.len(), fan_in));
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.is_empty() || self.timesteps == 0 || self.vocab_size != VOCAB_SIZE {
            return Err(Error::Parameter(format!("invalid architecture {self:?}")));
        }
        if self.embed_dim == 0 || self.hidden.iter().any(|h| *h == 0) {
            return Err(Error::Parameter("zero-width layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRanges {
    pub rows: usize,
    pub cols: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

/// Offsets of each tensor in the flat parameter store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub token_embedding: Range<usize>,
    pub time_embedding: Range<usize>,
    pub skip_gain: Range<usize>,
    pub layers: Vec<LayerRanges>,
    pub len: usize,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let token_embedding = take(arch.vocab_size * arch.embed_dim);
        let time_embedding = take(arch.timesteps * arch.time_dim);
        let skip_gain = take(arch.timesteps);
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(rows, cols)| LayerRanges {
                rows,
                cols,
                weight: take(rows * cols),
                bias: take(rows),
            })
            .collect();
        Self {
            token_embedding,
            time_embedding,
            skip_gain,
            layers,
            len: at,
        }
    }

    /// Named tensors in storage order: `(name, range, shape)`.
    pub fn tensors(&self, arch: &Architecture) -> Vec<(String, Range<usize>, Vec<usize>)> {
        let mut out = vec![
            (
                "token_embedding".to_string(),
                self.token_embedding.clone(),
                vec![arch.vocab_size, arch.embed_dim],
            ),
            (
                "time_embedding".to_string(),
                self.time_embedding.clone(),
                vec![arch.timesteps, arch.time_dim],
            ),
            (
                "skip_gain".to_string(),
                self.skip_gain.clone(),
                vec![arch.timesteps],
            ),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((
                format!("layer{i}.weight"),
                l.weight.clone(),
                vec![l.rows, l.cols],
            ));
            out.push((format!("layer{i}.bias"), l.bias.clone(), vec![l.rows]));
        }
        out
    }

    /// Weight decay applies to layer weight matrices only.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len];
        for l in &self.layers {
            mask[l.weight.clone()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }
}

/// Network parameters `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    arch: Architecture,
    layout: Layout,
    values: Vec<f64>,
}

impl DenoiserParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let values = vec![0.0; layout.len];
        Ok(Self {
            arch,
            layout,
            values,
        })
    }

    /// Embeddings `N(0, 1)`, weights `N(0, 1/fan_in)`, zero biases, unit skip gain.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let layout = p.layout.clone();
        for v in &mut p.values[layout.token_embedding.clone()] {
            *v = normal(rng);
        }
        for v in &mut p.values[layout.time_embedding.clone()] {
            *v = normal(rng);
        }
        p.values[layout.skip_gain.clone()]
            .iter_mut()
            .for_each(|v| *v = 1.0);
        for l in &layout.layers {
            let std = (1.0 / l.cols as f64).sqrt();
            for v in &mut p.values[l.weight.clone()] {
                *v = std * normal(rng);
            }
        }
        Ok(p)
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        if values.len() != p.values.len() {
            return Err(Error::shape(p.values.len(), values.len()));
        }
        p.values = values;
        Ok(p)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn token_row(&self, token: Token) -> &[f64] {
        let d = self.arch.embed_dim;
        let start = self.layout.token_embedding.start + token.id() * d;
        &self.values[start..start + d]
    }

    pub fn layer_weight(&self, layer: usize) -> &[f64] {
        &self.values[self.layout.layers[layer].weight.clone()]
    }

    /// Mean of the prompt's token embedding rows; zero for the null prompt.
    pub fn embed_prompt(&self, prompt: &PromptTokens) -> Vec<f64> {
        let d = self.arch.embed_dim;
        let mut out = vec![0.0; d];
        if prompt.is_null() {
            return out;
        }
        let n = prompt.tokens().len() as f64;
        for &tok in prompt.tokens() {
            for (o, v) in out.iter_mut().zip(self.token_row(tok)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    pub(crate) fn input_vector(&self, z: &Image, t: usize, cond: &[f64]) -> Result<Vec<f64>> {
        if z.shape() != self.arch.image {
            return Err(Error::shape(self.arch.image, z.shape()));
        }
        if cond.len() != self.arch.embed_dim {
            return Err(Error::shape(self.arch.embed_dim, cond.len()));
        }
        if t == 0 || t > self.arch.timesteps {
            return Err(Error::Parameter(format!(
                "timestep {t} outside 1..={}",
                self.arch.timesteps
            )));
        }
        let d = self.arch.time_dim;
        let start = self.layout.time_embedding.start + (t - 1) * d;
        let mut x = Vec::with_capacity(self.arch.input_dim());
        x.extend_from_slice(z.as_slice());
        x.extend_from_slice(cond);
        x.extend_from_slice(&self.values[start..start + d]);
        Ok(x)
    }

    pub fn skip_gain(&self, t: usize) -> f64 {
        self.values[self.layout.skip_gain.start + t - 1]
    }
}

/// Activations kept for the backward pass.
pub(crate) struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the concatenated network input).
    pub inputs: Vec<Vec<f64>>,
    /// `A x` for each adapted layer, indexed by layer.
    pub lora_hidden: Vec<Option<Vec<f64>>>,
    pub output: Vec<f64>,
}

#[inline]
pub(crate) fn matvec_add(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators; the order is fixed so results stay bit-reproducible
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

pub(crate) fn forward(
    params: &DenoiserParams,
    adapters: Option<&LoraSet>,
    z: &Image,
    t: usize,
    cond: &[f64],
) -> Result<ForwardCache> {
    let active = adapters.filter(|a| a.enabled());
    if let Some(a) = active {
        a.check_compatible(params)?;
    }
    let n_layers = params.layout.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut lora_hidden = vec![None; n_layers];
    let mut x = params.input_vector(z, t, cond)?;
    for (li, l) in params.layout.layers.iter().enumerate() {
        let mut pre = params.values[l.bias.clone()].to_vec();
        matvec_add(
            &params.values[l.weight.clone()],
            l.rows,
            l.cols,
            &x,
            &mut pre,
        );
        if let Some(ad) = active.and_then(|a| a.layer(li).map(|ll| (a, ll))) {
            let (set, ll) = ad;
            let mut ax = vec![0.0; set.rank()];
            matvec_add(set.a(ll), set.rank(), ll.cols, &x, &mut ax);
            let s = set.scaling();
            let b = set.b(ll);
            for (i, p) in pre.iter_mut().enumerate() {
                *p += s * dot(&b[i * set.rank()..(i + 1) * set.rank()], &ax);
            }
            lora_hidden[li] = Some(ax);
        }
        inputs.push(x);
        x = if li + 1 < n_layers {
            pre.iter().map(|v| v.tanh()).collect()
        } else {
            pre
        };
    }
    let g = params.skip_gain(t);
    for (o, zi) in x.iter_mut().zip(z.as_slice()) {
        *o += g * zi;
    }
    Ok(ForwardCache {
        inputs,
        lora_hidden,
        output: x,
    })
}

/// `ε(z, t, c)` with optional enabled adapters.
pub fn predict_eps(
    params: &DenoiserParams,
    adapters: Option<&LoraSet>,
    z: &Image,
    t: usize,
    cond: &[f64],
) -> Result<Image> {
    let cache = forward(params, adapters, z, t, cond)?;
    Image::from_vec(params.arch.image, cache.output)
}

/// Parameters plus optional adapters, usable wherever a noise predictor is needed.
#[derive(Clone, Copy)]
pub struct Denoiser<'a> {
    pub params: &'a DenoiserParams,
    pub adapters: Option<&'a LoraSet>,
}

impl<'a> Denoiser<'a> {
    pub fn new(params: &'a DenoiserParams, adapters: Option<&'a LoraSet>) -> Self {
        Self { params, adapters }
    }
}

impl NoisePredictor for Denoiser<'_> {
    fn image_shape(&self) -> Shape {
        self.params.arch.image
    }

    fn condition(&self, prompt: &PromptTokens) -> Vec<f64> {
        self.params.embed_prompt(prompt)
    }

    fn null_condition(&self) -> Vec<f64> {
        vec![0.0; self.params.arch.embed_dim]
    }

    fn predict(&self, z: &Image, t: usize, cond: &[f64]) -> Result<Image> {
        predict_eps(self.params, self.adapters, z, t, cond)
    }
}
