//! The full network: embeddings, stacked filter-mixer/FFN blocks, and the
//! tied-weight prediction head.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ComplexTensor, Graph, RecLossForm, Tensor, Value, Var};
use crate::data::inject_noise;
use crate::error::{bail, Result};
use crate::mixer::{
    build_ramp_schedule, check_gamma, filter_mixer_forward, gaussian_filter, DropoutCtx, FilterParams, MixerVars,
    RampSchedule, SlideMode,
};
use crate::scalar::Scalar;
use crate::spectral::half_len;

/// Standard deviation of every Gaussian-initialized weight.
pub const INIT_STD: f64 = 0.02;

/// Architecture and regularization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub max_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub dropout_embed: f64,
    pub dropout_block: f64,
    pub slide_mode: SlideMode,
    /// Including the padding item at index 0.
    pub vocab_size: usize,
    pub temperature: f64,
    pub seed: u64,
    pub rec_loss: RecLossForm,
    /// Keeps both spectral filters at their initial values.
    pub freeze_filters: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_len: 50,
            hidden: 64,
            layers: 2,
            alpha: 0.5,
            gamma: 0.5,
            lambda: 0.1,
            dropout_embed: 0.1,
            dropout_block: 0.1,
            slide_mode: SlideMode::Mode4,
            vocab_size: 2,
            temperature: 1.0,
            seed: 42,
            rec_loss: RecLossForm::BinarySum,
            freeze_filters: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 2 || self.max_len % 2 != 0 {
            bail!(Config, "max_len must be even and at least 2, got {}", self.max_len);
        }
        if self.hidden == 0 {
            bail!(Config, "hidden size must be positive");
        }
        if self.layers == 0 {
            bail!(Config, "at least one layer is required");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            bail!(Config, "alpha must lie in (0, 1], got {}", self.alpha);
        }
        check_gamma(self.gamma)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bail!(Config, "lambda must be finite and nonnegative, got {}", self.lambda);
        }
        for (name, rate) in [("dropout_embed", self.dropout_embed), ("dropout_block", self.dropout_block)] {
            if !(0.0..1.0).contains(&rate) {
                bail!(Config, "{name} must lie in [0, 1), got {rate}");
            }
        }
        if self.vocab_size < 2 {
            bail!(Config, "vocabulary needs the padding item plus at least one real item");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            bail!(Config, "temperature must be positive, got {}", self.temperature);
        }
        if half_len(self.max_len) < self.layers {
            bail!(Config, "{} frequency bins cannot host {} layers", half_len(self.max_len), self.layers);
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        half_len(self.max_len)
    }

    pub fn schedule(&self) -> Result<RampSchedule<f64>> {
        build_ramp_schedule(self.bins(), self.layers, self.alpha, self.slide_mode)
    }
}

/// One learnable array with its checkpoint name.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam<T> {
    pub name: String,
    pub value: Value<T>,
    pub trainable: bool,
}

const GLOBAL_PARAMS: usize = 4;
const PARAMS_PER_LAYER: usize = 10;

/// Offsets inside a layer's slice of [`ModelParams::entries`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSlot {
    WDynamic = 0,
    WStatic,
    MixerNormGain,
    MixerNormBias,
    FfnW1,
    FfnB1,
    FfnW2,
    FfnB2,
    FfnNormGain,
    FfnNormBias,
}

/// All weights in a fixed order: item embeddings, positional embeddings,
/// embedding norm gain and bias, then ten entries per layer in
/// [`LayerSlot`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub entries: Vec<NamedParam<T>>,
}

pub const ITEM_EMBEDDINGS: usize = 0;
pub const POSITIONAL: usize = 1;
pub const EMBED_NORM_GAIN: usize = 2;
pub const EMBED_NORM_BIAS: usize = 3;

fn gaussian<T: Scalar>(shape: &[usize], rng: &mut dyn RngCore) -> Tensor<T> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization. The padding row of the item table is zero.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, n, d, m) = (config.vocab_size, config.max_len, config.hidden, config.bins());
        let real = |name: String, t: Tensor<T>| NamedParam { name, value: Value::Real(t), trainable: true };
        let mut items = gaussian::<T>(&[v, d], &mut rng);
        items.data[..d].iter_mut().for_each(|x| *x = T::zero());
        let mut entries = vec![
            real("item_embeddings".into(), items),
            real("positional".into(), gaussian(&[n, d], &mut rng)),
            real("embed_norm.gain".into(), Tensor::ones(&[d])),
            real("embed_norm.bias".into(), Tensor::zeros(&[d])),
        ];
        for l in 0..config.layers {
            let complex = |name: &str, t: ComplexTensor<T>| NamedParam {
                name: format!("layer{l}.{name}"),
                value: Value::Complex(t),
                trainable: !config.freeze_filters,
            };
            entries.push(complex("w_dynamic", gaussian_filter(m, d, &mut rng)));
            entries.push(complex("w_static", gaussian_filter(m, d, &mut rng)));
            entries.push(real(format!("layer{l}.mixer_norm.gain"), Tensor::ones(&[d])));
            entries.push(real(format!("layer{l}.mixer_norm.bias"), Tensor::zeros(&[d])));
            entries.push(real(format!("layer{l}.ffn.w1"), gaussian(&[d, d], &mut rng)));
            entries.push(real(format!("layer{l}.ffn.b1"), Tensor::zeros(&[d])));
            entries.push(real(format!("layer{l}.ffn.w2"), gaussian(&[d, d], &mut rng)));
            entries.push(real(format!("layer{l}.ffn.b2"), Tensor::zeros(&[d])));
            entries.push(real(format!("layer{l}.ffn_norm.gain"), Tensor::ones(&[d])));
            entries.push(real(format!("layer{l}.ffn_norm.bias"), Tensor::zeros(&[d])));
        }
        Ok(Self { entries })
    }

    pub fn layers(&self) -> usize {
        (self.entries.len() - GLOBAL_PARAMS) / PARAMS_PER_LAYER
    }

    pub fn layer_index(layer: usize, slot: LayerSlot) -> usize {
        GLOBAL_PARAMS + layer * PARAMS_PER_LAYER + slot as usize
    }

    pub fn real(&self, index: usize) -> &Tensor<T> {
        match &self.entries[index].value {
            Value::Real(t) => t,
            Value::Complex(_) => panic!("parameter {} is complex", self.entries[index].name),
        }
    }

    pub fn item_embeddings(&self) -> &Tensor<T> {
        self.real(ITEM_EMBEDDINGS)
    }

    /// Copy of one layer's spectral filters.
    pub fn filter_params(&self, layer: usize) -> Result<FilterParams<T>> {
        let get = |slot| match &self.entries[Self::layer_index(layer, slot)].value {
            Value::Complex(c) => Ok(c.clone()),
            Value::Real(_) => Err(crate::Error::Contract(format!("layer {layer} filter is not complex"))),
        };
        if layer >= self.layers() {
            bail!(Contract, "layer {layer} outside model of {} layers", self.layers());
        }
        Ok(FilterParams { w_dynamic: get(LayerSlot::WDynamic)?, w_static: get(LayerSlot::WStatic)? })
    }

    pub fn all_filters(&self) -> Result<Vec<FilterParams<T>>> {
        (0..self.layers()).map(|l| self.filter_params(l)).collect()
    }

    /// Checks that the entries have the layout `config` implies.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let reference = ModelParams::<T>::init(config)?;
        if reference.entries.len() != self.entries.len() {
            bail!(Dimension, "expected {} parameters, found {}", reference.entries.len(), self.entries.len());
        }
        for (a, b) in reference.entries.iter().zip(&self.entries) {
            let same_kind = matches!((&a.value, &b.value), (Value::Real(_), Value::Real(_)) | (Value::Complex(_), Value::Complex(_)));
            if a.name != b.name || a.value.shape() != b.value.shape() || !same_kind {
                bail!(Dimension, "parameter {} {:?} does not match expected {} {:?}", b.name, b.value.shape(), a.name, a.value.shape());
            }
        }
        Ok(())
    }

    /// Records every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|p| match &p.value {
                Value::Real(t) => {
                    let mut t = t.clone();
                    t.grad = None;
                    t.requires_grad = p.trainable;
                    g.leaf(t)
                }
                Value::Complex(c) => g.complex_leaf(c.clone(), p.trainable),
            })
            .collect();
        BoundParams { vars }
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.real_len()).sum()
    }
}

/// Graph handles parallel to [`ModelParams::entries`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    fn layer(&self, layer: usize, slot: LayerSlot) -> Var {
        self.vars[GLOBAL_PARAMS + layer * PARAMS_PER_LAYER + slot as usize]
    }

    fn mixer(&self, layer: usize) -> MixerVars {
        MixerVars {
            w_dynamic: self.layer(layer, LayerSlot::WDynamic),
            w_static: self.layer(layer, LayerSlot::WStatic),
            norm_gain: self.layer(layer, LayerSlot::MixerNormGain),
            norm_bias: self.layer(layer, LayerSlot::MixerNormBias),
        }
    }
}

/// Evaluation-time perturbation of every layer input.
pub struct NoiseInjection<'a> {
    pub epsilon: f64,
    pub rng: &'a mut (dyn RngCore + 'static),
}

/// Per-pass switches: dropout on or off, its randomness, and optional noise.
pub struct ForwardCtx<'a> {
    pub train: bool,
    pub rng: &'a mut (dyn RngCore + 'static),
    pub noise: Option<NoiseInjection<'a>>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval(rng: &'a mut (dyn RngCore + 'static)) -> Self {
        Self { train: false, rng, noise: None }
    }

    pub fn train(rng: &'a mut (dyn RngCore + 'static)) -> Self {
        Self { train: true, rng, noise: None }
    }
}

fn check_items(items: &[usize], batch: usize, config: &ModelConfig) -> Result<()> {
    if items.len() != batch * config.max_len {
        bail!(Dimension, "expected {batch} x {} item indices, got {}", config.max_len, items.len());
    }
    if let Some(&bad) = items.iter().find(|&&i| i >= config.vocab_size) {
        bail!(Data, "item index {bad} outside vocabulary of {}", config.vocab_size);
    }
    Ok(())
}

/// `Dropout(LayerNorm(lookup(items) + P))` for a `B x N` index matrix.
pub fn embed_sequence<T: Scalar>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    items: &[usize],
    batch: usize,
    config: &ModelConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    check_items(items, batch, config)?;
    let e = g.gather(bound.vars[ITEM_EMBEDDINGS], items, &[batch, config.max_len])?;
    let e = g.add(e, bound.vars[POSITIONAL])?;
    let e = g.layer_norm(e, bound.vars[EMBED_NORM_GAIN], bound.vars[EMBED_NORM_BIAS])?;
    g.dropout(e, config.dropout_embed, ctx.train, &mut *ctx.rng)
}

/// `GELU(x W1 + b1) W2 + b2`.
fn ffn<T: Scalar>(g: &mut Graph<T>, bound: &BoundParams, layer: usize, x: Var) -> Result<Var> {
    let h = g.matmul(x, bound.layer(layer, LayerSlot::FfnW1))?;
    let h = g.add(h, bound.layer(layer, LayerSlot::FfnB1))?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, bound.layer(layer, LayerSlot::FfnW2))?;
    g.add(h, bound.layer(layer, LayerSlot::FfnB2))
}

/// Hidden states `[B, N, d]` after all blocks. Each block computes
/// `H' = LN(H + H_mix + Dropout(FFN(H_mix)))` where `H_mix` is the
/// filter-mixer output.
pub fn encoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    items: &[usize],
    batch: usize,
    config: &ModelConfig,
    schedule: &RampSchedule<f64>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    config.validate()?;
    if schedule.layers() != config.layers || schedule.bins != config.bins() {
        bail!(Contract, "schedule does not match the model configuration");
    }
    let mut h = embed_sequence(g, bound, items, batch, config, ctx)?;
    for l in 0..config.layers {
        if let Some(noise) = ctx.noise.as_mut() {
            let noisy = inject_noise(g.real(h)?, noise.epsilon, &mut *noise.rng)?;
            let current = g.real(h)?.clone();
            let delta = g.constant(Tensor::from_fn(&current.shape, |i| noisy.data[i] - current.data[i]));
            h = g.add(h, delta)?;
        }
        let mut dctx = DropoutCtx { train: ctx.train, rng: &mut *ctx.rng };
        let mixed = filter_mixer_forward(g, h, l, &bound.mixer(l), schedule, config.gamma, config.dropout_block, &mut dctx)?;
        let f = ffn(g, bound, l, mixed)?;
        let f = g.dropout(f, config.dropout_block, ctx.train, &mut *ctx.rng)?;
        let sum = g.add(h, mixed)?;
        let sum = g.add(sum, f)?;
        h = g.layer_norm(sum, bound.layer(l, LayerSlot::FfnNormGain), bound.layer(l, LayerSlot::FfnNormBias))?;
    }
    Ok(h)
}

/// Last-position representation `[B, d]`.
pub fn last_hidden<T: Scalar>(g: &mut Graph<T>, hidden: Var) -> Result<Var> {
    let n = match g.shape(hidden) {
        [.., n, _] => *n,
        s => bail!(Dimension, "hidden states must be [B, N, d], got {s:?}"),
    };
    g.select_position(hidden, n - 1)
}

/// Raw scores `h (M^V)^T`, shape `[B, |V|]`.
pub fn item_logits<T: Scalar>(g: &mut Graph<T>, bound: &BoundParams, last: Var) -> Result<Var> {
    let table = g.transpose(bound.vars[ITEM_EMBEDDINGS])?;
    g.matmul(last, table)
}

/// Next-item distribution over the vocabulary with the padding item masked.
pub fn predict_scores<T: Scalar>(g: &mut Graph<T>, bound: &BoundParams, last: Var) -> Result<Var> {
    let logits = item_logits(g, bound, last)?;
    g.softmax(logits, true)
}

/// Deterministic scores for a batch without building gradients, as rows
/// of `|V|` logits.
pub fn score_batch<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    schedule: &RampSchedule<f64>,
    items: &[usize],
    batch: usize,
    noise: Option<NoiseInjection<'_>>,
) -> Result<Vec<Vec<T>>> {
    let mut g = Graph::new();
    let mut frozen = params.clone();
    frozen.entries.iter_mut().for_each(|p| p.trainable = false);
    let bound = frozen.bind(&mut g);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = ForwardCtx { train: false, rng: &mut unused, noise };
    let h = encoder_forward(&mut g, &bound, items, batch, config, schedule, &mut ctx)?;
    let last = last_hidden(&mut g, h)?;
    let logits = item_logits(&mut g, &bound, last)?;
    let v = config.vocab_size;
    Ok(g.real(logits)?.data.chunks(v).map(|r| r.to_vec()).collect())
}
