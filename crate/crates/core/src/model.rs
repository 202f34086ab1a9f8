//! Velocity networks behind one interface.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::nn::{sinusoidal, Ctx, Linear, ParamStore};
use crate::rng;
use crate::tensor::{Result, Tensor, TensorError};
use crate::uvit::{apply_offset, EditHooks, ForwardOutput, UViT, UViTConfig};

/// Time-conditioned MLP for low-dimensional point data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub time_features: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            hidden: 128,
            layers: 3,
            time_features: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpField {
    pub config: MlpConfig,
    layers: Vec<Linear>,
}

impl MlpField {
    pub fn new(config: MlpConfig, store: &mut ParamStore, rng: &mut rng::FlowRng) -> Result<Self> {
        if config.layers < 2 || config.dim == 0 || config.hidden == 0 {
            return Err(TensorError::Invalid {
                op: "mlp config",
                msg: "need dim, hidden > 0 and at least 2 layers".into(),
            });
        }
        let mut layers = Vec::with_capacity(config.layers);
        let mut fan_in = config.dim + config.time_features;
        for i in 0..config.layers {
            let out = if i + 1 == config.layers { config.dim } else { config.hidden };
            layers.push(Linear::new(store, &format!("layers.{i}"), fan_in, out, rng));
            fan_in = out;
        }
        Ok(Self { config, layers })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, t: &[f32], hooks: &EditHooks) -> Result<Var> {
        let b = cx.tape.shape(x)[0];
        let tf = self.config.time_features;
        let feats: Vec<f32> = t.iter().flat_map(|&ti| time_features(ti, tf)).collect();
        let f = cx.tape.constant(Tensor::new([b, tf], feats)?);
        let u = apply_offset(cx, x, hooks.u_offset)?;
        let mut h = cx.tape.concat(&[u, f], 1)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(cx, h)?;
            if i + 1 < self.layers.len() {
                h = cx.tape.gelu(h)?;
            }
        }
        Ok(h)
    }
}

/// Raw `t` followed by low-frequency sinusoids.
fn time_features(t: f32, n: usize) -> Vec<f32> {
    if n == 0 {
        return Vec::new();
    }
    let mut out = vec![t];
    let rest = sinusoidal(t / 1000.0 * 8.0, n.saturating_sub(1));
    out.extend(rest);
    out.resize(n, 0.0);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchConfig {
    Uvit(UViTConfig),
    Mlp(MlpConfig),
}

impl ArchConfig {
    /// Shape of a single latent, without the batch axis.
    pub fn latent_shape(&self) -> Vec<usize> {
        match self {
            ArchConfig::Uvit(c) => c.latent_shape(),
            ArchConfig::Mlp(c) => vec![c.dim],
        }
    }

    pub fn prompt_length(&self) -> usize {
        match self {
            ArchConfig::Uvit(c) => c.prompt_length,
            ArchConfig::Mlp(_) => 0,
        }
    }
}

#[derive(Clone, Debug)]
enum Network {
    Uvit(UViT),
    Mlp(MlpField),
}

/// A velocity network and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: ArchConfig,
    pub params: ParamStore,
    net: Network,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, 0x1417);
        let net = match &arch {
            ArchConfig::Uvit(c) => Network::Uvit(UViT::new(c.clone(), &mut params, &mut r)?),
            ArchConfig::Mlp(c) => Network::Mlp(MlpField::new(c.clone(), &mut params, &mut r)?),
        };
        Ok(Self { arch, params, net })
    }

    pub fn from_params(arch: ArchConfig, values: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::init(arch, 0)?;
        model.params.load(values)?;
        Ok(model)
    }

    pub fn uvit(&self) -> Option<&UViT> {
        match &self.net {
            Network::Uvit(u) => Some(u),
            Network::Mlp(_) => None,
        }
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        self.arch.latent_shape()
    }

    pub fn prompt_length(&self) -> usize {
        self.arch.prompt_length()
    }

    /// Batched latent shape `[batch, ..latent]`.
    pub fn batch_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend(self.latent_shape());
        s
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, prompts: &[Vec<u32>], t: &[f32], hooks: &EditHooks) -> Result<ForwardOutput> {
        match &self.net {
            Network::Uvit(u) => u.forward(cx, x, prompts, t, hooks),
            Network::Mlp(m) => Ok(ForwardOutput {
                velocity: m.forward(cx, x, t, hooks)?,
                attention: Vec::new(),
            }),
        }
    }

    /// Inference-only velocity at a shared time `t` for a batch `x`.
    pub fn velocity(&self, x: &Tensor, prompts: &[Vec<u32>], t: f32, hooks: &EditHooks) -> Result<Tensor> {
        Ok(self.velocity_with_attention(x, prompts, t, hooks)?.0)
    }

    pub fn velocity_with_attention(
        &self,
        x: &Tensor,
        prompts: &[Vec<u32>],
        t: f32,
        hooks: &EditHooks,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let b = x.shape().first().copied().unwrap_or(0);
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &self.params, false);
        let xv = cx.tape.constant(x.clone());
        let out = self.forward(&mut cx, xv, prompts, &vec![t; b], hooks)?;
        let v = tape.value(out.velocity).clone();
        Ok((v, out.attention))
    }
}
