//! U-ViT velocity network.
//!
//! Tokens are laid out as `[time, prompt_0 .. prompt_{L-1}, image_0 ..]`, so the
//! image tokens occupy rows `1 + L ..` of every attention map. Blocks in the
//! second half of the stack fuse the output of their mirror block from the
//! first half through a linear projection of the concatenated features.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::nn::{sinusoidal, Ctx, LayerNorm, Linear, ParamId, ParamStore};
use crate::rng::FlowRng;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub prompt_length: usize,
    pub vocab_size: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for UViTConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 1,
            patch_size: 2,
            embed_dim: 64,
            depth: 6,
            heads: 4,
            prompt_length: 8,
            vocab_size: 64,
            mlp_ratio: 4,
        }
    }
}

impl UViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::Invalid { op: "uvit config", msg });
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("image size {} not divisible by patch {}", self.image_size, self.patch_size));
        }
        if self.depth == 0 || self.depth % 2 != 0 {
            return bad(format!("depth {} must be even and positive", self.depth));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.channels == 0 || self.vocab_size < 2 || self.mlp_ratio == 0 {
            return bad("channels, vocab and mlp ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn image_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        1 + self.prompt_length + self.image_tokens()
    }

    /// Rows of the attention map that belong to image tokens.
    pub fn image_rows(&self) -> Range<usize> {
        1 + self.prompt_length..self.num_tokens()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        vec![self.channels, self.image_size, self.image_size]
    }
}

/// Splits `[C, H, W]` into `[(H/p)(W/p), C p p]` row-major patches.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || p == 0 || s[1] % p != 0 || s[2] % p != 0 {
        return Err(TensorError::Invalid {
            op: "patchify",
            msg: format!("shape {s:?} not divisible into {p}x{p} patches"),
        });
    }
    let (c, gh, gw) = (s[0], s[1] / p, s[2] / p);
    x.clone()
        .reshape([c, gh, p, gw, p])?
        .permute(&[1, 3, 0, 2, 4])?
        .reshape([gh * gw, c * p * p])
}

/// Inverse of [`patchify`] for a `channels x size x size` image.
pub fn unpatchify(tokens: &Tensor, channels: usize, size: usize, p: usize) -> Result<Tensor> {
    let g = if p == 0 { 0 } else { size / p };
    if p == 0 || size % p != 0 || tokens.shape() != [g * g, channels * p * p] {
        return Err(TensorError::Invalid {
            op: "unpatchify",
            msg: format!("tokens {:?} do not tile {channels}x{size}x{size} with patch {p}", tokens.shape()),
        });
    }
    tokens
        .clone()
        .reshape([g, g, channels, p, p])?
        .permute(&[2, 0, 3, 1, 4])?
        .reshape([channels, size, size])
}

/// Post-softmax scaling of image-row attention to selected prompt positions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionReweight {
    pub targets: Vec<ReweightTarget>,
}

/// Scale for prompt position `j` (attention column `1 + j`) in the listed
/// blocks, or every block when `blocks` is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReweightTarget {
    pub positions: Vec<usize>,
    pub scale: f32,
    pub blocks: Option<Vec<usize>>,
}

impl ReweightTarget {
    fn applies_to(&self, block: usize) -> bool {
        self.blocks.as_ref().is_none_or(|b| b.contains(&block))
    }
}

impl AttentionReweight {
    pub fn is_empty(&self) -> bool {
        self.targets.iter().all(|t| t.scale == 1.0 || t.positions.is_empty())
    }
}

/// Per-call modifications of the forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct EditHooks<'a> {
    /// Added to the network input before patchify; per-sample or full-batch shape.
    pub u_offset: Option<&'a Tensor>,
    pub reweight: Option<&'a AttentionReweight>,
    /// Keep every block's attention map `[B, heads, N, N]`.
    pub retain_attention: bool,
}

impl EditHooks<'_> {
    pub fn none() -> Self {
        Self::default()
    }
}

/// `x + offset` for a per-sample or full-batch offset. An all-zero offset
/// returns `x` itself so the hooked pass stays bit-identical.
pub(crate) fn apply_offset(cx: &mut Ctx, x: Var, offset: Option<&Tensor>) -> Result<Var> {
    let Some(off) = offset else { return Ok(x) };
    let xs = cx.tape.shape(x);
    if off.shape() != xs && off.shape() != &xs[1..] {
        return Err(TensorError::ShapeMismatch {
            op: "u_offset",
            lhs: xs.to_vec(),
            rhs: off.shape().to_vec(),
        });
    }
    if off.data().iter().all(|&v| v == 0.0) {
        return Ok(x);
    }
    let o = cx.tape.constant(off.clone());
    cx.tape.add_broadcast(x, o)
}

pub struct ForwardOutput {
    pub velocity: Var,
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    skip: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct UViT {
    pub config: UViTConfig,
    patch_embed: Linear,
    token_embed: ParamId,
    pos_embed: ParamId,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head: Linear,
}

impl UViT {
    pub fn new(config: UViTConfig, store: &mut ParamStore, rng: &mut FlowRng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let patch_embed = Linear::new(store, "patch_embed", config.patch_dim(), d, rng);
        let token_embed = store.add_normal("token_embed", &[config.vocab_size, d], 0.02, rng);
        let pos_embed = store.add_normal("pos_embed", &[config.num_tokens(), d], 0.02, rng);
        let time_in = Linear::new(store, "time_mlp.0", d, hidden, rng);
        let time_out = Linear::new(store, "time_mlp.1", hidden, d, rng);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let name = format!("blocks.{i}");
            let skip = (i >= config.depth / 2).then(|| Linear::new(store, &format!("{name}.skip"), 2 * d, d, rng));
            blocks.push(Block {
                ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
                qkv: Linear::new(store, &format!("{name}.attn.qkv"), d, 3 * d, rng),
                proj: Linear::new(store, &format!("{name}.attn.proj"), d, d, rng),
                ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
                fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, hidden, rng),
                fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, d, rng),
                skip,
            });
        }
        let final_ln = LayerNorm::new(store, "final_ln", d);
        let head = Linear::new(store, "head", d, config.patch_dim(), rng);
        Ok(Self {
            config,
            patch_embed,
            token_embed,
            pos_embed,
            time_in,
            time_out,
            blocks,
            final_ln,
            head,
        })
    }

    pub fn pos_embed(&self) -> ParamId {
        self.pos_embed
    }

    /// Time token for each entry of `t`, `[B, d]`.
    fn time_tokens(&self, cx: &mut Ctx, t: &[f32]) -> Result<Var> {
        let d = self.config.embed_dim;
        let feats: Vec<f32> = t.iter().flat_map(|&ti| sinusoidal(ti, d)).collect();
        let f = cx.tape.constant(Tensor::new([t.len(), d], feats)?);
        let h = self.time_in.forward(cx, f)?;
        let h = cx.tape.gelu(h)?;
        self.time_out.forward(cx, h)
    }

    /// Embedding of a single time value, `[d]`.
    pub fn time_embed(&self, store: &ParamStore, t: f32) -> Result<Tensor> {
        let mut tape = crate::autograd::Tape::new();
        let mut cx = Ctx::new(&mut tape, store, false);
        let v = self.time_tokens(&mut cx, &[t])?;
        tape.value(v).clone().reshape([self.config.embed_dim])
    }

    pub fn check_prompts(&self, prompts: &[Vec<u32>], batch: usize) -> Result<()> {
        if prompts.len() != batch && prompts.len() != 1 {
            return Err(TensorError::Invalid {
                op: "uvit",
                msg: format!("{} prompts for batch of {batch}", prompts.len()),
            });
        }
        for p in prompts {
            if p.len() != self.config.prompt_length {
                return Err(TensorError::Invalid {
                    op: "uvit",
                    msg: format!("prompt length {} != {}", p.len(), self.config.prompt_length),
                });
            }
            if let Some(&id) = p.iter().find(|&&id| id as usize >= self.config.vocab_size) {
                return Err(TensorError::Invalid {
                    op: "uvit",
                    msg: format!("token id {id} outside vocabulary of {}", self.config.vocab_size),
                });
            }
        }
        Ok(())
    }

    fn attention(
        &self,
        cx: &mut Ctx,
        block: &Block,
        index: usize,
        h: Var,
        hooks: &EditHooks,
        maps: &mut Vec<Tensor>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (b, n, d, heads) = (cx.tape.shape(h)[0], cfg.num_tokens(), cfg.embed_dim, cfg.heads);
        let dh = d / heads;
        let qkv = block.qkv.forward(cx, h)?;
        let qkv = cx.tape.reshape(qkv, &[b, n, 3, heads, dh])?;
        let qkv = cx.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let s = cx.tape.slice(qkv, 0, i, i + 1)?;
            parts.push(cx.tape.reshape(s, &[b * heads, n, dh])?);
        }
        let scores = cx.tape.bmm(parts[0], parts[1], true)?;
        let scores = cx.tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let mut attn = cx.tape.softmax(scores, 2)?;
        for target in hooks.reweight.iter().flat_map(|rw| &rw.targets) {
            if target.scale != 1.0 && !target.positions.is_empty() && target.applies_to(index) {
                let cols: Vec<usize> = target.positions.iter().map(|j| 1 + j).collect();
                attn = cx.tape.reweight(attn, cfg.image_rows(), &cols, target.scale)?;
            }
        }
        if hooks.retain_attention {
            maps.push(cx.tape.value(attn).clone().reshape([b, heads, n, n])?);
        }
        let out = cx.tape.bmm(attn, parts[2], false)?;
        let out = cx.tape.reshape(out, &[b, heads, n, dh])?;
        let out = cx.tape.permute(out, &[0, 2, 1, 3])?;
        let out = cx.tape.reshape(out, &[b, n, d])?;
        block.proj.forward(cx, out)
    }

    /// `x` is `[B, C, H, W]`; `t` holds one time per batch entry.
    pub fn forward(&self, cx: &mut Ctx, x: Var, prompts: &[Vec<u32>], t: &[f32], hooks: &EditHooks) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let shape = cx.tape.shape(x).to_vec();
        let b = shape.first().copied().unwrap_or(0);
        if shape[1..] != cfg.latent_shape()[..] {
            return Err(TensorError::ShapeMismatch {
                op: "uvit",
                lhs: shape,
                rhs: cfg.latent_shape(),
            });
        }
        if t.len() != b {
            return Err(TensorError::Invalid {
                op: "uvit",
                msg: format!("{} times for batch of {b}", t.len()),
            });
        }
        self.check_prompts(prompts, b)?;
        let (c, p, g, d, l) = (cfg.channels, cfg.patch_size, cfg.grid(), cfg.embed_dim, cfg.prompt_length);

        let u = apply_offset(cx, x, hooks.u_offset)?;
        let patches = cx.tape.reshape(u, &[b, c, g, p, g, p])?;
        let patches = cx.tape.permute(patches, &[0, 2, 4, 1, 3, 5])?;
        let patches = cx.tape.reshape(patches, &[b, g * g, cfg.patch_dim()])?;
        let img = self.patch_embed.forward(cx, patches)?;

        let ids: Vec<usize> = (0..b)
            .flat_map(|i| prompts[if prompts.len() == 1 { 0 } else { i }].iter().map(|&id| id as usize))
            .collect();
        let table = cx.p(self.token_embed);
        let txt = cx.tape.gather_rows(table, &ids)?;
        let txt = cx.tape.reshape(txt, &[b, l, d])?;

        let time = self.time_tokens(cx, t)?;
        let time = cx.tape.reshape(time, &[b, 1, d])?;

        let h = cx.tape.concat(&[time, txt, img], 1)?;
        let pos = cx.p(self.pos_embed);
        let mut h = cx.tape.add_broadcast(h, pos)?;

        let mut maps = Vec::new();
        let mut skips = Vec::with_capacity(cfg.depth / 2);
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(skip) = &block.skip {
                let s = skips.pop().expect("skip stack mirrors block pairs");
                let cat = cx.tape.concat(&[h, s], 2)?;
                h = skip.forward(cx, cat)?;
            }
            let a = block.ln1.forward(cx, h)?;
            let a = self.attention(cx, block, i, a, hooks, &mut maps)?;
            h = cx.tape.add(h, a)?;
            let m = block.ln2.forward(cx, h)?;
            let m = block.fc1.forward(cx, m)?;
            let m = cx.tape.gelu(m)?;
            let m = block.fc2.forward(cx, m)?;
            h = cx.tape.add(h, m)?;
            if i < cfg.depth / 2 {
                skips.push(h);
            }
        }

        let h = self.final_ln.forward(cx, h)?;
        let h = cx.tape.slice(h, 1, 1 + l, cfg.num_tokens())?;
        let out = self.head.forward(cx, h)?;
        let out = cx.tape.reshape(out, &[b, g, g, c, p, p])?;
        let out = cx.tape.permute(out, &[0, 3, 1, 4, 2, 5])?;
        let velocity = cx.tape.reshape(out, &[b, c, cfg.image_size, cfg.image_size])?;
        Ok(ForwardOutput {
            velocity,
            attention: maps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_counts_and_round_trips() {
        let x = Tensor::new([1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let t = patchify(&x, 2).unwrap();
        assert_eq!(t.shape(), &[4, 4]);
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(unpatchify(&t, 1, 4, 2).unwrap(), x);
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let x = Tensor::full([2, 6, 6], 0.7);
        let t = patchify(&x, 3).unwrap();
        let rows: Vec<&[f32]> = t.data().chunks(18).collect();
        assert!(rows.windows(2).all(|w| w[0] == w[1]));
        assert!(patchify(&x, 4).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(UViTConfig::default().validate().is_ok());
        assert!(UViTConfig { depth: 5, ..Default::default() }.validate().is_err());
        assert!(UViTConfig { heads: 5, ..Default::default() }.validate().is_err());
        assert!(UViTConfig { patch_size: 3, ..Default::default() }.validate().is_err());
        assert_eq!(UViTConfig::default().image_rows(), 9..73);
    }
}
