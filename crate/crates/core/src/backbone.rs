//! Miniature DiT: patch embedding, adaLN-conditioned transformer blocks and
//! a final modulated linear decode to `K x K x 2C` per token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{for_each_patch_index, Bindings, ParamStore, Real, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f32,
    /// 0 means unconditional.
    pub num_classes: usize,
    /// Width of the sinusoidal timestep features fed to the embedding MLP.
    pub freq_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::desk()
    }
}

impl BackboneConfig {
    /// Default desk-scale model: 16x16 images, 64 tokens, 6 blocks of width 128.
    pub fn desk() -> Self {
        BackboneConfig {
            image_size: 16,
            channels: 1,
            patch_size: 2,
            hidden_dim: 128,
            depth: 6,
            heads: 4,
            mlp_ratio: 4.0,
            num_classes: 3,
            freq_dim: 256,
        }
    }

    /// Small enough for the long experiments on one CPU core.
    pub fn toy() -> Self {
        BackboneConfig {
            image_size: 8,
            channels: 1,
            patch_size: 2,
            hidden_dim: 32,
            depth: 4,
            heads: 2,
            mlp_ratio: 4.0,
            num_classes: 0,
            freq_dim: 64,
        }
    }

    /// Published DiT configurations at 256x256 (32x32x4 latents).
    pub fn preset(name: &str) -> Result<Self> {
        let dit = |hidden_dim, depth, heads| BackboneConfig {
            image_size: 32,
            channels: 4,
            patch_size: 2,
            hidden_dim,
            depth,
            heads,
            mlp_ratio: 4.0,
            num_classes: 1000,
            freq_dim: 256,
        };
        match name {
            "dit-s-2" => Ok(dit(384, 12, 6)),
            "dit-b-2" => Ok(dit(768, 12, 12)),
            "dit-l-2" => Ok(dit(1024, 24, 16)),
            "dit-xl-2" => Ok(dit(1152, 28, 16)),
            "desk" => Ok(BackboneConfig::desk()),
            "toy" => Ok(BackboneConfig::toy()),
            other => Err(Error::config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return fail(format!("hidden dim {} not divisible by {} heads", self.hidden_dim, self.heads));
        }
        if self.hidden_dim % 4 != 0 {
            return fail("hidden dim must be a multiple of 4 for 2-D positional encoding".into());
        }
        if self.depth == 0 || self.channels == 0 {
            return fail("depth and channels must be positive".into());
        }
        if self.freq_dim == 0 || self.freq_dim % 2 != 0 {
            return fail("freq_dim must be even and positive".into());
        }
        if !(self.mlp_ratio > 0.0) {
            return fail("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count `N = (H / K)^2`.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.hidden_dim as f32 * self.mlp_ratio).round() as usize
    }

    pub fn conditional(&self) -> bool {
        self.num_classes > 0
    }

    /// Closed-form parameter count of the bare backbone.
    pub fn param_count(&self) -> usize {
        let d = self.hidden_dim;
        let m = self.mlp_hidden();
        let out = self.patch_dim() * 2;
        let patch = self.patch_dim() * d + d;
        let temb = self.freq_dim * d + d + d * d + d;
        let yemb = if self.conditional() { (self.num_classes + 1) * d } else { 0 };
        let block = (d * 6 * d + 6 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * m + m) + (m * d + d);
        let fin = (d * 2 * d + 2 * d) + (d * out + out);
        patch + temb + yemb + self.depth * block + fin
    }
}

/// Parameter name of block `i`. Zero-padded so names sort by depth.
pub fn block_prefix(i: usize) -> String {
    format!("blocks.{i:02}")
}

/// True for names owned by the backbone (as opposed to patches or optimizer state).
pub fn is_backbone_param(name: &str) -> bool {
    ["x_embed.", "t_embed.", "y_embed.", "blocks.", "final."]
        .iter()
        .any(|p| name.starts_with(p))
}

fn normal(rng: &mut Rng, shape: Vec<usize>, std: f32) -> Tensor {
    let n = shape.iter().product();
    let data = rng.normal_vec(n).into_iter().map(|v| v * std).collect();
    Tensor::new(shape, data).expect("shape matches").with_grad(true)
}

fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let data = (0..fan_in * fan_out).map(|_| (rng.uniform() * 2.0 - 1.0) * a).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches").with_grad(true)
}

fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).with_grad(true)
}

/// Fresh trainable backbone parameters.
pub fn init_params(cfg: &BackboneConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.hidden_dim;
    let m = cfg.mlp_hidden();
    let out = cfg.patch_dim() * 2;
    let mut p = ParamStore::new();
    p.insert("x_embed.w", xavier(rng, cfg.patch_dim(), d));
    p.insert("x_embed.b", zeros(vec![d]));
    p.insert("t_embed.fc1.w", normal(rng, vec![cfg.freq_dim, d], 0.02));
    p.insert("t_embed.fc1.b", zeros(vec![d]));
    p.insert("t_embed.fc2.w", normal(rng, vec![d, d], 0.02));
    p.insert("t_embed.fc2.b", zeros(vec![d]));
    if cfg.conditional() {
        p.insert("y_embed.table", normal(rng, vec![cfg.num_classes + 1, d], 0.02));
    }
    for i in 0..cfg.depth {
        let pre = block_prefix(i);
        p.insert(format!("{pre}.ada.w"), normal(rng, vec![d, 6 * d], 0.02));
        p.insert(format!("{pre}.ada.b"), zeros(vec![6 * d]));
        p.insert(format!("{pre}.attn.qkv.w"), xavier(rng, d, 3 * d));
        p.insert(format!("{pre}.attn.qkv.b"), zeros(vec![3 * d]));
        p.insert(format!("{pre}.attn.proj.w"), xavier(rng, d, d));
        p.insert(format!("{pre}.attn.proj.b"), zeros(vec![d]));
        p.insert(format!("{pre}.mlp.fc1.w"), xavier(rng, d, m));
        p.insert(format!("{pre}.mlp.fc1.b"), zeros(vec![m]));
        p.insert(format!("{pre}.mlp.fc2.w"), xavier(rng, m, d));
        p.insert(format!("{pre}.mlp.fc2.b"), zeros(vec![d]));
    }
    p.insert("final.ada.w", normal(rng, vec![d, 2 * d], 0.02));
    p.insert("final.ada.b", zeros(vec![2 * d]));
    p.insert("final.linear.w", normal(rng, vec![d, out], 0.02));
    p.insert("final.linear.b", zeros(vec![out]));
    Ok(p)
}

/// Fixed 2-D sine/cosine positional table `[N, D]`.
pub fn positional_encoding(grid: usize, dim: usize) -> Vec<f32> {
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            // first half encodes the column, second half the row
            for pos in [gx as f64, gy as f64] {
                out.extend(omega.iter().map(|w| (pos * w).sin() as f32));
                out.extend(omega.iter().map(|w| (pos * w).cos() as f32));
            }
        }
    }
    out
}

/// Sinusoidal timestep features `[B, F]`.
pub fn timestep_features(t: &[usize], freq_dim: usize) -> Vec<f32> {
    let half = freq_dim / 2;
    let mut out = Vec::with_capacity(t.len() * freq_dim);
    for &step in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| step as f64 * f).collect();
        out.extend(args.iter().map(|a| a.cos() as f32));
        out.extend(args.iter().map(|a| a.sin() as f32));
    }
    out
}

/// Raw patch extraction `[B, H, W, C] -> [B, N, K*K*C]`.
pub fn patchify(img: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, h, w, c) = match *img.shape() {
        [b, h, w, c] => (b, h, w, c),
        ref s => return Err(Error::shape("patchify", s, &[0, 0, 0, 0])),
    };
    if h != w || patch == 0 || h % patch != 0 {
        return Err(Error::config(format!("image {h}x{w} not divisible into {patch}x{patch} patches")));
    }
    let grid = h / patch;
    let mut out = vec![0.0; img.numel()];
    let src = img.data();
    for_each_patch_index(b, grid, patch, c, |tok, pix| out[tok] = src[pix]);
    Tensor::new(vec![b, grid * grid, patch * patch * c], out)
}

/// Inverse of [`patchify`] on plain tensors.
pub fn unpatchify(tokens: &Tensor, patch: usize, channels: usize) -> Result<Tensor> {
    let (b, n, f) = match *tokens.shape() {
        [b, n, f] => (b, n, f),
        ref s => return Err(Error::shape("unpatchify", s, &[0, 0, 0])),
    };
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n || f != patch * patch * channels {
        return Err(Error::shape("unpatchify", tokens.shape(), &[patch, patch, channels]));
    }
    let side = grid * patch;
    let mut out = vec![0.0; tokens.numel()];
    let src = tokens.data();
    for_each_patch_index(b, grid, patch, channels, |tok, pix| out[pix] = src[tok]);
    Tensor::new(vec![b, side, side, channels], out)
}

/// Conditioning information handed to a [`BlockHook`].
#[derive(Clone, Debug)]
pub struct HookContext {
    /// Timestep embedding `[B, D]`.
    pub t_emb: Var,
    /// Class embedding `[B, D]`, present for conditional models.
    pub y_emb: Option<Var>,
    pub timesteps: Vec<usize>,
    pub batch: usize,
}

/// Per-block input transform. Returns the block input and how many leading
/// tokens to drop from the block output.
pub trait BlockHook<T: Real> {
    fn before_block(&mut self, tape: &mut Tape<T>, block: usize, x: Var, ctx: &HookContext) -> Result<(Var, usize)>;
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, H, W, 2C]`: noise prediction then the unused variance channels.
    pub out: Var,
    pub eps: Var,
    pub t_emb: Var,
    pub y_emb: Option<Var>,
}

/// Timestep embedding `[B, D]` through the two-layer MLP.
pub fn embed_timesteps<T: Real>(cfg: &BackboneConfig, tape: &mut Tape<T>, b: &Bindings, t: &[usize]) -> Result<Var> {
    let feats = timestep_features(t, cfg.freq_dim);
    let feats = tape.constant(vec![t.len(), cfg.freq_dim], feats.into_iter().map(T::from_f32).collect())?;
    let h = tape.linear(feats, b.var("t_embed.fc1.w")?, Some(b.var("t_embed.fc1.b")?))?;
    let h = tape.silu(h);
    tape.linear(h, b.var("t_embed.fc2.w")?, Some(b.var("t_embed.fc2.b")?))
}

/// Null-label index used for unconditional passes.
pub fn null_label(cfg: &BackboneConfig) -> usize {
    cfg.num_classes
}

/// Full forward pass on a noised batch `[B, H, W, C]`.
///
/// A conditional model called without labels embeds the null label.
pub fn forward<T: Real>(
    cfg: &BackboneConfig,
    tape: &mut Tape<T>,
    b: &Bindings,
    x_t: &Tensor,
    t: &[usize],
    labels: Option<&[usize]>,
    mut hook: Option<&mut dyn BlockHook<T>>,
) -> Result<ForwardOutput> {
    let batch = x_t.shape()[0];
    let expect = [batch, cfg.image_size, cfg.image_size, cfg.channels];
    if x_t.shape() != expect {
        return Err(Error::shape("forward input", x_t.shape(), &expect));
    }
    if t.len() != batch {
        return Err(Error::shape("forward timesteps", x_t.shape(), &[t.len()]));
    }
    let d = cfg.hidden_dim;
    let n = cfg.tokens();

    let patches = patchify(x_t, cfg.patch_size)?;
    let patches = tape.input(&patches);
    let x = tape.linear(patches, b.var("x_embed.w")?, Some(b.var("x_embed.b")?))?;
    let pos = positional_encoding(cfg.grid(), d);
    let pos = tape.constant(vec![n, d], pos.into_iter().map(T::from_f32).collect())?;
    let mut x = tape.add_broadcast(x, pos)?;

    let t_emb = embed_timesteps(cfg, tape, b, t)?;
    let y_emb = match (cfg.conditional(), labels) {
        (false, Some(_)) => return Err(Error::config("class labels given to an unconditional model")),
        (false, None) => None,
        (true, labels) => {
            let idx: Vec<usize> = match labels {
                Some(l) if l.len() != batch => {
                    return Err(Error::shape("forward labels", x_t.shape(), &[l.len()]));
                }
                Some(l) => l.to_vec(),
                None => vec![null_label(cfg); batch],
            };
            Some(tape.gather_rows(b.var("y_embed.table")?, &idx)?)
        }
    };
    let c = match y_emb {
        Some(y) => tape.add(t_emb, y)?,
        None => t_emb,
    };
    let silu_c = tape.silu(c);
    let ctx = HookContext {
        t_emb,
        y_emb,
        timesteps: t.to_vec(),
        batch,
    };

    for i in 0..cfg.depth {
        let (input, prepended) = match hook.as_deref_mut() {
            Some(h) => h.before_block(tape, i, x, &ctx)?,
            None => (x, 0),
        };
        let y = dit_block(cfg, tape, b, &block_prefix(i), input, silu_c)?;
        x = if prepended > 0 { tape.drop_tokens(y, prepended)? } else { y };
    }

    let ada = tape.linear(silu_c, b.var("final.ada.w")?, Some(b.var("final.ada.b")?))?;
    let shift = tape.slice_last(ada, 0, d)?;
    let scale = tape.slice_last(ada, d, d)?;
    let h = tape.layernorm(x);
    let h = tape.modulate(h, shift, scale)?;
    let h = tape.linear(h, b.var("final.linear.w")?, Some(b.var("final.linear.b")?))?;
    let out = tape.unpatchify(h, cfg.patch_size, 2 * cfg.channels)?;
    let eps = tape.slice_last(out, 0, cfg.channels)?;
    Ok(ForwardOutput { out, eps, t_emb, y_emb })
}

fn dit_block<T: Real>(
    cfg: &BackboneConfig,
    tape: &mut Tape<T>,
    b: &Bindings,
    pre: &str,
    x: Var,
    silu_c: Var,
) -> Result<Var> {
    let d = cfg.hidden_dim;
    let p = |s: &str| b.var(&format!("{pre}.{s}"));
    let ada = tape.linear(silu_c, p("ada.w")?, Some(p("ada.b")?))?;
    let chunk = |tape: &mut Tape<T>, i: usize| tape.slice_last(ada, i * d, d);
    let (shift_msa, scale_msa, gate_msa) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?);
    let (shift_mlp, scale_mlp, gate_mlp) = (chunk(tape, 3)?, chunk(tape, 4)?, chunk(tape, 5)?);

    let h = tape.layernorm(x);
    let h = tape.modulate(h, shift_msa, scale_msa)?;
    let qkv = tape.linear(h, p("attn.qkv.w")?, Some(p("attn.qkv.b")?))?;
    let q = tape.slice_last(qkv, 0, d)?;
    let k = tape.slice_last(qkv, d, d)?;
    let v = tape.slice_last(qkv, 2 * d, d)?;
    let a = tape.attention(q, k, v, cfg.heads)?;
    let a = tape.linear(a, p("attn.proj.w")?, Some(p("attn.proj.b")?))?;
    let x = tape.gated_residual(x, gate_msa, a)?;

    let h = tape.layernorm(x);
    let h = tape.modulate(h, shift_mlp, scale_mlp)?;
    let h = tape.linear(h, p("mlp.fc1.w")?, Some(p("mlp.fc1.b")?))?;
    let h = tape.gelu(h);
    let h = tape.linear(h, p("mlp.fc2.w")?, Some(p("mlp.fc2.b")?))?;
    tape.gated_residual(x, gate_mlp, h)
}

/// Marks every backbone parameter non-trainable and returns its digest.
pub fn freeze(params: &mut ParamStore) -> u64 {
    params.set_trainable_where(false, is_backbone_param);
    backbone_digest(params)
}

pub fn unfreeze(params: &mut ParamStore) {
    params.set_trainable_where(true, is_backbone_param);
}

/// 64-bit content hash of the backbone parameters.
pub fn backbone_digest(params: &ParamStore) -> u64 {
    params.digest_where(is_backbone_param)
}
