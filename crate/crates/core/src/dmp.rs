//! Prompt pools mixed per timestep by a gating network, injected into the
//! inputs of a frozen backbone's blocks.
//!
//! Prompts start at exactly zero so an untrained patch leaves the backbone's
//! output unchanged in `add` mode.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BlockHook, HookContext};
use crate::error::{Error, Result};
use crate::numcore::{Bindings, ParamStore, Real, Rng, Tape, Tensor, Var};

macro_rules! str_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"),
                        other
                    ))),
                }
            }
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text,)+
                }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingVariant {
    #[default]
    Linear,
    Attention,
}
str_enum!(GatingVariant { Linear => "linear", Attention => "attention" });

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingType {
    #[default]
    Soft,
    /// Top-k prompts with weight 1, the rest 0.
    Hard,
}
str_enum!(GatingType { Soft => "soft", Hard => "hard" });

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Gate ignores block depth: every block gets the same mixture.
    Uniform,
    #[default]
    Distinct,
}
str_enum!(Selection { Uniform => "uniform", Distinct => "distinct" });

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    #[default]
    Add,
    Prepend,
}
str_enum!(Position { Add => "add", Prepend => "prepend" });

/// Which blocks carry prompts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    /// Block 0 only.
    First,
    /// The first `ceil(L / 2)` blocks.
    Half,
    #[default]
    All,
}
str_enum!(Coverage { First => "first", Half => "half", All => "all" });

impl Coverage {
    pub fn blocks(self, depth: usize) -> Vec<usize> {
        match self {
            Coverage::First => vec![0],
            Coverage::Half => (0..depth.div_ceil(2)).collect(),
            Coverage::All => (0..depth).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    #[default]
    TOnly,
    /// Gate input is the timestep embedding plus the class embedding.
    TPlusC,
}
str_enum!(ConditionMode { TOnly => "t_only", TPlusC => "t_plus_c" });

/// Which logits the load loss counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadSign {
    /// Penalize prompts whose logit is negative.
    #[default]
    Negative,
    /// Penalize prompts whose logit is positive.
    Positive,
}
str_enum!(LoadSign { Negative => "negative", Positive => "positive" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmpConfig {
    pub gating_variant: GatingVariant,
    pub gating_type: GatingType,
    /// Active prompts under hard gating; defaults to `ceil(0.75 * pool)`.
    pub top_k: Option<usize>,
    pub selection: Selection,
    pub position: Position,
    /// Pool size in prepend mode.
    pub n_prompts: usize,
    pub coverage: Coverage,
    pub condition_mode: ConditionMode,
    pub lambda_importance: f32,
    pub lambda_load: f32,
    pub load_temperature: f32,
    pub load_sign: LoadSign,
}

impl Default for DmpConfig {
    fn default() -> Self {
        DmpConfig {
            gating_variant: GatingVariant::Linear,
            gating_type: GatingType::Soft,
            top_k: None,
            selection: Selection::Distinct,
            position: Position::Add,
            n_prompts: 16,
            coverage: Coverage::All,
            condition_mode: ConditionMode::TOnly,
            lambda_importance: 0.01,
            lambda_load: 0.01,
            load_temperature: 1.0,
            load_sign: LoadSign::Negative,
        }
    }
}

pub const MAX_PREPEND_PROMPTS: usize = 64;

impl DmpConfig {
    /// Conditional backbones gate on `t + c` by default.
    pub fn for_backbone(bb: &BackboneConfig) -> Self {
        DmpConfig {
            condition_mode: if bb.conditional() { ConditionMode::TPlusC } else { ConditionMode::TOnly },
            ..DmpConfig::default()
        }
    }

    /// Number of prompt rows per block.
    pub fn pool_size(&self, bb: &BackboneConfig) -> usize {
        match self.position {
            Position::Add => bb.tokens(),
            Position::Prepend => self.n_prompts,
        }
    }

    pub fn k(&self, bb: &BackboneConfig) -> usize {
        let pool = self.pool_size(bb);
        self.top_k.unwrap_or_else(|| (pool * 3).div_ceil(4))
    }

    pub fn validate(&self, bb: &BackboneConfig) -> Result<()> {
        let pool = self.pool_size(bb);
        if self.position == Position::Prepend && !(1..=MAX_PREPEND_PROMPTS).contains(&self.n_prompts) {
            return Err(Error::config(format!(
                "n_prompts {} outside [1, {MAX_PREPEND_PROMPTS}]",
                self.n_prompts
            )));
        }
        if self.gating_type == GatingType::Hard && !(1..=pool).contains(&self.k(bb)) {
            return Err(Error::config(format!("top_k {} outside [1, {pool}]", self.k(bb))));
        }
        if !(self.load_temperature > 0.0) {
            return Err(Error::config("load_temperature must be positive"));
        }
        if !(self.lambda_importance >= 0.0 && self.lambda_load >= 0.0) {
            return Err(Error::config("balancing loss weights must be >= 0"));
        }
        Ok(())
    }

    /// Compact label used in logs and experiment tables.
    pub fn label(&self) -> String {
        format!(
            "{}-{}-{}-{}-{}",
            self.gating_variant.as_str(),
            self.gating_type.as_str(),
            self.selection.as_str(),
            self.position.as_str(),
            self.coverage.as_str()
        )
    }
}

/// What a patched model adds on top of the backbone.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum Patch {
    #[default]
    None,
    /// One prompt per block added with weight 1 at every timestep.
    PromptTune,
    Dmp(DmpConfig),
}

impl Patch {
    pub fn coverage(&self, bb: &BackboneConfig) -> Vec<usize> {
        match self {
            Patch::None => Vec::new(),
            Patch::PromptTune => Coverage::All.blocks(bb.depth),
            Patch::Dmp(cfg) => cfg.coverage.blocks(bb.depth),
        }
    }

    pub fn validate(&self, bb: &BackboneConfig) -> Result<()> {
        match self {
            Patch::Dmp(cfg) => cfg.validate(bb),
            _ => Ok(()),
        }
    }
}

pub fn prompt_name(block: usize) -> String {
    format!("dmp.prompts.{block:02}")
}

pub fn is_patch_param(name: &str) -> bool {
    name.starts_with("dmp.")
}

const ATTN_PROJ: [&str; 3] = ["q", "k", "v"];

/// Fresh patch parameters: zero prompts and a near-zero gate.
pub fn init_params(bb: &BackboneConfig, patch: &Patch, rng: &mut Rng) -> Result<ParamStore> {
    patch.validate(bb)?;
    let d = bb.hidden_dim;
    let mut p = ParamStore::new();
    let rows = match patch {
        Patch::None => return Ok(p),
        Patch::PromptTune => bb.tokens(),
        Patch::Dmp(cfg) => cfg.pool_size(bb),
    };
    for i in patch.coverage(bb) {
        p.insert(prompt_name(i), Tensor::zeros(vec![rows, d]).with_grad(true));
    }
    if let Patch::Dmp(cfg) = patch {
        match cfg.gating_variant {
            GatingVariant::Linear => {
                let w = rng.normal_vec((d + 1) * rows).into_iter().map(|v| v * 1e-3).collect();
                p.insert("dmp.gate.w", Tensor::new(vec![d + 1, rows], w)?.with_grad(true));
                p.insert("dmp.gate.b", Tensor::zeros(vec![rows]).with_grad(true));
            }
            GatingVariant::Attention => {
                let a = (3.0 / d as f32).sqrt();
                for name in ATTN_PROJ {
                    let w = (0..d * d).map(|_| (rng.uniform() * 2.0 - 1.0) * a).collect();
                    p.insert(format!("dmp.attn.{name}.w"), Tensor::new(vec![d, d], w)?.with_grad(true));
                    p.insert(format!("dmp.attn.{name}.b"), Tensor::zeros(vec![d]).with_grad(true));
                }
                p.insert("dmp.attn.o.w", Tensor::zeros(vec![d, d]).with_grad(true));
            }
        }
    }
    Ok(p)
}

/// Extra parameters introduced by a patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub prompt_params: usize,
    pub gate_params: usize,
    pub total: usize,
    /// Backbone size the percentage is taken against.
    pub backbone_params: usize,
    pub pct_of_backbone: f64,
    /// True when `backbone_params` is a published model size rather than our count.
    pub published_reference: bool,
}

/// Published sizes of the named DiT configurations.
pub fn published_backbone_params(bb: &BackboneConfig) -> Option<usize> {
    let table = [("dit-b-2", 130_000_000), ("dit-l-2", 458_000_000), ("dit-xl-2", 675_000_000)];
    table
        .iter()
        .find(|(name, _)| BackboneConfig::preset(name).is_ok_and(|p| p == *bb))
        .map(|&(_, n)| n)
}

pub fn count_extra_params(bb: &BackboneConfig, patch: &Patch) -> ParamBudget {
    let d = bb.hidden_dim;
    let blocks = patch.coverage(bb).len();
    let (prompt_params, gate_params) = match patch {
        Patch::None => (0, 0),
        Patch::PromptTune => (blocks * bb.tokens() * d, 0),
        Patch::Dmp(cfg) => {
            let pool = cfg.pool_size(bb);
            let gate = match cfg.gating_variant {
                GatingVariant::Linear => (d + 1) * pool + pool,
                GatingVariant::Attention => 3 * (d * d + d) + d * d,
            };
            (blocks * pool * d, gate)
        }
    };
    let total = prompt_params + gate_params;
    let published = published_backbone_params(bb);
    let backbone_params = published.unwrap_or_else(|| bb.param_count());
    ParamBudget {
        prompt_params,
        gate_params,
        total,
        backbone_params,
        pct_of_backbone: 100.0 * total as f64 / backbone_params as f64,
        published_reference: published.is_some(),
    }
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k_indices<T: PartialOrd + Copy>(values: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Gate activity at one block: logits and softmax weights `[B, P]`.
#[derive(Clone, Debug)]
pub struct LayerGate {
    pub block: usize,
    pub logits: Var,
    pub soft: Var,
    /// Weights actually applied to the prompts (equal to `soft` under soft gating).
    pub applied: Var,
}

fn depth_feature(cfg: &DmpConfig, block: usize, depth: usize) -> f64 {
    match cfg.selection {
        Selection::Uniform => 0.0,
        Selection::Distinct if depth > 1 => block as f64 / (depth - 1) as f64,
        Selection::Distinct => 0.0,
    }
}

fn gate_input<T: Real>(tape: &mut Tape<T>, cfg: &DmpConfig, ctx: &HookContext) -> Result<Var> {
    match (cfg.condition_mode, ctx.y_emb) {
        (ConditionMode::TPlusC, Some(y)) => tape.add(ctx.t_emb, y),
        _ => Ok(ctx.t_emb),
    }
}

fn constant_from<T: Real>(tape: &mut Tape<T>, shape: Vec<usize>, v: impl IntoIterator<Item = f64>) -> Result<Var> {
    tape.constant(shape, v.into_iter().map(T::of).collect())
}

/// 0/1 mask with the top `k` entries of each row set.
fn hard_mask<T: Real>(values: &[T], rows: usize, cols: usize, k: usize) -> Vec<f64> {
    let mut mask = vec![0.0; rows * cols];
    for r in 0..rows {
        for j in top_k_indices(&values[r * cols..(r + 1) * cols], k) {
            mask[r * cols + j] = 1.0;
        }
    }
    mask
}

/// Linear gate on the tape. `emb` is `[B, D]`.
pub fn linear_gate<T: Real>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    bb: &BackboneConfig,
    cfg: &DmpConfig,
    emb: Var,
    block: usize,
) -> Result<LayerGate> {
    if block >= bb.depth {
        return Err(Error::config(format!("block {block} outside [0, {})", bb.depth)));
    }
    let batch = tape.shape(emb)[0];
    let depth = constant_from(tape, vec![batch, 1], std::iter::repeat_n(depth_feature(cfg, block, bb.depth), batch))?;
    let input = tape.concat_last(&[emb, depth])?;
    let logits = tape.linear(input, binds.var("dmp.gate.w")?, Some(binds.var("dmp.gate.b")?))?;
    let soft = tape.softmax(logits)?;
    let applied = match cfg.gating_type {
        GatingType::Soft => soft,
        GatingType::Hard => {
            let pool = tape.shape(logits)[1];
            let mask = hard_mask(tape.value(logits), batch, pool, cfg.k(bb));
            constant_from(tape, vec![batch, pool], mask)?
        }
    };
    Ok(LayerGate {
        block,
        logits,
        soft,
        applied,
    })
}

/// Gate output for a single conditioning vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    pub weights: Vec<f32>,
    pub logits: Vec<f32>,
}

/// Evaluates the linear gate outside of training.
pub fn gate_weights(
    params: &ParamStore,
    bb: &BackboneConfig,
    cfg: &DmpConfig,
    t_emb: &[f32],
    block: usize,
    c_emb: Option<&[f32]>,
) -> Result<GateOutput> {
    if cfg.gating_variant != GatingVariant::Linear {
        return Err(Error::config("gate_weights requires the linear gating variant"));
    }
    let d = bb.hidden_dim;
    if t_emb.len() != d || c_emb.is_some_and(|c| c.len() != d) {
        return Err(Error::shape("gate_weights", &[t_emb.len()], &[d]));
    }
    let mut tape = Tape::<f32>::new();
    let binds = params.bind(&mut tape);
    let emb: Vec<f32> = match (cfg.condition_mode, c_emb) {
        (ConditionMode::TPlusC, Some(c)) => t_emb.iter().zip(c).map(|(a, b)| a + b).collect(),
        _ => t_emb.to_vec(),
    };
    let emb = tape.constant(vec![1, d], emb)?;
    let gate = linear_gate(&mut tape, &binds, bb, cfg, emb, block)?;
    Ok(GateOutput {
        weights: tape.value(gate.applied).to_vec(),
        logits: tape.value(gate.logits).to_vec(),
    })
}

/// Sinusoidal embedding of a block index, used as the depth token of the attention gate.
fn depth_token(block: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    out.extend(freqs.iter().map(|f| (block as f64 * f).cos()));
    out.extend(freqs.iter().map(|f| (block as f64 * f).sin()));
    out.resize(dim, 0.0);
    out
}

/// Attention gate: prompts query the conditioning and depth tokens. Returns
/// the weighted prompts `[B, P, D]` to inject.
pub fn attention_gate<T: Real>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    bb: &BackboneConfig,
    cfg: &DmpConfig,
    prompts: Var,
    emb: Var,
    block: usize,
) -> Result<Var> {
    let batch = tape.shape(emb)[0];
    let (pool, d) = match *tape.shape(prompts) {
        [p, d] => (p, d),
        ref s => return Err(Error::shape("attention_gate prompts", s, &[0, bb.hidden_dim])),
    };
    let depth = match cfg.selection {
        Selection::Distinct => depth_token(block, d),
        Selection::Uniform => vec![0.0; d],
    };
    let depth = constant_from(tape, vec![batch, 1, d], depth.iter().copied().cycle().take(batch * d))?;
    let cond = tape.reshape(emb, vec![batch, 1, d])?;
    let kv = tape.concat_tokens(cond, depth)?;
    let proj = |tape: &mut Tape<T>, name: &str, x: Var| {
        tape.linear(
            x,
            binds.var(&format!("dmp.attn.{name}.w"))?,
            Some(binds.var(&format!("dmp.attn.{name}.b"))?),
        )
    };
    let q = proj(tape, "q", prompts)?;
    let k = proj(tape, "k", kv)?;
    let v = proj(tape, "v", kv)?;
    let zeros = constant_from(tape, vec![batch, pool, d], std::iter::repeat_n(0.0, batch * pool * d))?;
    let q = tape.add_broadcast(zeros, q)?;
    let a = tape.attention(q, k, v, 1)?;
    let out = tape.linear(a, binds.var("dmp.attn.o.w")?, None)?;
    match cfg.gating_type {
        GatingType::Soft => Ok(out),
        GatingType::Hard => {
            // rank prompts by their score against the conditioning key
            let (qv, kv) = (tape.value(q), tape.value(k));
            let mut scores = vec![T::zero(); batch * pool];
            for b in 0..batch {
                let key = &kv[b * 2 * d..b * 2 * d + d];
                for n in 0..pool {
                    let row = &qv[(b * pool + n) * d..(b * pool + n + 1) * d];
                    scores[b * pool + n] = row.iter().zip(key).map(|(&x, &y)| x * y).sum();
                }
            }
            let mask = hard_mask(&scores, batch, pool, cfg.k(bb));
            let full = mask.iter().flat_map(|&m| std::iter::repeat_n(m, d));
            let mask = constant_from(tape, vec![batch, pool, d], full)?;
            tape.mul(out, mask)
        }
    }
}

/// Adds or prepends weighted prompts on a single token matrix.
///
/// `x` is `[N, D]`, `prompts` is `[P, D]` and `weights` has `P` entries.
pub fn inject(x: &Tensor, prompts: &Tensor, weights: &[f32], position: Position) -> Result<Tensor> {
    let (n, d) = match *x.shape() {
        [n, d] => (n, d),
        ref s => return Err(Error::shape("inject tokens", s, prompts.shape())),
    };
    let p = prompts.shape()[0];
    if prompts.shape() != [p, d] || weights.len() != p || (position == Position::Add && p != n) {
        return Err(Error::shape("inject", x.shape(), prompts.shape()));
    }
    let weighted = prompts
        .data()
        .chunks(d)
        .zip(weights)
        .flat_map(|(row, &w)| row.iter().map(move |&v| w * v));
    match position {
        Position::Add => {
            let data = x.data().iter().zip(weighted).map(|(&a, b)| b + a).collect();
            Tensor::new(vec![n, d], data)
        }
        Position::Prepend => {
            let mut data: Vec<f32> = weighted.collect();
            data.extend_from_slice(x.data());
            Tensor::new(vec![p + n, d], data)
        }
    }
}

/// Importance and load losses over the recorded gates.
///
/// Importance sums the squared coefficient of variation of the batch-mean
/// soft weights over layers. Load averages a sigmoid surrogate of the
/// fraction of negative (or positive) logits over layers.
pub fn balancing_losses<T: Real>(tape: &mut Tape<T>, gates: &[LayerGate], cfg: &DmpConfig) -> Result<(Var, Var)> {
    if gates.is_empty() {
        return Err(Error::config("balancing losses need at least one gated layer"));
    }
    let mut importance = None;
    let mut load = None;
    let sign = match cfg.load_sign {
        LoadSign::Negative => -1.0,
        LoadSign::Positive => 1.0,
    };
    for g in gates {
        let mean_w = tape.mean_rows(g.soft)?;
        let mu = tape.mean(mean_w);
        let centered = tape.sub(mean_w, mu)?;
        let sq = tape.square(centered);
        let var = tape.mean(sq);
        let mu2 = tape.square(mu);
        let denom = tape.add_scalar(mu2, 1e-5);
        let cv = tape.div(var, denom)?;
        importance = Some(match importance {
            Some(acc) => tape.add(acc, cv)?,
            None => cv,
        });

        let z = tape.scale(g.logits, sign / cfg.load_temperature as f64);
        let ind = tape.sigmoid(z);
        let frac = tape.mean(ind);
        load = Some(match load {
            Some(acc) => tape.add(acc, frac)?,
            None => frac,
        });
    }
    let load = tape.scale(load.unwrap(), 1.0 / gates.len() as f64);
    Ok((importance.unwrap(), load))
}

/// Plain-value gate record: per covered block, logits and weights `[B, P]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateTrace {
    pub timesteps: Vec<usize>,
    pub layers: Vec<TraceLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceLayer {
    pub block: usize,
    pub logits: Tensor,
    pub weights: Tensor,
}

impl GateTrace {
    pub fn from_tape<T: Real>(tape: &Tape<T>, gates: &[LayerGate], timesteps: &[usize]) -> Self {
        GateTrace {
            timesteps: timesteps.to_vec(),
            layers: gates
                .iter()
                .map(|g| TraceLayer {
                    block: g.block,
                    logits: tape.to_tensor(g.logits),
                    weights: tape.to_tensor(g.applied),
                })
                .collect(),
        }
    }

    /// Batch-mean weight per prompt for each layer.
    pub fn importance(&self) -> Vec<Vec<f32>> {
        self.layers
            .iter()
            .map(|l| {
                let (b, p) = (l.weights.shape()[0], l.weights.shape()[1]);
                (0..p)
                    .map(|j| (0..b).map(|i| l.weights.data()[i * p + j]).sum::<f32>() / b as f32)
                    .collect()
            })
            .collect()
    }

    /// Evaluates both balancing losses on the recorded values.
    pub fn balancing_losses(&self, cfg: &DmpConfig) -> Result<(f32, f32)> {
        let mut tape = Tape::<f32>::new();
        let gates: Vec<LayerGate> = self
            .layers
            .iter()
            .map(|l| {
                let logits = tape.input(&l.logits);
                let soft = tape.input(&l.weights);
                LayerGate {
                    block: l.block,
                    logits,
                    soft,
                    applied: soft,
                }
            })
            .collect();
        let (imp, load) = balancing_losses(&mut tape, &gates, cfg)?;
        Ok((tape.value(imp)[0], tape.value(load)[0]))
    }

    /// CSV with columns `timestep,block,prompt_index,weight`, one row per sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestep,block,prompt_index,weight\n");
        for l in &self.layers {
            let p = l.weights.shape()[1];
            for (i, &t) in self.timesteps.iter().enumerate() {
                for j in 0..p {
                    let _ = writeln!(out, "{t},{},{j},{}", l.block, l.weights.data()[i * p + j]);
                }
            }
        }
        out
    }
}

/// Block hook applying a [`Patch`]; records linear gate activity.
pub struct PatchHook<'a> {
    bb: &'a BackboneConfig,
    patch: &'a Patch,
    binds: &'a Bindings,
    coverage: Vec<usize>,
    pub gates: Vec<LayerGate>,
}

impl<'a> PatchHook<'a> {
    pub fn new(bb: &'a BackboneConfig, patch: &'a Patch, binds: &'a Bindings) -> Self {
        PatchHook {
            bb,
            patch,
            binds,
            coverage: patch.coverage(bb),
            gates: Vec::new(),
        }
    }
}

impl<T: Real> BlockHook<T> for PatchHook<'_> {
    fn before_block(&mut self, tape: &mut Tape<T>, block: usize, x: Var, ctx: &HookContext) -> Result<(Var, usize)> {
        if !self.coverage.contains(&block) {
            return Ok((x, 0));
        }
        let prompts = self.binds.var(&prompt_name(block))?;
        let cfg = match self.patch {
            Patch::None => return Ok((x, 0)),
            Patch::PromptTune => return Ok((tape.add_broadcast(x, prompts)?, 0)),
            Patch::Dmp(cfg) => cfg,
        };
        let emb = gate_input(tape, cfg, ctx)?;
        let weighted = match cfg.gating_variant {
            GatingVariant::Linear => {
                let gate = linear_gate(tape, self.binds, self.bb, cfg, emb, block)?;
                let w = tape.weight_tokens(gate.applied, prompts)?;
                self.gates.push(gate);
                w
            }
            GatingVariant::Attention => attention_gate(tape, self.binds, self.bb, cfg, prompts, emb, block)?,
        };
        match cfg.position {
            Position::Add => Ok((tape.add(x, weighted)?, 0)),
            Position::Prepend => {
                let n = tape.shape(weighted)[1];
                Ok((tape.concat_tokens(weighted, x)?, n))
            }
        }
    }
}
