//! Pretraining, fine-tuning, naive prompt tuning and patch training.

pub mod checkpoint;
pub mod optim;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, null_label};
use crate::datagen::{BatchCursor, Batches, Dataset};
use crate::diffusion::{denoising_loss, make_schedule, sample_timesteps, NoiseSchedule, ScheduleKind};
use crate::dmp::{self, balancing_losses, GatingVariant, Patch};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numcore::{ParamStore, Rng, Tape, Tensor};

pub use checkpoint::{Checkpoint, CheckpointMeta, ScheduleSpec};
pub use optim::{clip_grad_norm, grad_norm, AdamW};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
    PromptTune,
    DmpPatch,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
            Phase::PromptTune => "prompt_tune",
            Phase::DmpPatch => "dmp_patch",
        }
    }

    fn needs_frozen_backbone(self) -> bool {
        matches!(self, Phase::PromptTune | Phase::DmpPatch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    /// Global gradient norm bound.
    pub grad_clip: f32,
    /// Probability of replacing a class label with the null label.
    pub label_dropout_p: f32,
    /// EMA decay for pretraining; ignored in other phases.
    pub ema_decay: Option<f32>,
    pub flip: bool,
    pub seed: u64,
    /// Save a resumable checkpoint every this many iterations; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Progress line interval; 0 disables progress output.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 30_000,
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            label_dropout_p: 0.1,
            ema_decay: None,
            flip: true,
            seed: 0,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("lr and grad_clip must be positive, weight_decay >= 0"));
        }
        if !(0.0..=1.0).contains(&self.label_dropout_p) {
            return Err(Error::config("label_dropout_p must lie in [0, 1]"));
        }
        if self.ema_decay.is_some_and(|d| !(0.0..1.0).contains(&d)) {
            return Err(Error::config("ema_decay must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    pub loss: f32,
    pub importance: f32,
    pub load: f32,
    pub grad_norm: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub rows: Vec<StepStats>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,L_importance,L_load\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.iteration, r.loss, r.importance, r.load);
        }
        out
    }

    /// Mean loss over consecutive windows of `window` rows.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.rows
            .chunks_exact(window.max(1))
            .map(|c| c.iter().map(|r| r.loss as f64).sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// Iteration at the end of the first window whose mean improves on the
    /// previous window by less than `rel_tol`.
    pub fn converged_at(&self, window: usize, rel_tol: f64) -> Option<u64> {
        let means = self.window_means(window);
        means
            .windows(2)
            .position(|w| (w[0] - w[1]) / w[0].abs().max(1e-12) < rel_tol)
            .map(|i| self.rows[(i + 2) * window - 1].iteration)
    }
}

pub const CONVERGENCE_WINDOW: usize = 1000;
pub const CONVERGENCE_TOL: f64 = 0.005;

const STREAM_NOISE: &str = "train.noise";
const STREAM_TIMESTEP: &str = "train.timestep";
const STREAM_DROPOUT: &str = "train.label_dropout";

/// One training run over a dataset.
pub struct Trainer<'d> {
    pub model: Model,
    pub phase: Phase,
    pub cfg: TrainConfig,
    pub curve: LossCurve,
    sched: NoiseSchedule,
    optim: AdamW,
    ema: Option<ParamStore>,
    frozen_digest: Option<u64>,
    batches: Batches<'d>,
    noise_rng: Rng,
    t_rng: Rng,
    dropout_rng: Rng,
    iteration: u64,
}

fn check_data(model: &Model, data: &Dataset) -> Result<()> {
    let bb = &model.backbone;
    let expect = [bb.image_size, bb.image_size, bb.channels];
    if data.images.shape()[1..] != expect {
        return Err(Error::shape("training data", &data.images.shape()[1..], &expect));
    }
    if bb.conditional() && !data.conditional() {
        return Err(Error::config("conditional backbone needs a labelled dataset"));
    }
    if bb.conditional() && data.labels.iter().any(|&l| l >= bb.num_classes) {
        return Err(Error::config("dataset labels exceed the backbone's class count"));
    }
    Ok(())
}

impl<'d> Trainer<'d> {
    fn build(
        model: Model,
        phase: Phase,
        cfg: TrainConfig,
        sched: NoiseSchedule,
        frozen_digest: Option<u64>,
        data: &'d Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        check_data(&model, data)?;
        model.patch.validate(&model.backbone)?;
        let optim = AdamW::new(&model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        let ema = match (phase, cfg.ema_decay) {
            (Phase::Pretrain, Some(_)) => Some(model.params.clone()),
            _ => None,
        };
        Ok(Trainer {
            batches: Batches::new(data, cfg.batch_size, cfg.flip, cfg.seed)?,
            noise_rng: Rng::substream(cfg.seed, STREAM_NOISE),
            t_rng: Rng::substream(cfg.seed, STREAM_TIMESTEP),
            dropout_rng: Rng::substream(cfg.seed, STREAM_DROPOUT),
            model,
            phase,
            cfg,
            curve: LossCurve::default(),
            sched,
            optim,
            ema,
            frozen_digest,
            iteration: 0,
        })
    }

    /// Pretraining from a fresh initialization derived from `cfg.seed`.
    pub fn pretrain(
        bb: backbone::BackboneConfig,
        schedule: ScheduleSpec,
        cfg: TrainConfig,
        data: &'d Dataset,
    ) -> Result<Self> {
        let model = Model::init(bb, &mut Rng::substream(cfg.seed, "model.init"))?;
        let sched = make_schedule(schedule.kind, schedule.steps)?;
        Trainer::build(model, Phase::Pretrain, cfg, sched, None, data)
    }

    /// Further training of a frozen pretrained checkpoint.
    ///
    /// `phase` selects fine-tuning (backbone unfrozen, no patch), naive prompt
    /// tuning or patch training. `patch` is only consulted for [`Phase::DmpPatch`].
    pub fn further(base: &Checkpoint, phase: Phase, patch: Option<dmp::DmpConfig>, cfg: TrainConfig, data: &'d Dataset) -> Result<Self> {
        let digest = verify_frozen(base)?;
        if base.meta.patch != Patch::None {
            return Err(Error::config("further training needs an unpatched base checkpoint"));
        }
        let base_model = Model {
            backbone: base.meta.backbone.clone(),
            patch: Patch::None,
            params: base.model_params(),
        };
        let sched = make_schedule(base.meta.schedule.kind, base.meta.schedule.steps)?;
        let mut init_rng = Rng::substream(cfg.seed, "patch.init");
        let (model, frozen) = match phase {
            Phase::Pretrain => return Err(Error::config("use Trainer::pretrain for the pretraining phase")),
            Phase::Finetune => {
                let mut m = base_model;
                backbone::unfreeze(&mut m.params);
                (m, None)
            }
            Phase::PromptTune => (base_model.with_patch(Patch::PromptTune, &mut init_rng)?, Some(digest)),
            Phase::DmpPatch => {
                let dmp = patch.unwrap_or_else(|| dmp::DmpConfig::for_backbone(&base.meta.backbone));
                (base_model.with_patch(Patch::Dmp(dmp), &mut init_rng)?, Some(digest))
            }
        };
        Trainer::build(model, phase, cfg, sched, frozen, data)
    }

    /// Continues a run saved by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, data: &'d Dataset) -> Result<Self> {
        let meta = &ckpt.meta;
        let cfg = meta
            .train
            .clone()
            .ok_or_else(|| Error::config("checkpoint carries no training state"))?;
        if meta.phase.needs_frozen_backbone() {
            verify_frozen(ckpt)?;
        }
        let model = Model {
            backbone: meta.backbone.clone(),
            patch: meta.patch.clone(),
            params: ckpt.model_params(),
        };
        let sched = make_schedule(meta.schedule.kind, meta.schedule.steps)?;
        let mut t = Trainer::build(model, meta.phase, cfg, sched, meta.frozen_digest, data)?;
        t.optim.load_tensors(&ckpt.tensors, meta.optim_step)?;
        if let Some(ema) = t.ema.as_mut() {
            for (name, v) in ema.iter_mut() {
                *v = ckpt.tensors.get(&format!("{}{name}", checkpoint::EMA_PREFIX))?.clone();
            }
        }
        t.iteration = meta.iteration;
        for (name, state) in &meta.rng {
            let rng = Rng::from_state(state)?;
            match name.as_str() {
                STREAM_NOISE => t.noise_rng = rng,
                STREAM_TIMESTEP => t.t_rng = rng,
                STREAM_DROPOUT => t.dropout_rng = rng,
                "data.flip" => {}
                other => return Err(Error::config(format!("unknown rng stream `{other}`"))),
            }
        }
        if let Some((epoch, position)) = meta.data_cursor {
            let flip = meta
                .rng
                .iter()
                .find(|(n, _)| n == "data.flip")
                .map(|(_, s)| s.clone())
                .ok_or_else(|| Error::config("checkpoint lacks the data.flip stream"))?;
            t.batches.restore(&BatchCursor {
                epoch,
                position,
                flip_rng: flip,
            })?;
        }
        Ok(t)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optim
    }

    pub fn frozen_digest(&self) -> Option<u64> {
        self.frozen_digest
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<StepStats> {
        let batch = self.batches.next_batch()?;
        let n = batch.images.shape()[0];
        let labels = batch.labels.map(|mut l| {
            for v in l.iter_mut() {
                if self.dropout_rng.bernoulli(self.cfg.label_dropout_p) {
                    *v = null_label(&self.model.backbone);
                }
            }
            l
        });
        let t = sample_timesteps(&mut self.t_rng, n, &self.sched);
        let eps = Tensor::new(batch.images.shape().to_vec(), self.noise_rng.normal_vec(batch.images.numel()))?;

        let mut tape = Tape::<f32>::new();
        let binds = self.model.params.bind(&mut tape);
        let model = &self.model;
        let mut gates = Vec::new();
        let loss = denoising_loss(
            &mut tape,
            |tape, x_t, t| {
                let (out, g) = model.forward(tape, &binds, x_t, t, labels.as_deref())?;
                gates = g;
                Ok(out.eps)
            },
            &batch.images,
            &t,
            &eps,
            &self.sched,
        )?;
        let (mut importance, mut load) = (0.0, 0.0);
        let mut total = loss;
        if let Patch::Dmp(cfg) = &self.model.patch {
            if cfg.gating_variant == GatingVariant::Linear && !gates.is_empty() {
                let (imp, ld) = balancing_losses(&mut tape, &gates, cfg)?;
                importance = tape.value(imp)[0];
                load = tape.value(ld)[0];
                let imp = tape.scale(imp, cfg.lambda_importance as f64);
                let ld = tape.scale(ld, cfg.lambda_load as f64);
                total = tape.add(total, imp)?;
                total = tape.add(total, ld)?;
            }
        }
        let loss_value = tape.value(loss)[0];
        if !tape.value(total)[0].is_finite() {
            return Err(self.divergence(loss_value, "loss"));
        }
        let grads = tape.backward(total)?;
        match self.model.params.collect_grads(&binds, &grads) {
            Err(Error::NonFiniteGradient { name }) => return Err(self.divergence(loss_value, &format!("gradient of `{name}`"))),
            other => other?,
        }
        let norm = clip_grad_norm(&mut self.model.params, self.cfg.grad_clip);
        self.optim.step(&mut self.model.params)?;
        if let (Some(ema), Some(decay)) = (self.ema.as_mut(), self.cfg.ema_decay) {
            for (name, e) in ema.iter_mut() {
                let p = self.model.params.get(name)?;
                for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
                    *ev = decay * *ev + (1.0 - decay) * pv;
                }
            }
        }
        self.iteration += 1;
        let stats = StepStats {
            iteration: self.iteration,
            loss: loss_value,
            importance,
            load,
            grad_norm: norm,
        };
        self.curve.rows.push(stats);
        Ok(stats)
    }

    fn divergence(&self, loss: f32, what: &str) -> Error {
        let last_norm = self.curve.rows.last().map(|r| r.grad_norm).unwrap_or(f32::NAN);
        Error::Divergence {
            iteration: self.iteration + 1,
            diagnostic: format!(
                "non-finite {what} (loss {loss}, lr {}, last grad norm {last_norm})",
                self.cfg.lr
            ),
        }
    }

    /// Runs `iterations` steps, calling `on_step` after each.
    pub fn run(&mut self, iterations: u64, mut on_step: impl FnMut(&StepStats)) -> Result<()> {
        for _ in 0..iterations {
            let s = self.step()?;
            on_step(&s);
        }
        Ok(())
    }

    /// Resumable snapshot. Fails if a frozen backbone has changed.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        if let Some(expected) = self.frozen_digest {
            let found = self.model.backbone_digest();
            if found != expected {
                return Err(Error::DigestMismatch { expected, found });
            }
        }
        let mut tensors = self.model.params.clone();
        for (name, t) in self.optim.to_tensors(&self.model.params)?.into_map() {
            tensors.insert(name, t);
        }
        if let Some(ema) = &self.ema {
            for (name, t) in ema.iter() {
                tensors.insert(format!("{}{name}", checkpoint::EMA_PREFIX), t.clone().with_grad(false));
            }
        }
        let cursor = self.batches.cursor();
        Ok(Checkpoint {
            meta: CheckpointMeta {
                backbone: self.model.backbone.clone(),
                patch: self.model.patch.clone(),
                schedule: ScheduleSpec {
                    kind: self.sched.kind(),
                    steps: self.sched.steps(),
                },
                frozen_digest: self.frozen_digest,
                iteration: self.iteration,
                phase: self.phase,
                train: Some(self.cfg.clone()),
                rng: vec![
                    (STREAM_NOISE.to_string(), self.noise_rng.state()),
                    (STREAM_TIMESTEP.to_string(), self.t_rng.state()),
                    (STREAM_DROPOUT.to_string(), self.dropout_rng.state()),
                    ("data.flip".to_string(), cursor.flip_rng.clone()),
                ],
                data_cursor: Some((cursor.epoch, cursor.position)),
                optim_step: self.optim.step_count(),
            },
            tensors,
        })
    }

    /// Model-only snapshot for sampling and evaluation.
    pub fn model_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = self.checkpoint()?;
        ckpt.tensors = self.model.params.clone();
        ckpt.meta.train = None;
        ckpt.meta.rng.clear();
        ckpt.meta.data_cursor = None;
        ckpt.meta.optim_step = 0;
        Ok(ckpt)
    }
}

/// Checks that a checkpoint's backbone is frozen and unchanged; returns its digest.
pub fn verify_frozen(ckpt: &Checkpoint) -> Result<u64> {
    let expected = ckpt
        .meta
        .frozen_digest
        .ok_or_else(|| Error::config("checkpoint backbone is not frozen (no frozen digest recorded)"))?;
    let params = ckpt.model_params();
    if params
        .iter()
        .any(|(n, t)| backbone::is_backbone_param(n) && t.requires_grad())
    {
        return Err(Error::config("checkpoint backbone is not frozen (trainable backbone entries)"));
    }
    let found = backbone::backbone_digest(&params);
    if found != expected {
        return Err(Error::DigestMismatch { expected, found });
    }
    Ok(expected)
}

/// Converts a pretraining snapshot into the frozen base for further training.
/// EMA weights replace the raw weights when present.
pub fn freeze_pretrained(ckpt: &Checkpoint) -> Result<Checkpoint> {
    if ckpt.meta.phase != Phase::Pretrain || ckpt.meta.patch != Patch::None {
        return Err(Error::config("only pretraining checkpoints can be frozen"));
    }
    let mut params = ckpt.model_params();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        if let Ok(e) = ckpt.tensors.get(&format!("{}{name}", checkpoint::EMA_PREFIX)) {
            *params.get_mut(&name)? = e.clone();
        }
    }
    let digest = backbone::freeze(&mut params);
    Ok(Checkpoint {
        meta: CheckpointMeta {
            frozen_digest: Some(digest),
            train: None,
            rng: Vec::new(),
            data_cursor: None,
            optim_step: 0,
            ..ckpt.meta.clone()
        },
        tensors: params,
    })
}

/// Model described by a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Model {
    Model {
        backbone: ckpt.meta.backbone.clone(),
        patch: ckpt.meta.patch.clone(),
        params: ckpt.model_params(),
    }
}

/// Schedule recorded in a checkpoint.
pub fn schedule_of(ckpt: &Checkpoint) -> Result<NoiseSchedule> {
    make_schedule(ckpt.meta.schedule.kind, ckpt.meta.schedule.steps)
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Linear,
            steps: 1000,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(losses: &[f32]) -> LossCurve {
        LossCurve {
            rows: losses
                .iter()
                .enumerate()
                .map(|(i, &loss)| StepStats {
                    iteration: i as u64 + 1,
                    loss,
                    importance: 0.0,
                    load: 0.0,
                    grad_norm: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn convergence_window() {
        // windows of 2: means 1.0, 0.5, 0.499
        let c = curve(&[1.0, 1.0, 0.5, 0.5, 0.499, 0.499]);
        assert_eq!(c.window_means(2).len(), 3);
        assert_eq!(c.converged_at(2, 0.005), Some(6));
        assert_eq!(curve(&[1.0, 1.0, 0.5, 0.5]).converged_at(2, 0.005), None);
    }

    #[test]
    fn csv_header() {
        assert!(curve(&[0.5]).to_csv().starts_with("iteration,loss,L_importance,L_load\n1,0.5,0,0\n"));
    }

    #[test]
    fn config_bounds() {
        let bad = TrainConfig {
            label_dropout_p: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
