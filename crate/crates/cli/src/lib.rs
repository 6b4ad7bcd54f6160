//! `dmp` command-line pipeline: data generation, pretraining, patching and
//! baselines, sampling, evaluation, gate analysis and parameter accounting.

pub mod config;
mod rundir;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dmp_core::backbone::BackboneConfig;
use dmp_core::datagen::{generate, Dataset, DatasetSpec};
use dmp_core::diffusion::Denoiser;
use dmp_core::dmp::{count_extra_params, published_backbone_params, Patch};
use dmp_core::eval::{activation_matrix, generate_samples, report, toy_fid, RunSummary};
use dmp_core::numcore::{ParamStore, Tensor};
use dmp_core::trainer::checkpoint::{encode, write_atomic};
use dmp_core::trainer::{freeze_pretrained, model_from_checkpoint, schedule_of, Trainer};
use dmp_core::{Checkpoint, Error, Phase, Result};

pub use config::RunConfig;
use rundir::RunDir;

#[derive(Parser, Debug)]
#[command(name = "dmp", version, about = "Diffusion model patching on a miniature DiT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed` and `eval.seed` (`data.seed` for gen-data).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; must not exist yet or be empty.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Config override, e.g. `--set train.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset file from gen-data; generated from `[data]` when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overrides `train.iterations`.
    #[arg(long)]
    pub iters: Option<u64>,
    /// Continue from a `state.dmpk` written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct FurtherArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Frozen base checkpoint (`base.dmpk` from pretrain).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic dataset described by `[data]`.
    GenData(Common),
    /// Train the backbone from scratch.
    Pretrain(TrainArgs),
    /// Train DMP prompts and gate on a frozen base.
    Patch(FurtherArgs),
    /// Further-train every backbone parameter (baseline).
    Finetune(FurtherArgs),
    /// Train ungated prompts on a frozen base (baseline).
    PromptTune(FurtherArgs),
    /// Draw samples from a checkpoint.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        /// Number of samples.
        #[arg(long, default_value_t = 64)]
        n: usize,
    },
    /// toy-FID of a checkpoint against held-out real images.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Method label written to eval.json; derived from the checkpoint by default.
        #[arg(long)]
        method: Option<String>,
    },
    /// Gate activation matrix over the sampling trajectory.
    Activations(ModelArgs),
    /// Extra parameters of a DMP patch relative to the backbone.
    CountParams {
        /// Named backbone; repeatable. Defaults to dit-b-2, dit-l-2 and dit-xl-2.
        #[arg(long)]
        preset: Vec<String>,
        /// Count the `[backbone]` and `[dmp]` of this config instead.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Comparison table over evaluated runs.
    Report {
        #[command(flatten)]
        common: Common,
        /// eval.json files or run directories containing one.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Exit nonzero when a method is absent.
        #[arg(long)]
        strict: bool,
    },
}

/// Process exit code for a library error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape { .. } | Error::Io { .. } => 2,
        Error::Integrity { .. } | Error::DigestMismatch { .. } => 3,
        Error::Divergence { .. } | Error::NumericDomain { .. } | Error::NonFiniteGradient { .. } => 4,
    }
}

/// Parses `args` and runs the command.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(c.config.as_deref(), &c.set)?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    Ok(cfg)
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

pub fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::GenData(c) => gen_data(&c),
        Command::Pretrain(a) => pretrain(&a),
        Command::Patch(a) => further(&a, Phase::DmpPatch, "patch"),
        Command::Finetune(a) => further(&a, Phase::Finetune, "finetune"),
        Command::PromptTune(a) => further(&a, Phase::PromptTune, "prompt-tune"),
        Command::Sample { model, n } => sample_cmd(&model, n),
        Command::Eval { model, method } => eval_cmd(&model, method),
        Command::Activations(m) => activations_cmd(&m),
        Command::CountParams { preset, config, set } => count_params(&preset, config.as_deref(), &set),
        Command::Report { common, runs, strict } => report_cmd(&common, &runs, strict),
    }
}

fn gen_data(c: &Common) -> Result<u8> {
    let mut cfg = load_config(c)?;
    if let Some(seed) = c.seed {
        cfg.data.seed = seed;
    }
    let run = RunDir::create("gen-data", cfg.data.seed, c.out.as_deref(), &cfg)?;
    let data = generate(&cfg.data)?;
    data.save(&run.path("dataset.dmpk"))?;
    run.log(&format!("{} images, checksum {:016x}", data.len(), data.checksum()));
    Ok(0)
}

fn load_data(path: Option<&Path>, spec: &DatasetSpec, run: &RunDir) -> Result<Dataset> {
    let data = match path {
        Some(p) => Dataset::load(p)?,
        None => generate(spec)?,
    };
    run.log(&format!("dataset `{}`: {} images, checksum {:016x}", data.spec.name, data.len(), data.checksum()));
    Ok(data)
}

#[derive(Serialize)]
struct TrainSummary {
    phase: &'static str,
    iterations: u64,
    final_window_loss: Option<f64>,
    converged_at: Option<u64>,
    trainable_params: usize,
    frozen_digest: Option<String>,
}

/// Steps `t` to `target` iterations with periodic logging and checkpoints.
/// The loss curve is written even when training diverges.
fn train_loop(t: &mut Trainer<'_>, target: u64, run: &RunDir) -> Result<()> {
    let (log_every, ckpt_every) = (t.cfg.log_every, t.cfg.checkpoint_every);
    let result = (|| {
        while t.iteration() < target {
            let s = t.step()?;
            if log_every > 0 && s.iteration % log_every == 0 {
                run.log(&format!(
                    "iter {} loss {:.6} L_importance {:.6} L_load {:.6} grad_norm {:.4}",
                    s.iteration, s.loss, s.importance, s.load, s.grad_norm
                ));
            }
            if ckpt_every > 0 && s.iteration % ckpt_every == 0 && s.iteration < target {
                t.checkpoint()?.save(&run.path("state.dmpk"))?;
            }
        }
        Ok(())
    })();
    write_atomic(&run.path("loss.csv"), t.curve.to_csv().as_bytes())?;
    if let Err(e) = &result {
        run.log(&format!("aborted: {e}"));
    }
    result
}

fn summary(t: &Trainer<'_>) -> TrainSummary {
    let window = dmp_core::trainer::CONVERGENCE_WINDOW;
    TrainSummary {
        phase: t.phase.as_str(),
        iterations: t.iteration(),
        final_window_loss: t.curve.window_means(window).last().copied(),
        converged_at: t.curve.converged_at(window, dmp_core::trainer::CONVERGENCE_TOL),
        trainable_params: t.model.params.trainable_numel(),
        frozen_digest: t.frozen_digest().map(|d| format!("{d:016x}")),
    }
}

fn pretrain(a: &TrainArgs) -> Result<u8> {
    let mut cfg = load_config(&a.common)?;
    if let Some(i) = a.iters {
        cfg.train.iterations = i;
    }
    let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resumed {
        if ck.meta.phase != Phase::Pretrain {
            return Err(Error::config("--resume expects a pretraining state.dmpk"));
        }
        cfg.backbone = ck.meta.backbone.clone();
        cfg.train = ck.meta.train.clone().unwrap_or(cfg.train);
    }
    let run = RunDir::create("pretrain", cfg.train.seed, a.common.out.as_deref(), &cfg)?;
    let data = load_data(a.data.as_deref(), &cfg.data, &run)?;
    let mut t = match &resumed {
        Some(ck) => Trainer::resume(ck, &data)?,
        None => Trainer::pretrain(cfg.backbone.clone(), cfg.diffusion.schedule_spec(), cfg.train.clone(), &data)?,
    };
    train_loop(&mut t, cfg.train.iterations, &run)?;
    let state = t.checkpoint()?;
    state.save(&run.path("state.dmpk"))?;
    freeze_pretrained(&state)?.save(&run.path("base.dmpk"))?;
    let s = summary(&t);
    match s.converged_at {
        Some(i) => run.log(&format!("moving-average loss converged at iteration {i}")),
        None => run.log("moving-average loss did not meet the convergence criterion"),
    }
    write_atomic(&run.path("summary.json"), to_json(&s).as_bytes())?;
    Ok(0)
}

fn further(a: &FurtherArgs, phase: Phase, name: &str) -> Result<u8> {
    let mut cfg = load_config(&a.train.common)?;
    if let Some(i) = a.train.iters {
        cfg.train.iterations = i;
    }
    let resumed = a.train.resume.as_deref().map(Checkpoint::load).transpose()?;
    let base = match (&resumed, &a.ckpt) {
        (Some(_), _) => None,
        (None, Some(p)) => Some(Checkpoint::load(p)?),
        (None, None) => return Err(Error::config(format!("{name} needs --ckpt <base.dmpk> or --resume <state.dmpk>"))),
    };
    let source = resumed.as_ref().or(base.as_ref()).unwrap();
    if resumed.is_some() {
        if source.meta.phase != phase {
            return Err(Error::config(format!("--resume state belongs to phase {}", source.meta.phase.as_str())));
        }
        cfg.train = source.meta.train.clone().unwrap_or(cfg.train);
        if let Patch::Dmp(d) = &source.meta.patch {
            cfg.dmp = d.clone();
        }
    }
    cfg.backbone = source.meta.backbone.clone();
    cfg.diffusion.schedule = source.meta.schedule.kind;
    cfg.diffusion.steps = source.meta.schedule.steps;
    let run = RunDir::create(name, cfg.train.seed, a.train.common.out.as_deref(), &cfg)?;
    let data = load_data(a.train.data.as_deref(), &cfg.data, &run)?;
    let mut t = match (&resumed, &base) {
        (Some(ck), _) => Trainer::resume(ck, &data)?,
        (None, Some(b)) => {
            let patch = (phase == Phase::DmpPatch).then(|| cfg.dmp.clone());
            Trainer::further(b, phase, patch, cfg.train.clone(), &data)?
        }
        (None, None) => unreachable!(),
    };
    run.log(&format!("trainable parameters: {}", t.model.params.trainable_numel()));
    train_loop(&mut t, cfg.train.iterations, &run)?;
    t.checkpoint()?.save(&run.path("state.dmpk"))?;
    let model = t.model_checkpoint()?;
    model.save(&run.path("model.dmpk"))?;
    write_atomic(&run.path("summary.json"), to_json(&summary(&t)).as_bytes())?;
    Ok(0)
}

/// Model checkpoint and the config echoed for a read-only command.
fn open_model(m: &ModelArgs, command: &str) -> Result<(RunConfig, Checkpoint, RunDir)> {
    let mut cfg = load_config(&m.common)?;
    let ckpt = Checkpoint::load(&m.ckpt)?;
    cfg.backbone = ckpt.meta.backbone.clone();
    cfg.diffusion.schedule = ckpt.meta.schedule.kind;
    cfg.diffusion.steps = ckpt.meta.schedule.steps;
    if let Patch::Dmp(d) = &ckpt.meta.patch {
        cfg.dmp = d.clone();
    }
    let run = RunDir::create(command, cfg.eval.seed, m.common.out.as_deref(), &cfg)?;
    run.log(&format!("checkpoint {}", m.ckpt.display()));
    Ok((cfg, ckpt, run))
}

/// Samples as grid image: PGM for one channel, PPM for three.
fn image_grid(images: &Tensor) -> Vec<u8> {
    let [n, h, w, c] = [images.shape()[0], images.shape()[1], images.shape()[2], images.shape()[3]];
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let channels = if c == 3 { 3 } else { 1 };
    let mut px = vec![0u8; gw * gh * channels];
    for i in 0..n {
        let (oy, ox) = ((i / cols) * (h + 1) + 1, (i % cols) * (w + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..channels {
                    let v = images.data()[((i * h + y) * w + x) * c + ch.min(c - 1)];
                    px[((oy + y) * gw + ox + x) * channels + ch] = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
                }
            }
        }
    }
    let magic = if channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{gw} {gh}\n255\n").into_bytes();
    out.extend(px);
    out
}

fn sample_cmd(m: &ModelArgs, n: usize) -> Result<u8> {
    let (cfg, ckpt, run) = open_model(m, "sample")?;
    let model = model_from_checkpoint(&ckpt);
    let sched = schedule_of(&ckpt)?;
    let images = generate_samples(&model, &sched, &cfg.diffusion.sampler(), n, cfg.eval.batch, cfg.eval.seed)?;
    let mut store = ParamStore::new();
    store.insert("samples", images.clone());
    let meta = to_json(&cfg.diffusion.sampler());
    write_atomic(&run.path("samples.dmpk"), &encode(&store, meta.as_bytes()))?;
    let ext = if images.shape()[3] == 3 { "ppm" } else { "pgm" };
    write_atomic(&run.path(&format!("samples.{ext}")), &image_grid(&images))?;
    run.log(&format!("{n} samples written"));
    Ok(0)
}

fn method_of(ck: &Checkpoint) -> &'static str {
    match ck.meta.phase {
        Phase::Pretrain => "pretrained",
        Phase::Finetune => "finetune",
        Phase::PromptTune => "prompt_tune",
        Phase::DmpPatch => "dmp",
    }
}

/// Trainable parameters of the phase that produced the checkpoint.
pub fn trainable_params_of(ck: &Checkpoint) -> usize {
    match ck.meta.phase {
        Phase::Pretrain | Phase::Finetune => ck.meta.backbone.param_count(),
        Phase::PromptTune | Phase::DmpPatch => count_extra_params(&ck.meta.backbone, &ck.meta.patch).total,
    }
}

/// Held-out real images for toy-FID.
pub fn held_out(cfg: &RunConfig) -> Result<Dataset> {
    generate(&DatasetSpec {
        seed: cfg.real_seed(),
        num_samples: cfg.eval.num_real,
        ..cfg.data.clone()
    })
}

fn eval_cmd(m: &ModelArgs, method: Option<String>) -> Result<u8> {
    let (cfg, ckpt, run) = open_model(m, "eval")?;
    let model = model_from_checkpoint(&ckpt);
    let sched = schedule_of(&ckpt)?;
    let real = held_out(&cfg)?;
    let shape = model.image_shape();
    if real.images.shape()[1..] != shape {
        return Err(Error::config("[data] image shape does not match the checkpoint backbone"));
    }
    let generated = generate_samples(&model, &sched, &cfg.diffusion.sampler(), cfg.eval.num_samples, cfg.eval.batch, cfg.eval.seed)?;
    let fid = toy_fid(&real.images, &generated, cfg.eval.fid_options())?;
    if fid.regularized {
        run.log("covariance was singular; added 1e-6 to the diagonals");
    }
    let result = RunSummary {
        method: method.unwrap_or_else(|| method_of(&ckpt).to_string()),
        iters: ckpt.meta.iteration,
        toy_fid: fid.value,
        trainable_params: trainable_params_of(&ckpt),
    };
    write_atomic(&run.path("eval.json"), to_json(&result).as_bytes())?;
    write_atomic(&run.path("fid.json"), to_json(&fid).as_bytes())?;
    run.log(&format!("toy-FID {:.6} ({} generated vs {} real)", fid.value, cfg.eval.num_samples, cfg.eval.num_real));
    println!("{}", fid.value);
    Ok(0)
}

fn activations_cmd(m: &ModelArgs) -> Result<u8> {
    let (cfg, ckpt, run) = open_model(m, "activations")?;
    let model = model_from_checkpoint(&ckpt);
    let sched = schedule_of(&ckpt)?;
    let a = activation_matrix(&model, &sched, &cfg.diffusion.sampler(), cfg.eval.probe_samples, cfg.eval.probe_timesteps, cfg.eval.seed)?;
    if let Some(n) = &a.notice {
        run.log(&format!("notice: {n}"));
    }
    write_atomic(&run.path("activations.csv"), a.to_csv().as_bytes())?;
    write_atomic(&run.path("activations.json"), to_json(&a).as_bytes())?;
    for (i, b) in a.blocks.iter().enumerate() {
        write_atomic(&run.path(&format!("block_{b:02}.pgm")), &a.to_pgm(i))?;
    }
    run.log(&format!("max row-sum error {:.2e}", a.max_row_sum_error()));
    Ok(0)
}

/// Table-1 style report lines.
pub fn count_params_report(rows: &[(String, BackboneConfig, Patch)]) -> String {
    let mut out = format!(
        "{:<10} {:>14} {:>12} {:>10} {:>12} {:>9} {:>9}\n",
        "config", "backbone", "prompts", "gate", "extra", "increase", "exact"
    );
    for (name, bb, patch) in rows {
        let b = count_extra_params(bb, patch);
        let reference = if b.published_reference { "published" } else { "counted" };
        // two decimals truncated, the convention of the published table
        let shown = (b.pct_of_backbone * 100.0).floor() / 100.0;
        out.push_str(&format!(
            "{:<10} {:>14} {:>12} {:>10} {:>12} {:>+8.2}% {:>8.4}%  ({reference} backbone size)\n",
            name, b.backbone_params, b.prompt_params, b.gate_params, b.total, shown, b.pct_of_backbone
        ));
    }
    out
}

fn count_params(presets: &[String], config: Option<&Path>, set: &[String]) -> Result<u8> {
    let mut rows = Vec::new();
    if config.is_some() || !set.is_empty() {
        let cfg = RunConfig::load(config, set)?;
        cfg.dmp.validate(&cfg.backbone)?;
        rows.push(("custom".to_string(), cfg.backbone.clone(), Patch::Dmp(cfg.dmp)));
    }
    let names: Vec<String> = if presets.is_empty() && rows.is_empty() {
        ["dit-b-2", "dit-l-2", "dit-xl-2"].map(String::from).to_vec()
    } else {
        presets.to_vec()
    };
    for n in names {
        let bb = BackboneConfig::preset(&n)?;
        let dmp = dmp_core::DmpConfig::for_backbone(&bb);
        rows.push((n, bb, Patch::Dmp(dmp)));
    }
    print!("{}", count_params_report(&rows));
    if rows.iter().any(|(_, bb, _)| published_backbone_params(bb).is_none()) {
        println!("counted backbone sizes come from this implementation's DiT, not a published figure");
    }
    Ok(0)
}

fn report_cmd(c: &Common, runs: &[PathBuf], strict: bool) -> Result<u8> {
    let cfg = load_config(c)?;
    let run = RunDir::create("report", cfg.eval.seed, c.out.as_deref(), &cfg)?;
    let mut summaries = Vec::new();
    for p in runs {
        let file = if p.is_dir() { p.join("eval.json") } else { p.clone() };
        match fs::read(&file) {
            Ok(bytes) => summaries.push(
                serde_json::from_slice::<RunSummary>(&bytes)
                    .map_err(|e| Error::config(format!("{}: {e}", file.display())))?,
            ),
            Err(_) => run.log(&format!("missing run {}", file.display())),
        }
    }
    if summaries.is_empty() {
        return Err(Error::config("no readable eval.json among the given runs"));
    }
    let r = report(&summaries)?;
    write_atomic(&run.path("report.json"), (r.to_json() + "\n").as_bytes())?;
    write_atomic(&run.path("report.txt"), r.to_text().as_bytes())?;
    print!("{}", r.to_text());
    if strict && (!r.absent.is_empty() || summaries.len() < runs.len()) {
        eprintln!("error: absent runs: {}", r.absent.join(", "));
        return Ok(1);
    }
    Ok(0)
}
