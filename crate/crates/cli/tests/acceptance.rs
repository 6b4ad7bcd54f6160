//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p dmp-cli --test acceptance -- <filter>...` runs only the
//! criteria whose key contains one of the filters. Artifacts of the long
//! experiment land in `$CARGO_TARGET_TMPDIR/acceptance`.
//! Set `ACCEPTANCE_STRICT=1` to exit nonzero when a criterion fails.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use dmp_core::backbone::{self, BackboneConfig};
use dmp_core::datagen::{generate, DatasetSpec};
use dmp_core::diffusion::{denoising_loss, make_schedule, Denoiser, SamplerConfig, ScheduleKind};
use dmp_core::dmp::{
    attention_gate, balancing_losses, count_extra_params, Coverage, DmpConfig, GateTrace, GatingType,
    GatingVariant, LayerGate, Patch, Position, Selection, TraceLayer,
};
use dmp_core::dmp::{ConditionMode, LoadSign};
use dmp_core::eval::{activation_matrix, generate_samples, report, toy_fid, ActivationMatrix, FidOptions, RunSummary};
use dmp_core::numcore::{grad_check, Bindings, Tape, Var};
use dmp_core::trainer::{freeze_pretrained, verify_frozen, ScheduleSpec, Trainer, CONVERGENCE_TOL, CONVERGENCE_WINDOW};
use dmp_core::{Checkpoint, Dataset, Error, Model, Phase, Rng, Tensor, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn artifacts() -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&p).unwrap();
    p
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dmp"))
}

fn toy_schedule() -> ScheduleSpec {
    ScheduleSpec {
        kind: ScheduleKind::Linear,
        steps: 1000,
    }
}

fn toy_data(n: usize) -> Dataset {
    generate(&DatasetSpec {
        num_samples: n,
        ..DatasetSpec::toy()
    })
    .unwrap()
}

fn train_cfg(iterations: u64, lr: f32, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 32,
        lr,
        seed,
        ..TrainConfig::default()
    }
}

/// Short pretraining run, frozen for patching.
fn quick_base(data: &Dataset, iters: u64) -> Checkpoint {
    let mut t = Trainer::pretrain(BackboneConfig::toy(), toy_schedule(), train_cfg(iters, 1e-3, 0), data).unwrap();
    t.run(iters, |_| {}).unwrap();
    freeze_pretrained(&t.checkpoint().unwrap()).unwrap()
}

// ---------------------------------------------------------------------------

fn param_budget() -> Outcome {
    let out = bin().arg("count-params").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let published = [("dit-b-2", 1.96), ("dit-l-2", 1.43), ("dit-xl-2", 1.26)];
    let mut detail = String::new();
    let mut pass = out.status.success();
    for (name, want) in published {
        let line = text.lines().find(|l| l.starts_with(name));
        let shown = line
            .and_then(|l| l.split_whitespace().find(|w| w.starts_with('+')))
            .and_then(|w| w.trim_start_matches('+').trim_end_matches('%').parse::<f64>().ok());
        let bb = BackboneConfig::preset(name).unwrap();
        let exact = count_extra_params(&bb, &Patch::Dmp(DmpConfig::for_backbone(&bb))).pct_of_backbone;
        let ok = shown.is_some_and(|s| (s - want).abs() <= 0.05) && (exact - want).abs() <= 0.05;
        pass &= ok;
        let _ = write!(detail, "{name} +{exact:.4}% (printed {shown:?}, paper +{want}%); ");
    }
    outcome(pass, detail)
}

/// Every combination of the DmpConfig enums on a toy conditional backbone.
fn all_variants() -> Vec<DmpConfig> {
    let mut v = Vec::new();
    for gv in [GatingVariant::Linear, GatingVariant::Attention] {
        for gt in [GatingType::Soft, GatingType::Hard] {
            for sel in [Selection::Uniform, Selection::Distinct] {
                for pos in [Position::Add, Position::Prepend] {
                    for cov in [Coverage::First, Coverage::Half, Coverage::All] {
                        for cm in [ConditionMode::TOnly, ConditionMode::TPlusC] {
                            for ls in [LoadSign::Negative, LoadSign::Positive] {
                                v.push(DmpConfig {
                                    gating_variant: gv,
                                    gating_type: gt,
                                    selection: sel,
                                    position: pos,
                                    coverage: cov,
                                    condition_mode: cm,
                                    load_sign: ls,
                                    ..DmpConfig::default()
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    v
}

fn zero_init_identity() -> Outcome {
    let bb = BackboneConfig {
        num_classes: 3,
        ..BackboneConfig::toy()
    };
    let mut rng = Rng::new(100);
    let mut base = Model::init(bb.clone(), &mut rng).unwrap();
    backbone::freeze(&mut base.params);
    let n = 100;
    let x = Tensor::new(vec![n, 8, 8, 1], rng.normal_vec(n * 64)).unwrap();
    let t: Vec<usize> = (0..n).map(|_| rng.below(1000) as usize).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.below(4) as usize).collect();
    let reference = base.predict_full(&x, &t, Some(&labels)).unwrap();
    let (mut passed, mut failed) = (0, Vec::new());
    let mut worst_add = 0.0f32;
    for cfg in all_variants() {
        let label = cfg.label();
        let m = base.with_patch(Patch::Dmp(cfg.clone()), &mut rng).unwrap();
        let diff = m.predict_full(&x, &t, Some(&labels)).unwrap().max_abs_diff(&reference).unwrap();
        if cfg.position == Position::Add {
            worst_add = worst_add.max(diff);
        }
        if diff < 1e-6 {
            passed += 1;
        } else {
            failed.push((label, diff, cfg.position));
        }
    }
    let total = passed + failed.len();
    let only_prepend = failed.iter().all(|(_, _, p)| *p == Position::Prepend);
    let worst = failed.iter().map(|f| f.1).fold(0.0f32, f32::max);
    outcome(
        failed.is_empty(),
        format!(
            "{passed}/{total} variants identical on {n} inputs; add injection max diff {worst_add:.1e}; \
             {} failing variants{}, max diff {worst:.3e}",
            failed.len(),
            if only_prepend && !failed.is_empty() { " (all prepend: zero prompt tokens still act as keys/values after adaLN shift)" } else { "" },
        ),
    )
}

fn patched_for_gradcheck() -> Model {
    let bb = BackboneConfig::toy();
    let mut rng = Rng::new(21);
    let mut base = Model::init(bb.clone(), &mut rng).unwrap();
    backbone::freeze(&mut base.params);
    let mut m = base.with_patch(Patch::Dmp(DmpConfig::for_backbone(&bb)), &mut rng).unwrap();
    for (name, p) in m.params.iter_mut() {
        let std = match name {
            n if n.starts_with("dmp.prompts") => 0.5,
            n if n.starts_with("dmp.gate") => 0.3,
            _ => continue,
        };
        let n = p.numel();
        let v: Vec<f32> = rng.normal_vec(n).into_iter().map(|x| x * std).collect();
        p.data_mut().copy_from_slice(&v);
    }
    m
}

fn gradient_correctness() -> Outcome {
    let model = patched_for_gradcheck();
    let mut rng = Rng::new(5);
    let x0 = Tensor::new(vec![2, 8, 8, 1], rng.normal_vec(128)).unwrap();
    let eps = Tensor::new(vec![2, 8, 8, 1], rng.normal_vec(128)).unwrap();
    let t = vec![37usize, 812];
    let sched = make_schedule(ScheduleKind::Linear, 1000).unwrap();
    let Patch::Dmp(cfg) = model.patch.clone() else { unreachable!() };
    let loss = |tape: &mut Tape<f64>, b: &Bindings| -> dmp_core::Result<Var> {
        denoising_loss(tape, |tape, xt, tt| Ok(model.forward(tape, b, xt, tt, None)?.0.eps), &x0, &t, &eps, &sched)
    };
    let balance = |which: usize| {
        let (x0, t, cfg, model) = (&x0, &t, &cfg, &model);
        move |tape: &mut Tape<f64>, b: &Bindings| -> dmp_core::Result<Var> {
            let (_, gates) = model.forward(tape, b, x0, t, None)?;
            let (imp, load) = balancing_losses(tape, &gates, cfg)?;
            Ok(if which == 0 { imp } else { load })
        }
    };
    let mut detail = String::new();
    let mut pass = true;
    for (name, r) in [
        ("denoising loss", grad_check(loss, &mut model.params.clone(), 1e-3)),
        ("L_importance", grad_check(balance(0), &mut model.params.clone(), 1e-3)),
        ("L_load", grad_check(balance(1), &mut model.params.clone(), 1e-3)),
    ] {
        match r {
            Ok(r) => {
                pass &= r.max_rel_error < 1e-3;
                let _ = write!(detail, "{name}: max rel err {:.2e} over {} elements; ", r.max_rel_error, r.elements_checked);
            }
            Err(e) => {
                pass = false;
                let _ = write!(detail, "{name}: {e}; ");
            }
        }
    }
    outcome(pass, detail)
}

fn one_layer_trace(weights: Vec<f32>, logits: Vec<f32>, b: usize, p: usize) -> GateTrace {
    GateTrace {
        timesteps: vec![0; b],
        layers: vec![TraceLayer {
            block: 0,
            logits: Tensor::new(vec![b, p], logits).unwrap(),
            weights: Tensor::new(vec![b, p], weights).unwrap(),
        }],
    }
}

fn balancing_closed_forms() -> Outcome {
    let cfg = DmpConfig::default();
    let p = 8;
    let (uniform, _) = one_layer_trace(vec![1.0 / p as f32; 3 * p], vec![0.0; 3 * p], 3, p)
        .balancing_losses(&cfg)
        .unwrap();
    // batch of two one-hot rows on the same prompt: batch means [0, 1]
    let (two, _) = one_layer_trace(vec![0.0, 1.0, 0.0, 1.0], vec![0.0; 4], 2, 2).balancing_losses(&cfg).unwrap();
    let oracle = 0.25f64 / (0.25 + 1e-5);
    let (_, load) = one_layer_trace(vec![0.5; 8], vec![25.0; 8], 4, 2).balancing_losses(&cfg).unwrap();
    // the same closed forms through the tape used in training
    let mut tape = Tape::<f64>::new();
    let w = tape.input(&Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
    let g = LayerGate {
        block: 0,
        logits: w,
        soft: w,
        applied: w,
    };
    let (imp, _) = balancing_losses(&mut tape, &[g], &cfg).unwrap();
    let tape_two = tape.value(imp)[0];
    let pass = uniform.abs() < 1e-6 && (two as f64 - oracle).abs() < 1e-5 && (tape_two - oracle).abs() < 1e-9 && load < 1e-4;
    outcome(
        pass,
        format!("uniform importance {uniform:.2e}; two-prompt [0,1] {two:.6} (oracle {oracle:.6}, f64 tape {tape_two:.8}); load with logits 25: {load:.2e}"),
    )
}

fn freeze_immutability() -> Outcome {
    let data = toy_data(2048);
    let base = quick_base(&data, 200);
    let dmp = DmpConfig::for_backbone(&base.meta.backbone);
    let mut t = Trainer::further(&base, Phase::DmpPatch, Some(dmp.clone()), train_cfg(1000, 1e-4, 11), &data).unwrap();
    t.run(1000, |_| {}).unwrap();
    let expected = base.meta.frozen_digest.unwrap();
    let saved = Checkpoint::from_bytes(&t.checkpoint().unwrap().to_bytes().unwrap()).unwrap();
    let digest = verify_frozen(&saved);
    let budget = count_extra_params(&base.meta.backbone, &Patch::Dmp(dmp)).total;
    let state = t.optimizer().state_numel();
    let pass = t.model.backbone_digest() == expected && digest.as_ref().is_ok_and(|d| *d == expected) && state == budget;
    outcome(
        pass,
        format!(
            "base digest {expected:016x}, after 1000 iterations {:016x} (reloaded: {}); optimizer state {state} scalars, count_extra_params total {budget}",
            t.model.backbone_digest(),
            digest.as_ref().map(|d| format!("{d:016x}")).unwrap_or_else(|e| e.to_string())
        ),
    )
}

// ---------------------------------------------------------------------------
// Long experiment shared by the gate stage-specificity and Table-2 criteria.

const SEEDS: [u64; 3] = [1, 2, 3];
const FURTHER_ITERS: u64 = 10_000;
const PRETRAIN_MIN: u64 = 10_000;
const PRETRAIN_MAX: u64 = 40_000;
const UNIFORM_ITERS: u64 = 1_000;
const EVAL_IMAGES: usize = 2048;
const EVAL_SEED: u64 = 2024;

struct Experiment {
    base: Checkpoint,
    pretrain_iters: u64,
    converged: bool,
    base_fid: f64,
    /// (method, seed, toy-FID, trainable params)
    runs: Vec<(&'static str, u64, f64, usize)>,
    distinct: Vec<(u64, ActivationMatrix)>,
    uniform: Vec<(u64, ActivationMatrix)>,
}

fn log(msg: &str) {
    eprintln!("  [experiment] {msg}");
}

fn run_experiment() -> Experiment {
    let dir = artifacts();
    let start = Instant::now();
    let data = toy_data(8192);
    let real = generate(&DatasetSpec {
        seed: 0x5eed_0f_4e1d,
        num_samples: EVAL_IMAGES,
        ..DatasetSpec::toy()
    })
    .unwrap();
    let sampler = SamplerConfig::default();
    let sched = make_schedule(ScheduleKind::Linear, 1000).unwrap();
    let fid_of = |m: &dyn Denoiser| {
        let gen = generate_samples(m, &sched, &sampler, EVAL_IMAGES, 256, EVAL_SEED).unwrap();
        toy_fid(&real.images, &gen, FidOptions::default()).unwrap().value
    };

    let mut pre = Trainer::pretrain(BackboneConfig::toy(), toy_schedule(), train_cfg(PRETRAIN_MAX, 1e-3, 0), &data).unwrap();
    let mut converged = false;
    while pre.iteration() < PRETRAIN_MAX {
        pre.run(CONVERGENCE_WINDOW as u64, |_| {}).unwrap();
        let m = pre.curve.window_means(CONVERGENCE_WINDOW);
        if let [.., a, b] = m[..] {
            if pre.iteration() >= PRETRAIN_MIN && (a - b) / a < CONVERGENCE_TOL {
                converged = true;
                break;
            }
        }
    }
    std::fs::write(dir.join("pretrain_loss.csv"), pre.curve.to_csv()).unwrap();
    let pretrain_iters = pre.iteration();
    log(&format!("pretrained {pretrain_iters} iterations (converged: {converged}) in {:.0}s", start.elapsed().as_secs_f64()));
    let base = freeze_pretrained(&pre.checkpoint().unwrap()).unwrap();
    base.save(&dir.join("base.dmpk")).unwrap();
    let base_model = dmp_core::trainer::model_from_checkpoint(&base);
    let base_fid = fid_of(&base_model);
    log(&format!("baseline toy-FID {base_fid:.5}"));

    let mut runs = Vec::new();
    let mut distinct = Vec::new();
    let mut uniform = Vec::new();
    for &seed in &SEEDS {
        for (method, phase) in [("dmp", Phase::DmpPatch), ("prompt_tune", Phase::PromptTune), ("finetune", Phase::Finetune)] {
            let mut t = Trainer::further(&base, phase, None, train_cfg(FURTHER_ITERS, 1e-4, seed), &data).unwrap();
            t.run(FURTHER_ITERS, |_| {}).unwrap();
            std::fs::write(dir.join(format!("{method}_seed{seed}_loss.csv")), t.curve.to_csv()).unwrap();
            let fid = fid_of(&t.model);
            let params = match phase {
                Phase::Finetune => base.meta.backbone.param_count(),
                _ => t.model.params.trainable_numel(),
            };
            log(&format!("{method} seed {seed}: toy-FID {fid:.5} ({:.0}s elapsed)", start.elapsed().as_secs_f64()));
            if phase == Phase::DmpPatch {
                let a = activation_matrix(&t.model, &sched, &sampler, 64, 10, EVAL_SEED).unwrap();
                std::fs::write(dir.join(format!("activations_distinct_seed{seed}.csv")), a.to_csv()).unwrap();
                for (i, b) in a.blocks.iter().enumerate() {
                    std::fs::write(dir.join(format!("activations_distinct_seed{seed}_block{b:02}.pgm")), a.to_pgm(i)).unwrap();
                }
                distinct.push((seed, a));
            }
            runs.push((method, seed, fid, params));
        }
        let cfg = DmpConfig {
            selection: Selection::Uniform,
            ..DmpConfig::for_backbone(&base.meta.backbone)
        };
        let mut t = Trainer::further(&base, Phase::DmpPatch, Some(cfg), train_cfg(UNIFORM_ITERS, 1e-4, seed), &data).unwrap();
        t.run(UNIFORM_ITERS, |_| {}).unwrap();
        let a = activation_matrix(&t.model, &sched, &sampler, 64, 10, EVAL_SEED).unwrap();
        std::fs::write(dir.join(format!("activations_uniform_seed{seed}.csv")), a.to_csv()).unwrap();
        uniform.push((seed, a));
    }
    log(&format!("experiment finished in {:.0}s", start.elapsed().as_secs_f64()));
    Experiment {
        base,
        pretrain_iters,
        converged,
        base_fid,
        runs,
        distinct,
        uniform,
    }
}

fn gate_stage_specificity(e: &Experiment) -> Outcome {
    let mut detail = String::new();
    let mut seeds_ok = 0;
    for (seed, a) in &e.distinct {
        let l1: Vec<f32> = (0..a.blocks.len()).map(|b| a.extreme_l1(b)).collect();
        let mean = l1.iter().sum::<f32>() / l1.len() as f32;
        if mean > 0.05 {
            seeds_ok += 1;
        }
        let _ = write!(
            detail,
            "seed {seed}: t={} vs t={} L1 per block {:?} (mean {mean:.3}); ",
            a.timesteps[0],
            a.timesteps[a.timesteps.len() - 1],
            l1.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
    let uniform_ok = e
        .uniform
        .iter()
        .all(|(_, a)| a.weights.iter().all(|rows| rows.iter().all(|r| r == &rows[0])));
    let _ = write!(detail, "uniform rows identical across depth in all seeds: {uniform_ok}");
    outcome(seeds_ok >= 2 && uniform_ok, format!("{seeds_ok}/3 seeds above 0.05; {detail}"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn table2_analogue(e: &Experiment) -> Outcome {
    let fid = |m: &str, s: u64| e.runs.iter().find(|r| r.0 == m && r.1 == s).unwrap().2;
    let mut triples_ok = 0;
    let mut detail = format!(
        "pretrained {} iterations (criterion met: {}), baseline {:.4}; ",
        e.pretrain_iters, e.converged, e.base_fid
    );
    for &s in &SEEDS {
        let (d, p, f) = (fid("dmp", s), fid("prompt_tune", s), fid("finetune", s));
        let ok = d <= e.base_fid && d < p;
        triples_ok += ok as usize;
        let _ = write!(detail, "seed {s}: dmp {d:.4} prompt_tune {p:.4} finetune {f:.4} [{}]; ", if ok { "ordered" } else { "not ordered" });
    }
    let med = |m: &str| median(SEEDS.iter().map(|&s| fid(m, s)).collect());
    let _ = write!(detail, "medians dmp {:.4} prompt_tune {:.4} finetune {:.4}", med("dmp"), med("prompt_tune"), med("finetune"));

    let mut summaries = vec![RunSummary {
        method: "pretrained".into(),
        iters: e.pretrain_iters,
        toy_fid: e.base_fid,
        trainable_params: e.base.meta.backbone.param_count(),
    }];
    for m in ["finetune", "prompt_tune", "dmp"] {
        let params = e.runs.iter().find(|r| r.0 == m).unwrap().3;
        summaries.push(RunSummary {
            method: m.into(),
            iters: FURTHER_ITERS,
            toy_fid: med(m),
            trainable_params: params,
        });
    }
    let r = report(&summaries).unwrap();
    std::fs::write(artifacts().join("report.txt"), r.to_text()).unwrap();
    std::fs::write(artifacts().join("report.json"), r.to_json()).unwrap();
    eprint!("{}", r.to_text());
    outcome(triples_ok >= 2, format!("{triples_ok}/3 seed triples ordered; {detail}"))
}

// ---------------------------------------------------------------------------

fn ablation_matrix() -> Outcome {
    let data = toy_data(2048);
    let base = quick_base(&data, 300);
    let bb = base.meta.backbone.clone();
    let mut failures = Vec::new();
    let mut cells = 0;
    let mut rng = Rng::new(8);
    let probe_x = Tensor::new(vec![4, 8, 8, 1], rng.normal_vec(256)).unwrap();
    let probe_t = [5usize, 300, 650, 990];
    for gv in [GatingVariant::Linear, GatingVariant::Attention] {
        for gt in [GatingType::Soft, GatingType::Hard] {
            for sel in [Selection::Uniform, Selection::Distinct] {
                for pos in [Position::Add, Position::Prepend] {
                    for cov in [Coverage::First, Coverage::Half, Coverage::All] {
                        cells += 1;
                        let cfg = DmpConfig {
                            gating_variant: gv,
                            gating_type: gt,
                            selection: sel,
                            position: pos,
                            coverage: cov,
                            ..DmpConfig::for_backbone(&bb)
                        };
                        if let Err(msg) = ablation_cell(&base, &data, &cfg, &probe_x, &probe_t) {
                            failures.push(format!("{}: {msg}", cfg.label()));
                        }
                    }
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("{}/{cells} cells trained 200 iterations with invariants intact{}", cells - failures.len(), if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(" | ")) }),
    )
}

fn ablation_cell(base: &Checkpoint, data: &Dataset, cfg: &DmpConfig, x: &Tensor, t: &[usize]) -> Result<(), String> {
    let bb = &base.meta.backbone;
    let mut tr = Trainer::further(base, Phase::DmpPatch, Some(cfg.clone()), train_cfg(200, 1e-4, 3), data).map_err(|e| e.to_string())?;
    tr.run(200, |_| {}).map_err(|e| format!("training: {e}"))?;
    if tr.curve.rows.iter().any(|r| !r.loss.is_finite()) {
        return Err("non-finite loss".into());
    }
    if tr.model.backbone_digest() != base.meta.frozen_digest.unwrap() {
        return Err("backbone changed".into());
    }
    let expected_blocks = cfg.coverage.blocks(bb.depth);
    let prompt_blocks: Vec<usize> = (0..bb.depth)
        .filter(|&b| tr.model.params.contains(&dmp_core::dmp::prompt_name(b)))
        .collect();
    if prompt_blocks != expected_blocks {
        return Err(format!("prompts on blocks {prompt_blocks:?}, expected {expected_blocks:?}"));
    }
    let (eps, trace) = tr.model.predict_traced(x, t, None).map_err(|e| e.to_string())?;
    if eps.shape() != x.shape() || !eps.is_finite() {
        return Err(format!("output shape {:?} for input {:?}", eps.shape(), x.shape()));
    }
    let k = cfg.k(bb);
    let pool = cfg.pool_size(bb);
    match cfg.gating_variant {
        GatingVariant::Linear => {
            let blocks: Vec<usize> = trace.layers.iter().map(|l| l.block).collect();
            if blocks != expected_blocks {
                return Err(format!("gates on blocks {blocks:?}"));
            }
            for l in &trace.layers {
                for row in l.weights.data().chunks(pool) {
                    let ok = match cfg.gating_type {
                        GatingType::Hard => row.iter().filter(|&&w| w == 1.0).count() == k && row.iter().all(|&w| w == 0.0 || w == 1.0),
                        GatingType::Soft => (row.iter().sum::<f32>() - 1.0).abs() < 1e-5,
                    };
                    if !ok {
                        return Err(format!("gate row violates {:?} invariant", cfg.gating_type));
                    }
                }
            }
        }
        GatingVariant::Attention => {
            // count active prompt rows of the attention gate output
            let mut tape = Tape::<f32>::new();
            let binds = tr.model.params.bind(&mut tape);
            let emb = backbone::embed_timesteps(bb, &mut tape, &binds, t).map_err(|e| e.to_string())?;
            for &b in &expected_blocks {
                let prompts = binds.var(&dmp_core::dmp::prompt_name(b)).unwrap();
                let out = attention_gate(&mut tape, &binds, bb, cfg, prompts, emb, b).map_err(|e| e.to_string())?;
                let d = bb.hidden_dim;
                let v = tape.value(out);
                for sample in v.chunks(pool * d) {
                    let active = sample.chunks(d).filter(|r| r.iter().any(|&x| x != 0.0)).count();
                    let want = if cfg.gating_type == GatingType::Hard { k } else { pool };
                    if active != want {
                        return Err(format!("block {b}: {active} active prompt rows, expected {want}"));
                    }
                }
            }
        }
    }
    if cfg.position == Position::Prepend && pool > dmp_core::dmp::MAX_PREPEND_PROMPTS {
        return Err("prepend pool above limit".into());
    }
    Ok(())
}

const TOY_TOML: &str = r#"
[data]
image_size = 8
num_classes = 0
num_samples = 2048

[backbone]
image_size = 8
hidden_dim = 32
depth = 4
heads = 2
num_classes = 0
freq_dim = 64

[train]
batch_size = 32
lr = 0.001
log_every = 0
"#;

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.toml");
    std::fs::write(&cfg, TOY_TOML).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = bin()
            .args(["pretrain", "--config"])
            .arg(&cfg)
            .args(["--iters", "500", "--seed", "3", "--out"])
            .arg(&out)
            .env("DMP_RUN_ROOT", dir.path())
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let mut same = true;
    let mut detail = String::new();
    for f in ["state.dmpk", "base.dmpk", "loss.csv", "config.toml"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        same &= x == y;
        let _ = write!(detail, "{f} {} bytes {}; ", x.len(), if x == y { "identical" } else { "DIFFER" });
    }
    outcome(same, detail)
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(256);
    let mut t = Trainer::pretrain(BackboneConfig::toy(), toy_schedule(), train_cfg(5, 1e-3, 0), &data).unwrap();
    t.run(5, |_| {}).unwrap();
    let first = dir.path().join("a.dmpk");
    let second = dir.path().join("b.dmpk");
    t.checkpoint().unwrap().save(&first).unwrap();
    Checkpoint::load(&first).unwrap().save(&second).unwrap();
    let identical = std::fs::read(&first).unwrap() == std::fs::read(&second).unwrap();

    let bytes = std::fs::read(&first).unwrap();
    let mut flipped = bytes.clone();
    let at = bytes.len() / 2;
    flipped[at] ^= 0x10;
    let truncated = bytes[..bytes.len() - 7].to_vec();
    let cfg = dir.path().join("toy.toml");
    std::fs::write(&cfg, TOY_TOML).unwrap();
    let mut detail = format!("save->load->save identical: {identical}; ");
    let mut pass = identical;
    for (name, content) in [("flipped", flipped), ("truncated", truncated)] {
        let p = dir.path().join(format!("{name}.dmpk"));
        std::fs::write(&p, content).unwrap();
        for cmd in ["sample", "patch"] {
            let out = bin()
                .arg(cmd)
                .arg("--config")
                .arg(&cfg)
                .arg("--ckpt")
                .arg(&p)
                .arg("--out")
                .arg(dir.path().join(format!("{name}-{cmd}")))
                .output()
                .unwrap();
            let code = out.status.code();
            let err = String::from_utf8_lossy(&out.stderr);
            let msg = err.lines().last().unwrap_or("").to_string();
            pass &= code == Some(3) && msg.contains("integrity");
            let _ = write!(detail, "{cmd} on {name}: exit {code:?} ({msg}); ");
        }
    }
    match Checkpoint::from_bytes(&bytes[..bytes.len() / 3]) {
        Err(Error::Integrity { entry, .. }) => {
            let _ = write!(detail, "truncated at 1/3 names entry `{entry}`");
        }
        other => {
            pass = false;
            let _ = write!(detail, "unexpected result for truncated bytes: {:?}", other.err());
        }
    }
    outcome(pass, detail)
}

// ---------------------------------------------------------------------------

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |key: &str| filters.is_empty() || filters.iter().any(|f| key.contains(f.as_str()));

    type Quick = fn() -> Outcome;
    let quick: [(&str, &str, Quick); 8] = [
        ("param-budget", "Parameter budget reproduces Table 1", param_budget),
        ("zero-init", "Zero-init identity for all DmpConfig variants", zero_init_identity),
        ("gradients", "Gradient correctness of losses into prompts and gate", gradient_correctness),
        ("balancing", "Balancing-loss closed forms", balancing_closed_forms),
        ("freeze", "Freeze immutability after a 1k-iteration patch run", freeze_immutability),
        ("ablation", "Ablation smoke matrix", ablation_matrix),
        ("determinism", "Determinism of 500-iteration pretraining", determinism),
        ("checkpoint", "Checkpoint round trip and corruption exit code", checkpoint_round_trip),
    ];
    let mut results: Vec<(String, Outcome)> = Vec::new();
    let mut report = |key: &str, name: &str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!(
            "{} [{key}] {name} ({:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        results.push((key.to_string(), o));
    };
    for (key, name, f) in quick {
        if selected(key) {
            report(key, name, &f);
        }
    }
    if selected("gate-stage") || selected("table2") {
        let exp = std::cell::OnceCell::new();
        let get = || exp.get_or_init(run_experiment);
        if selected("gate-stage") {
            report("gate-stage", "Gate stage-specificity after 10k-iteration patch runs", &|| gate_stage_specificity(get()));
        }
        if selected("table2") {
            report("table2", "Directional Table-2 analogue on toy-FID", &|| table2_analogue(get()));
        }
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.1.pass).map(|r| r.0.as_str()).collect();
    println!("acceptance: {}/{} criteria passed{}", results.len() - failed.len(), results.len(), if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) });
    // FAIL lines are the verdict; a nonzero exit is opt-in so the rest of
    // the workspace suite still runs
    if !failed.is_empty() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
