//! Pixel-space Fréchet distance, gate activation matrices and comparison reports.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::diffusion::{respace, sample, timestep_subsequence, Denoiser, NoiseSchedule, SamplerConfig};
use crate::dmp::{GatingType, GatingVariant, Patch};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numcore::{Rng, Tensor};

pub const MIN_FID_IMAGES: usize = 256;
pub const FID_REGULARIZATION: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidOptions {
    /// 2x2 average pooling before flattening.
    pub pool: bool,
    pub min_images: usize,
}

impl Default for FidOptions {
    fn default() -> Self {
        FidOptions {
            pool: false,
            min_images: MIN_FID_IMAGES,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyFid {
    pub value: f64,
    pub mean_term: f64,
    pub trace_term: f64,
    /// Whether the diagonal regularization had to be applied.
    pub regularized: bool,
    pub features: usize,
}

/// Flattened (optionally pooled) pixel features, one row per image.
pub fn features(images: &Tensor, pool: bool) -> Result<DMatrix<f64>> {
    if images.shape().len() != 4 {
        return Err(Error::shape("features: images", images.shape(), &[0, 0, 0, 0]));
    }
    let [n, h, w, c] = [images.shape()[0], images.shape()[1], images.shape()[2], images.shape()[3]];
    let d = images.data();
    if !pool {
        let per = h * w * c;
        return Ok(DMatrix::from_fn(n, per, |i, j| d[i * per + j] as f64));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!("cannot 2x pool a {h}x{w} image")));
    }
    let (ph, pw) = (h / 2, w / 2);
    Ok(DMatrix::from_fn(n, ph * pw * c, |i, j| {
        let (y, x, ch) = (j / (pw * c), (j / c) % pw, j % c);
        let at = |yy: usize, xx: usize| d[((i * h + yy) * w + xx) * c + ch] as f64;
        0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1))
    }))
}

/// Sample mean and unbiased covariance.
pub fn gaussian_stats(f: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = f.nrows();
    let mean = f.row_mean().transpose();
    let mut centered = f.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    (mean, cov)
}

fn symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetric(m));
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetric(m)).eigenvalues.min()
}

/// Fréchet distance between two Gaussians.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> ToyFid {
    let d = mu1.len();
    let singular = |s: &DMatrix<f64>| min_eigenvalue(s) <= 1e-12 * s.trace().abs().max(1.0);
    let regularized = singular(s1) || singular(s2);
    let (s1, s2) = if regularized {
        let eye = DMatrix::<f64>::identity(d, d) * FID_REGULARIZATION;
        (s1 + &eye, s2 + &eye)
    } else {
        (s1.clone(), s2.clone())
    };
    let diff = mu1 - mu2;
    let mean_term = diff.dot(&diff);
    let r1 = sqrt_psd(&s1);
    let inner = symmetric(&(&r1 * &s2 * &r1));
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0).sqrt())
        .sum();
    let trace_term = s1.trace() + s2.trace() - 2.0 * cross;
    ToyFid {
        value: (mean_term + trace_term).max(0.0),
        mean_term,
        trace_term,
        regularized,
        features: d,
    }
}

/// toy-FID between two image sets `[N, H, W, C]`.
pub fn toy_fid(real: &Tensor, generated: &Tensor, opts: FidOptions) -> Result<ToyFid> {
    if real.shape()[1..] != generated.shape()[1..] {
        return Err(Error::shape("toy_fid", generated.shape(), real.shape()));
    }
    for (side, t) in [("real", real), ("generated", generated)] {
        if t.shape()[0] < opts.min_images {
            return Err(Error::config(format!(
                "toy_fid needs at least {} {side} images, got {}",
                opts.min_images,
                t.shape()[0]
            )));
        }
    }
    let (m1, s1) = gaussian_stats(&features(real, opts.pool)?);
    let (m2, s2) = gaussian_stats(&features(generated, opts.pool)?);
    Ok(frechet_distance(&m1, &s1, &m2, &s2))
}

/// Draws `n` samples in chunks of `batch`. Chunk `i` uses its own RNG
/// substream, so two models evaluated with the same seed see the same noise.
pub fn generate_samples(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    n: usize,
    batch: usize,
    seed: u64,
) -> Result<Tensor> {
    let batch = batch.max(1);
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        let labels: Option<Vec<usize>> = model
            .num_classes()
            .map(|k| (start..start + len).map(|i| i % k).collect());
        let mut rng = Rng::substream(seed, &format!("eval.sample.{}", start / batch));
        chunks.push(sample(model, sampler, sched, len, labels.as_deref(), &mut rng)?);
        start += len;
    }
    let refs: Vec<&Tensor> = chunks.iter().collect();
    Tensor::concat_leading(&refs)
}

/// Batch-mean gate weights: `weights[t][block][prompt]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMatrix {
    /// Probed timesteps in sampling order (noisiest first).
    pub timesteps: Vec<usize>,
    pub blocks: Vec<usize>,
    pub n_prompts: usize,
    pub weights: Vec<Vec<Vec<f32>>>,
    pub notice: Option<String>,
}

impl ActivationMatrix {
    pub fn row(&self, t_index: usize, block_index: usize) -> &[f32] {
        &self.weights[t_index][block_index]
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_sum_error(&self) -> f32 {
        self.weights
            .iter()
            .flatten()
            .map(|r| (r.iter().sum::<f32>() - 1.0).abs())
            .fold(0.0, f32::max)
    }

    /// L1 distance between the rows at the noisiest and the cleanest probe.
    pub fn extreme_l1(&self, block_index: usize) -> f32 {
        let last = self.timesteps.len() - 1;
        l1(self.row(0, block_index), self.row(last, block_index))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestep,block,prompt,weight\n");
        for (ti, &t) in self.timesteps.iter().enumerate() {
            for (bi, &b) in self.blocks.iter().enumerate() {
                for (p, w) in self.weights[ti][bi].iter().enumerate() {
                    let _ = writeln!(out, "{t},{b},{p},{w}");
                }
            }
        }
        out
    }

    /// Binary PGM heatmap for one block: rows are timesteps, columns prompts,
    /// scaled so the strongest weight is 255.
    pub fn to_pgm(&self, block_index: usize) -> Vec<u8> {
        let rows: Vec<&[f32]> = (0..self.timesteps.len()).map(|t| self.row(t, block_index)).collect();
        let max = rows.iter().flat_map(|r| r.iter()).copied().fold(0.0f32, f32::max);
        let mut out = format!("P5\n{} {}\n255\n", self.n_prompts, rows.len()).into_bytes();
        for r in rows {
            for &w in r {
                let v = if max > 0.0 { (255.0 * w / max).round() } else { 0.0 };
                out.push(v.clamp(0.0, 255.0) as u8);
            }
        }
        out
    }
}

pub fn l1(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

struct Recorder<'a> {
    model: &'a Model,
    probes: BTreeSet<usize>,
    rows: RefCell<Vec<(usize, Vec<Vec<f32>>)>>,
}

impl Denoiser for Recorder<'_> {
    fn image_shape(&self) -> [usize; 3] {
        self.model.image_shape()
    }

    fn num_classes(&self) -> Option<usize> {
        Denoiser::num_classes(self.model)
    }

    fn predict_eps(&self, x_t: &Tensor, t: &[usize], labels: Option<&[usize]>) -> Result<Tensor> {
        if !t.first().is_some_and(|t| self.probes.contains(t)) {
            return self.model.predict_eps(x_t, t, labels);
        }
        let (eps, trace) = self.model.predict_traced(x_t, t, labels)?;
        self.rows.borrow_mut().push((t[0], trace.importance()));
        Ok(eps)
    }
}

pub const DEFAULT_PROBES: usize = 10;

/// Runs the sampler on `n_probe` samples and records batch-mean gate weights
/// at `n_times` evenly spaced steps of the sampling subsequence.
pub fn activation_matrix(
    model: &Model,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    n_probe: usize,
    n_times: usize,
    seed: u64,
) -> Result<ActivationMatrix> {
    let Patch::Dmp(cfg) = &model.patch else {
        return Err(Error::config("activation matrix needs a DMP-patched model"));
    };
    if cfg.gating_variant != GatingVariant::Linear {
        return Err(Error::config("activation matrix needs the linear gate (the attention gate has no prompt weights)"));
    }
    sampler.validate(sched)?;
    let steps = respace(sched, sampler.num_sampling_steps, sampler.variance_mode).timesteps;
    let picks = timestep_subsequence(steps.len(), n_times.min(steps.len()));
    let recorder = Recorder {
        model,
        probes: picks.iter().map(|&i| steps[i]).collect(),
        rows: RefCell::new(Vec::new()),
    };
    let labels: Option<Vec<usize>> = Denoiser::num_classes(model).map(|k| (0..n_probe).map(|i| i % k).collect());
    sample(&recorder, sampler, sched, n_probe, labels.as_deref(), &mut Rng::substream(seed, "eval.activations"))?;
    let rows = recorder.rows.into_inner();
    let notice = (cfg.gating_type == GatingType::Hard)
        .then(|| "hard gating: entries are the {0,1} top-k mask, not soft weights".to_string());
    Ok(ActivationMatrix {
        timesteps: rows.iter().map(|(t, _)| *t).collect(),
        blocks: model.patch.coverage(&model.backbone),
        n_prompts: cfg.pool_size(&model.backbone),
        weights: rows.into_iter().map(|(_, w)| w).collect(),
        notice,
    })
}

pub const METHODS: [&str; 4] = ["pretrained", "finetune", "prompt_tune", "dmp"];

/// Evaluated run as it enters a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub method: String,
    pub iters: u64,
    pub toy_fid: f64,
    pub trainable_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub iters: u64,
    pub toy_fid: f64,
    pub delta: f64,
    pub trainable_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub absent: Vec<String>,
}

/// Comparison table with deltas against the `pretrained` run, or against the
/// first run when no baseline is present.
pub fn report(runs: &[RunSummary]) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::config("report needs at least one run"));
    }
    let base = runs
        .iter()
        .find(|r| r.method == "pretrained")
        .unwrap_or(&runs[0])
        .toy_fid;
    let mut rows: Vec<ReportRow> = runs
        .iter()
        .map(|r| ReportRow {
            method: r.method.clone(),
            iters: r.iters,
            toy_fid: r.toy_fid,
            delta: r.toy_fid - base,
            trainable_params: r.trainable_params,
        })
        .collect();
    let rank = |m: &str| METHODS.iter().position(|&x| x == m).unwrap_or(METHODS.len());
    rows.sort_by_key(|r| rank(&r.method));
    let absent = METHODS
        .iter()
        .filter(|m| !runs.iter().any(|r| r.method == **m))
        .map(|m| m.to_string())
        .collect();
    Ok(Report { rows, absent })
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<12} {:>8} {:>12} {:>10} {:>16}\n", "method", "iters", "toy_fid", "delta", "trainable");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>12.4} {:>+10.4} {:>16}",
                r.method, r.iters, r.toy_fid, r.delta, r.trainable_params
            );
        }
        for m in &self.absent {
            let _ = writeln!(out, "{m:<12} (absent)");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rows).expect("report rows serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_set(n: usize, seed: u64) -> Tensor {
        let mut rng = Rng::substream(seed, "test");
        Tensor::new(vec![n, 4, 4, 1], rng.normal_vec(n * 16)).unwrap()
    }

    const SMALL: FidOptions = FidOptions {
        pool: false,
        min_images: 1,
    };

    #[test]
    fn identical_sets() {
        let x = random_set(300, 1);
        assert!(toy_fid(&x, &x, SMALL).unwrap().value < 1e-4);
    }

    #[test]
    fn mean_shift_closed_form() {
        let x = random_set(300, 2);
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v += 0.3);
        let f = toy_fid(&x, &y, SMALL).unwrap();
        assert!((f.value - 0.09 * 16.0).abs() < 1e-3, "{f:?}");
    }

    #[test]
    fn symmetric_in_arguments() {
        let (a, b) = (random_set(300, 3), random_set(280, 4));
        let ab = toy_fid(&a, &b, SMALL).unwrap().value;
        let ba = toy_fid(&b, &a, SMALL).unwrap().value;
        assert!((ab - ba).abs() < 1e-6);
    }

    #[test]
    fn degenerate_covariance_reported() {
        let mut x = random_set(300, 5);
        for i in 0..300 {
            x.data_mut()[i * 16] = -1.0;
        }
        let f = toy_fid(&x, &x, SMALL).unwrap();
        assert!(f.regularized);
        assert!(f.value < 1e-4);
    }

    #[test]
    fn rejects_small_sets() {
        let x = random_set(10, 6);
        assert!(toy_fid(&x, &x, FidOptions::default()).is_err());
    }

    #[test]
    fn pooling_averages() {
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = features(&x, true).unwrap();
        assert_eq!((f.nrows(), f.ncols()), (1, 1));
        assert_eq!(f[(0, 0)], 2.5);
    }

    #[test]
    fn report_deltas_and_absent() {
        let run = |m: &str, fid| RunSummary {
            method: m.into(),
            iters: 10,
            toy_fid: fid,
            trainable_params: 1,
        };
        let r = report(&[run("dmp", 1.5), run("pretrained", 2.0)]).unwrap();
        assert_eq!(r.rows[0].method, "pretrained");
        assert_eq!(r.rows[1].delta, -0.5);
        assert_eq!(r.absent, vec!["finetune", "prompt_tune"]);
        let single = report(&[run("dmp", 1.5)]).unwrap();
        assert_eq!(single.rows[0].delta, 0.0);
        assert!(r.to_text().contains("(absent)"));
    }
}
