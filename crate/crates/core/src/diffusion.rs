//! DDPM forward process, noise-prediction objective and ancestral sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Real, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::config(format!("unknown schedule `{other}`"))),
        }
    }
}

/// Per-step noise tables. Index `i` is diffusion step `i + 1`.
///
/// Tables are kept in `f64`: sampling coefficients divide by `1 - alpha_bar`,
/// which loses most of its digits in `f32` near the start of the chain.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::config(format!("schedule needs at least 2 steps, got {steps}")));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let scale = 1000.0 / steps as f64;
            let (start, end) = (scale * 1e-4, scale * 0.02);
            (0..steps)
                .map(|i| (start + (end - start) * i as f64 / (steps - 1) as f64).min(MAX_BETA))
                .collect()
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let a = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                a.cos().powi(2)
            };
            (0..steps)
                .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(MAX_BETA))
                .collect()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::config(format!("timestep {t} outside schedule of {}", self.steps())))
    }
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps` for one scalar `alpha_bar`.
pub fn q_sample_with(x0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", x0.shape(), eps.shape()));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).max(0.0).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Noises a batch `[B, ...]` with one timestep per sample.
pub fn q_sample(x0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", x0.shape(), eps.shape()));
    }
    let batch = *x0.shape().first().unwrap_or(&0);
    if batch != t.len() {
        return Err(Error::shape("q_sample timesteps", x0.shape(), &[t.len()]));
    }
    let per = x0.numel() / batch.max(1);
    let mut out = Vec::with_capacity(x0.numel());
    for (b, &step) in t.iter().enumerate() {
        let ab = sched.alpha_bar(step)?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let xs = &x0.data()[b * per..(b + 1) * per];
        let es = &eps.data()[b * per..(b + 1) * per];
        out.extend(xs.iter().zip(es).map(|(&x, &e)| (sa * x as f64 + sb * e as f64) as f32));
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Uniform training timesteps, one per sample.
pub fn sample_timesteps(rng: &mut Rng, batch: usize, sched: &NoiseSchedule) -> Vec<usize> {
    (0..batch).map(|_| rng.below(sched.steps() as u64) as usize).collect()
}

/// Mean squared error between `eps` and the model's prediction at `x_t`.
///
/// `predict` receives the noised batch and its timesteps and must return a
/// node shaped like `x0`.
pub fn denoising_loss<T, F>(
    tape: &mut Tape<T>,
    predict: F,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Var>
where
    T: Real,
    F: FnOnce(&mut Tape<T>, &Tensor, &[usize]) -> Result<Var>,
{
    let x_t = q_sample(x0, t, eps, sched)?;
    let eps_hat = predict(tape, &x_t, t)?;
    let target = tape.input(eps);
    tape.mse(eps_hat, target)
}

/// A noise predictor usable by the sampler.
pub trait Denoiser {
    /// `[H, W, C]` of one sample.
    fn image_shape(&self) -> [usize; 3];

    /// Number of real classes, `None` for unconditional models. Label
    /// `num_classes` is the null label used for guidance.
    fn num_classes(&self) -> Option<usize>;

    /// Predicted noise, shaped like `x_t`.
    fn predict_eps(&self, x_t: &Tensor, t: &[usize], labels: Option<&[usize]>) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Posterior variance `beta_tilde`.
    FixedSmall,
    /// `beta`.
    FixedLarge,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_sampling_steps: usize,
    pub guidance_scale: f32,
    pub variance_mode: VarianceMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_sampling_steps: 250,
            guidance_scale: 1.5,
            variance_mode: VarianceMode::FixedSmall,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.num_sampling_steps == 0 || self.num_sampling_steps > sched.steps() {
            return Err(Error::config(format!(
                "num_sampling_steps {} outside [1, {}]",
                self.num_sampling_steps,
                sched.steps()
            )));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::config("guidance_scale must be >= 0"));
        }
        Ok(())
    }
}

/// Evenly spaced subsequence of `n` timesteps including the first and last step.
pub fn timestep_subsequence(steps: usize, n: usize) -> Vec<usize> {
    match n {
        0 => Vec::new(),
        1 => vec![steps - 1],
        _ if n >= steps => (0..steps).collect(),
        _ => {
            let stride = (steps - 1) as f64 / (n - 1) as f64;
            (0..n).map(|i| (i as f64 * stride).round() as usize).collect()
        }
    }
}

/// Posterior coefficients recomputed on a respaced subsequence.
#[derive(Clone, Debug)]
pub struct RespacedSteps {
    pub timesteps: Vec<usize>,
    pub alpha_bars: Vec<f64>,
    pub coef_x0: Vec<f64>,
    pub coef_xt: Vec<f64>,
    pub variance: Vec<f64>,
}

pub fn respace(sched: &NoiseSchedule, n: usize, mode: VarianceMode) -> RespacedSteps {
    let timesteps = timestep_subsequence(sched.steps(), n);
    let mut out = RespacedSteps {
        timesteps: timesteps.clone(),
        alpha_bars: Vec::with_capacity(n),
        coef_x0: Vec::with_capacity(n),
        coef_xt: Vec::with_capacity(n),
        variance: Vec::with_capacity(n),
    };
    let mut prev = 1.0;
    for &t in &timesteps {
        let ab = sched.alpha_bars()[t];
        let beta = 1.0 - ab / prev;
        let alpha = 1.0 - beta;
        out.alpha_bars.push(ab);
        out.coef_x0.push(prev.sqrt() * beta / (1.0 - ab));
        out.coef_xt.push(alpha.sqrt() * (1.0 - prev) / (1.0 - ab));
        out.variance.push(match mode {
            VarianceMode::FixedSmall => beta * (1.0 - prev) / (1.0 - ab),
            VarianceMode::FixedLarge => beta,
        });
        prev = ab;
    }
    out
}

/// Ancestral DDPM sampling with optional classifier-free guidance.
///
/// With labels and a guidance scale other than 1, each step evaluates the
/// conditional and the null-label prediction in one batch and combines them
/// as `eps_u + s * (eps_c - eps_u)`.
pub fn sample(
    model: &dyn Denoiser,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    n: usize,
    labels: Option<&[usize]>,
    rng: &mut Rng,
) -> Result<Tensor> {
    sampler.validate(sched)?;
    let [h, w, c] = model.image_shape();
    let per = h * w * c;
    if let Some(labels) = labels {
        let classes = model
            .num_classes()
            .ok_or_else(|| Error::config("class labels given to an unconditional model"))?;
        if labels.len() != n {
            return Err(Error::config(format!("{} labels for {n} samples", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > classes) {
            return Err(Error::config(format!("label {bad} outside 0..={classes}")));
        }
    }
    let steps = respace(sched, sampler.num_sampling_steps, sampler.variance_mode);
    let guided = labels.is_some() && sampler.guidance_scale != 1.0;
    let mut x = Tensor::new(vec![n, h, w, c], rng.normal_vec(n * per))?;
    for j in (0..steps.timesteps.len()).rev() {
        let t = steps.timesteps[j];
        let eps = if guided {
            let labels = labels.unwrap();
            let null = model.num_classes().unwrap();
            let both = Tensor::concat_leading(&[&x, &x])?;
            let mut lab = labels.to_vec();
            lab.extend(std::iter::repeat_n(null, n));
            let out = model.predict_eps(&both, &vec![t; 2 * n], Some(&lab))?;
            let s = sampler.guidance_scale;
            let (cond, uncond) = out.data().split_at(n * per);
            let data = cond.iter().zip(uncond).map(|(&ec, &eu)| eu + s * (ec - eu)).collect();
            Tensor::new(vec![n, h, w, c], data)?
        } else {
            model.predict_eps(&x, &vec![t; n], labels)?
        };
        if eps.shape() != x.shape() {
            return Err(Error::shape("sample: model output", eps.shape(), x.shape()));
        }
        let ab = steps.alpha_bars[j];
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let noise = if j > 0 { Some(rng.normal_vec(n * per)) } else { None };
        let sd = steps.variance[j].max(0.0).sqrt();
        let data: Vec<f32> = x
            .data()
            .iter()
            .zip(eps.data())
            .enumerate()
            .map(|(i, (&xt, &e))| {
                let x0 = ((xt as f64 - sb * e as f64) / sa).clamp(-1.0, 1.0);
                let mean = steps.coef_x0[j] * x0 + steps.coef_xt[j] * xt as f64;
                let z = noise.as_ref().map_or(0.0, |z| z[i] as f64);
                (mean + sd * z) as f32
            })
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain {
                op: "sample",
                detail: format!("non-finite sample at timestep {t}"),
            });
        }
        x = Tensor::new(vec![n, h, w, c], data)?;
    }
    x.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(x)
}
