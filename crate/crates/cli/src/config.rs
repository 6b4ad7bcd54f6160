//! Run configuration file: `[data] [backbone] [diffusion] [dmp] [train] [eval]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dmp_core::diffusion::{SamplerConfig, ScheduleKind, VarianceMode};
use dmp_core::eval::{FidOptions, DEFAULT_PROBES, MIN_FID_IMAGES};
use dmp_core::trainer::ScheduleSpec;
use dmp_core::{BackboneConfig, DatasetSpec, DmpConfig, Error, Result, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub num_sampling_steps: usize,
    pub guidance_scale: f32,
    pub variance_mode: VarianceMode,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        DiffusionSection {
            schedule: ScheduleKind::Linear,
            steps: 1000,
            num_sampling_steps: s.num_sampling_steps,
            guidance_scale: s.guidance_scale,
            variance_mode: s.variance_mode,
        }
    }
}

impl DiffusionSection {
    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.schedule,
            steps: self.steps,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            num_sampling_steps: self.num_sampling_steps,
            guidance_scale: self.guidance_scale,
            variance_mode: self.variance_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Generated images for toy-FID.
    pub num_samples: usize,
    /// Held-out real images for toy-FID, drawn from the `[data]` generator
    /// under a seed derived from `data.seed` unless `real_seed` is set.
    pub num_real: usize,
    pub real_seed: Option<u64>,
    pub min_images: usize,
    pub pool: bool,
    /// Sampling batch size.
    pub batch: usize,
    /// Samples run through the sampler when recording gate activations.
    pub probe_samples: usize,
    pub probe_timesteps: usize,
    /// Seed of the sampling noise.
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            num_samples: 2048,
            num_real: 2048,
            real_seed: None,
            min_images: MIN_FID_IMAGES,
            pool: false,
            batch: 256,
            probe_samples: 64,
            probe_timesteps: DEFAULT_PROBES,
            seed: 0,
        }
    }
}

impl EvalSection {
    pub fn fid_options(&self) -> FidOptions {
        FidOptions {
            pool: self.pool,
            min_images: self.min_images,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub backbone: BackboneConfig,
    pub diffusion: DiffusionSection,
    pub dmp: DmpConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

fn parse_value(raw: &str) -> toml::Value {
    // bare words like `cosine` are taken as strings
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(format!("bad key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses a config file (or defaults when `path` is `None`) and applies
    /// `section.key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.backbone.validate()?;
        self.train.validate()?;
        if self.eval.batch == 0 || self.eval.probe_timesteps == 0 {
            return Err(Error::config("eval.batch and eval.probe_timesteps must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Seed of the held-out real images used by toy-FID.
    pub fn real_seed(&self) -> u64 {
        self.eval
            .real_seed
            .unwrap_or_else(|| dmp_core::numcore::fnv1a64(format!("{}.held-out", self.data.seed).as_bytes()))
    }
}
