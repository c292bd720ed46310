//! Run configuration: sections read from a TOML file, then overridden by
//! command-line flags. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use cobl::diffusion::train::TrainConfig;
use cobl::diffusion::{ArchConfig, ParamGroup, ScheduleParams};
use cobl::guidance::GuidanceConfig;
use cobl::scenegen::{DatasetConfig, OverlapRange};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed shared by every command.
    pub seed: u64,
    pub gen: GenSection,
    pub model: ModelSection,
    pub train_base: TrainSection,
    pub train_adapter: TrainSection,
    pub sample: SampleSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub n_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Square frame side in pixels.
    pub size: usize,
    pub n_layers: usize,
    pub texture_variants: usize,
    pub val_fraction: f64,
    pub min_overlap: f64,
    pub max_overlap: f64,
}

impl Default for GenSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        GenSection {
            n_scenes: d.n_scenes,
            min_objects: d.min_objects,
            max_objects: d.max_objects,
            size: d.height,
            n_layers: d.n_layers,
            texture_variants: d.texture_variants,
            val_fraction: 0.1,
            min_overlap: d.overlap.min,
            max_overlap: d.overlap.max,
        }
    }
}

impl GenSection {
    pub fn dataset_config(&self, seed: u64) -> DatasetConfig {
        DatasetConfig {
            n_scenes: self.n_scenes,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            height: self.size,
            width: self.size,
            n_layers: self.n_layers,
            seed,
            texture_variants: self.texture_variants,
            val_fraction: self.val_fraction,
            overlap: OverlapRange {
                min: self.min_overlap,
                max: self.max_overlap,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub channels: [usize; 3],
    pub adapter_channels: [usize; 3],
    pub time_dim: usize,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = ArchConfig::default();
        let s = ScheduleParams::default();
        ModelSection {
            channels: a.channels,
            adapter_channels: a.adapter_channels,
            time_dim: a.time_dim,
            train_steps: s.train_steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
        }
    }
}

impl ModelSection {
    pub fn arch(&self, n_layers: usize, height: usize, width: usize) -> ArchConfig {
        ArchConfig {
            n_layers,
            height,
            width,
            channels: self.channels,
            adapter_channels: self.adapter_channels,
            time_dim: self.time_dim,
        }
    }

    pub fn schedule(&self, inference_steps: usize) -> ScheduleParams {
        ScheduleParams {
            train_steps: self.train_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            inference_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Only used by adapter training.
    pub cond_dropout: f64,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 1000,
            lr: 1e-3,
            batch_size: 8,
            cond_dropout: 0.1,
            eval_every: 0,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64, groups: Vec<ParamGroup>) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
            cond_dropout: self.cond_dropout,
            groups,
            eval_every: self.eval_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub steps: usize,
    pub w: f64,
    pub lambda: f64,
    pub cfg: f64,
    /// Steps between stack interventions; 0 turns them off.
    pub period: usize,
    pub erase_threshold: f64,
    pub empty_threshold: f64,
    /// Absent means the model's preference.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_grad: Option<bool>,
    pub conditioning: bool,
    pub n_seeds: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        SampleSection {
            steps: g.steps,
            w: g.w,
            lambda: g.lambda,
            cfg: g.cfg_scale,
            period: g.update_period,
            erase_threshold: g.erase_visibility_threshold,
            empty_threshold: g.empty_alpha_threshold,
            exact_grad: g.exact_gradient,
            conditioning: g.use_conditioning,
            n_seeds: 1,
        }
    }
}

impl SampleSection {
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            steps: self.steps,
            w: self.w,
            lambda: self.lambda,
            cfg_scale: self.cfg,
            update_period: if self.period == 0 { usize::MAX } else { self.period },
            erase_visibility_threshold: self.erase_threshold,
            empty_alpha_threshold: self.empty_threshold,
            exact_gradient: self.exact_grad,
            use_conditioning: self.conditioning,
        }
    }
}

/// Parses a configuration document. Errors carry the line and name the
/// offending key.
pub fn parse_config(text: &str) -> Result<RunConfig, Failure> {
    toml::from_str(text).map_err(|e| Failure::Usage(format!("invalid config: {e}")))
}

/// Reads `path`, or returns the defaults when no file is given.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
            parse_config(&text).map_err(|f| match f {
                Failure::Usage(m) => Failure::Usage(format!("{}: {m}", p.display())),
                other => other,
            })
        }
    }
}

pub fn to_toml(config: &RunConfig) -> String {
    toml::to_string(config).expect("run config serializes")
}
