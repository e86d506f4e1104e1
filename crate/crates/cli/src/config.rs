//! Experiment configuration (JSON).

use std::path::Path;

use bddm::diffusion::{DiffusionSpec, LogTermVariant, VarianceMode};
use bddm::rng;
use bddm::sampling::{Process, SamplerConfig};
use bddm::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::artifacts::read_json;
use crate::datasets::DatasetConfig;
use crate::{CliError, CliResult};

fn default_grad_clip() -> f64 {
    10.0
}

/// Training hyper-parameters; spec and seed come from the enclosing config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub loss_variant: LogTermVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
}

impl TrainSection {
    pub fn to_train_config(&self, spec: DiffusionSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            spec,
            loss_variant: self.loss_variant,
            hidden: self.hidden.clone(),
            checkpoint_every: self.checkpoint_every,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub grid_m: usize,
    /// Longest predicted schedule; `⌊T/τ⌋` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    /// Held-out draws the selection metric compares against.
    pub eval_count: usize,
    /// Samples generated per candidate schedule.
    pub metric_samples: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            grid_m: 9,
            max_steps: None,
            eval_count: 1024,
            metric_samples: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub process: Process,
    pub ddim_eta: f64,
    pub variance_mode: VarianceMode,
}

impl SamplerSection {
    pub fn with_seed(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            process: self.process,
            ddim_eta: self.ddim_eta,
            variance_mode: self.variance_mode,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    /// Defaults to nine evenly spaced points spanning `[τ, T-τ]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_values: Option<Vec<usize>>,
    pub mc_draws: usize,
    pub loss_variant: LogTermVariant,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            t_values: None,
            mc_draws: 10_000,
            loss_variant: LogTermVariant::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub held_out: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { held_out: 4096 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec: DiffusionSpec,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub train_score: TrainSection,
    pub train_schedule: TrainSection,
    #[serde(default)]
    pub schedule_search: SearchSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub evaluate: EvalSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let config: Self = read_json(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.spec
            .validate()
            .map_err(|e| CliError::Config(format!("spec: {e}")))?;
        if self.dataset.dim() != self.spec.dim {
            return Err(CliError::Config(format!(
                "dataset has dim {}, spec.dim is {}",
                self.dataset.dim(),
                self.spec.dim
            )));
        }
        Ok(())
    }

    /// Independent sub-seed for one stage of the experiment.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        rng::derive_seed(self.seed, stage)
    }

    pub fn max_schedule_steps(&self) -> usize {
        self.schedule_search
            .max_steps
            .unwrap_or_else(|| self.spec.max_sampling_steps())
    }

    pub fn bound_t_values(&self) -> Vec<usize> {
        self.bounds
            .t_values
            .clone()
            .unwrap_or_else(|| default_t_grid(&self.spec, 9))
    }
}

/// `points` evenly spaced integers from `τ` to `T-τ` inclusive.
pub fn default_t_grid(spec: &DiffusionSpec, points: usize) -> Vec<usize> {
    let (lo, hi) = (spec.tau, spec.steps - spec.tau);
    if points <= 1 || hi <= lo {
        return vec![lo];
    }
    let mut t: Vec<usize> = (0..points)
        .map(|k| lo + ((hi - lo) as f64 * k as f64 / (points - 1) as f64).round() as usize)
        .collect();
    t.dedup();
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"{
  "spec": {"T": 200, "beta_start": 1e-4, "beta_end": 0.05, "tau": 20, "dim": 1},
  "seed": 3,
  "dataset": {"kind": "gaussian", "mu": [2.0], "s2": 1.0},
  "train_score": {"steps": 10, "batch_size": 8, "lr": 1e-3},
  "train_schedule": {"steps": 10, "batch_size": 8, "lr": 1e-3, "loss_variant": "exact"}
}"#;

    #[test]
    fn parse_serialize_parse_is_identity() {
        let a: ExperimentConfig = serde_json::from_str(SAMPLE).unwrap();
        let text = bddm::json::to_string(&a).unwrap();
        let b: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.schedule_search.grid_m, 9);
        assert_eq!(a.train_schedule.loss_variant, LogTermVariant::Exact);
    }

    #[test]
    fn default_grid_spans_the_junction_range() {
        let a: ExperimentConfig = serde_json::from_str(SAMPLE).unwrap();
        assert_eq!(
            a.bound_t_values(),
            vec![20, 40, 60, 80, 100, 120, 140, 160, 180]
        );
        assert_eq!(a.max_schedule_steps(), 10);
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let mut a: ExperimentConfig = serde_json::from_str(SAMPLE).unwrap();
        a.spec.dim = 2;
        assert!(matches!(a.validate(), Err(CliError::Config(_))));
    }
}
