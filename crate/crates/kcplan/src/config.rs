//! Run configuration: one JSON document covering every stage, with defaults
//! for anything left out.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use kcplan_core::dataset::{GroundTruthConfig, LevelSpec, ShelfLayout};
use kcplan_core::denoiser::DenoiserConfig;
use kcplan_core::diffusion::{make_schedule, GuidanceParams, NoiseSchedule, SamplerConfig, ScheduleKind};
use kcplan_core::keyconfig::KeyConfigParams;
use kcplan_core::training::TrainConfig;
use kcplan_core::trajopt::TrajOptParams;
use kcplan_core::ArmModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainConfig {
    pub layout: ShelfLayout,
    /// Object size range, meters (circle radius or box half-extent).
    pub size_range: (f64, f64),
    /// Minimum joint-space distance between start and goal.
    pub min_separation: f64,
    pub problem_tries: usize,
    /// Place start and goal tips in different shelf slots.
    pub slot_endpoints: bool,
}

impl Default for DomainConfig {
    fn default() -> Self {
        let spec = LevelSpec::for_level(1).expect("level 1 exists");
        DomainConfig {
            layout: spec.layout,
            size_range: spec.size_range,
            min_separation: 1.0,
            problem_tries: 100_000,
            slot_endpoints: true,
        }
    }
}

impl DomainConfig {
    pub fn level_spec(&self, level: u8) -> Result<LevelSpec> {
        let base = LevelSpec::for_level(level)?;
        Ok(LevelSpec {
            size_range: self.size_range,
            layout: self.layout.clone(),
            ..base
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub n_train_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Cosine,
            n_train_steps: 256,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(make_schedule(self.kind, self.n_train_steps)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_problems: usize,
    pub levels: Vec<u8>,
    pub methods: Vec<String>,
    /// Post-processing iteration budgets for the optimizing methods.
    pub budgets: Vec<usize>,
    /// Iteration budgets for the sampling-based planner.
    pub birrt_budgets: Vec<usize>,
    /// Standard deviation of the random bend of perturbed straight-line
    /// seeds, radians.
    pub seed_scale: f64,
    /// Write measured wall-clock times; off keeps outputs reproducible.
    pub timings: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_problems: 100,
            levels: vec![2],
            methods: ["pipeline", "diffusion-only", "trajopt", "birrt", "straight"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            budgets: vec![0, 10, 25, 50, 100, 200],
            birrt_budgets: vec![250, 500, 1000, 2000, 5000],
            seed_scale: 0.5,
            timings: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub arm: ArmModel,
    pub domain: DomainConfig,
    pub ground_truth: GroundTruthConfig,
    pub keyconfig: KeyConfigParams,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceParams,
    /// Post-processing optimizer used by planning and evaluation.
    pub trajopt: TrajOptParams,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.arm.validate().context("arm")?;
        self.keyconfig.validate().context("keyconfig")?;
        self.denoiser.validate().context("denoiser")?;
        self.train.validate().context("train")?;
        self.guidance.validate().context("guidance")?;
        self.trajopt.validate().context("trajopt")?;
        self.sampler.validate(&self.schedule.build()?).context("sampler")?;
        if self.denoiser.dof != self.arm.dof() {
            anyhow::bail!(
                "denoiser dof {} does not match the arm's {} joints",
                self.denoiser.dof,
                self.arm.dof()
            );
        }
        if self.denoiser.horizon != self.ground_truth.horizon {
            anyhow::bail!(
                "denoiser horizon {} differs from the dataset horizon {}",
                self.denoiser.horizon,
                self.ground_truth.horizon
            );
        }
        Ok(())
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or(1).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}, "guidance": {"k_coll": 0.5}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.w2, 0.05);
        assert_eq!(cfg.guidance.k_coll, 0.5);
        assert_eq!(cfg.guidance.kernel_sigma, 4.0);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn mismatched_horizon_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.denoiser.horizon = 32;
        assert!(cfg.validate().is_err());
    }
}
