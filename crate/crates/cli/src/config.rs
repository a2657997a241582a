//! Run configuration: a TOML file, flag overrides, validation and hashing.

use std::path::Path;

use cascadev_core::eval::ApInterpolation;
use cascadev_core::{
    CpaSchedule, IouKind, OracleNoise, PipelineConfig, SceneConfig, TrainConfig, Weighting,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub iou: IouKind,
    pub ap: ApInterpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.25, 0.5],
            iou: IouKind::Rotated,
            ap: ApInterpolation::Continuous,
        }
    }
}

/// Everything a command needs. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub num_scenes: usize,
    pub scene: SceneConfig,
    pub pipeline: PipelineConfig,
    pub oracle: OracleNoise,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        Self {
            num_scenes: 1,
            train: TrainConfig {
                num_classes: scene.num_classes,
                seed: scene.seed,
                ..TrainConfig::default()
            },
            scene,
            pipeline: PipelineConfig::default(),
            oracle: OracleNoise::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub stages: Option<usize>,
    pub mu_max: Option<f64>,
    pub mu_min: Option<f64>,
    pub weighting: Option<Weighting>,
    pub iou: Option<IouKind>,
    pub ap: Option<ApInterpolation>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads `path`, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.scene.seed = seed;
            self.train.seed = seed;
        }
        let s: &mut CpaSchedule = &mut self.pipeline.schedule;
        if let Some(v) = o.stages {
            s.num_stages = v;
        }
        if let Some(v) = o.mu_max {
            s.mu_max = v;
        }
        if let Some(v) = o.mu_min {
            s.mu_min = v;
        }
        if let Some(w) = o.weighting {
            self.pipeline.weighting = w;
        }
        if let Some(k) = o.iou {
            self.eval.iou = k;
        }
        if let Some(a) = o.ap {
            self.eval.ap = a;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let core = |e: cascadev_core::Error| CliError::Config(e.to_string());
        if self.num_scenes == 0 {
            return Err(CliError::Config("num_scenes must be >= 1".into()));
        }
        self.scene.validate().map_err(core)?;
        self.pipeline.validate().map_err(core)?;
        self.oracle.validate().map_err(core)?;
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 || t.hidden == 0 {
            return Err(CliError::Config(
                "train steps, batch_size and hidden must be >= 1".into(),
            ));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(CliError::Config("train lr must be positive".into()));
        }
        if t.num_classes != self.scene.num_classes {
            return Err(CliError::Config(format!(
                "train.num_classes ({}) differs from scene.num_classes ({})",
                t.num_classes, self.scene.num_classes
            )));
        }
        if self.eval.thresholds.is_empty()
            || self
                .eval
                .thresholds
                .iter()
                .any(|t| !(*t > 0.0 && *t <= 1.0))
        {
            return Err(CliError::Config(
                "eval thresholds must be non-empty and in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Seed of scene `index`.
    pub fn scene_seed(&self, index: usize) -> u64 {
        self.scene.seed.wrapping_add(index as u64)
    }
}
