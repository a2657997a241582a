//! Per-scene inference: voxel candidates, top-B proposal selection, the
//! cascade and stage ensembling.

use serde::{Deserialize, Serialize};

use crate::assignment::CpaSchedule;
use crate::cascade::{ensemble_stages, initial_proposals, run_cascade, Predictor, StageTrace};
use crate::error::{Error, Result};
use crate::overlap::Detection;
use crate::synth::{candidate_points, SyntheticScene};
use crate::voting::Weighting;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schedule: CpaSchedule,
    /// Proposals kept after centerness ranking (B).
    pub num_proposals: usize,
    pub voxel_size: f64,
    pub weighting: Weighting,
    pub nms_iou: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schedule: CpaSchedule::default(),
            num_proposals: 64,
            voxel_size: 0.3,
            weighting: Weighting::ExpNegDist,
            nms_iou: 0.25,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.num_proposals == 0 {
            return Err(Error::InvalidConfig("num_proposals must be >= 1".into()));
        }
        if self.voxel_size.is_nan() || self.voxel_size <= 0.0 {
            return Err(Error::InvalidConfig("voxel_size must be positive".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::InvalidConfig("nms_iou must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Result of running one scene through the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRun {
    pub trace: StageTrace,
    /// All stages pooled through one NMS pass.
    pub detections: Vec<Detection>,
}

/// Runs the full decoder on a scene. Ground truth is attached to the trace
/// (and assignments recorded) when `record_gt` is set.
pub fn run_scene<P: Predictor + ?Sized>(
    scene: &SyntheticScene,
    predictor: &P,
    cfg: &PipelineConfig,
    record_gt: bool,
) -> Result<SceneRun> {
    cfg.validate()?;
    let (points, features) = candidate_points(scene, cfg.voxel_size)?;
    let proposals = initial_proposals(&points, &features, predictor, cfg.num_proposals)?;
    let gts = record_gt.then_some(scene.gt_boxes.as_slice());
    let trace = run_cascade(proposals, predictor, &cfg.schedule, cfg.weighting, gts)?;
    let detections = ensemble_stages(&trace, (1, trace.num_stages()), cfg.nms_iou)?;
    Ok(SceneRun { trace, detections })
}
