//! Geometric core of a cascade point-voting 3D detector.
//!
//! Proposal points regress boxes as face distances; between decoder stages
//! each point moves to its predicted box center and re-aggregates features
//! from the proposals inside that box, while positive assignment tightens
//! stage by stage. A synthetic scene generator, an oracle predictor, a small
//! trainable head and an mAP evaluator make the mechanism measurable without
//! real data.

pub mod assignment;
pub mod cascade;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod learner;
pub mod overlap;
pub mod pipeline;
pub mod synth;
pub mod voting;

pub use assignment::{
    assign_targets, cpa_threshold, select_denoising, select_top_b, Assignment, CpaSchedule,
};
pub use cascade::{
    ensemble_stages, run_cascade, Prediction, Predictor, Proposal, StageRecord, StageTrace,
};
pub use error::{Error, Result};
pub use geometry::{
    centerness, decode_box, encode_deltas, point_in_scaled_box, project_point, update_point,
    CameraMap, Deltas, OrientedBox, Point3, Size3,
};
pub use learner::{train_cascade, HeadParams, HeadPredictor, LossConfig, LossReport, TrainConfig};
pub use overlap::{iou_aabb, iou_rotated, nms, Detection, IouKind};
pub use pipeline::{run_scene, PipelineConfig, SceneRun};
pub use synth::{
    gen_scene, oracle_predictor, OracleNoise, OraclePredictor, SceneConfig, SyntheticScene,
};
pub use voting::{ia_voting, FeatureVec, Weighting};
