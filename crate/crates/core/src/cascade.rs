//! The multi-stage decoder loop.
//!
//! Each stage runs the predictor on the current proposals and decodes one
//! box per proposal. Between stages every proposal point moves to the center
//! of its predicted box and its feature is re-aggregated by instance-aware
//! voting over the current proposal set. The final stage only predicts.

use serde::{Deserialize, Serialize};

use crate::assignment::{
    assign_with_fixed, cpa_threshold, select_denoising, select_top_b, Assignment, CpaSchedule,
};
use crate::error::{Error, Result};
use crate::geometry::{decode_box, update_point, Deltas, OrientedBox, Point3};
use crate::overlap::{nms, Detection};
use crate::voting::{ia_voting, FeatureVec, Weighting};

/// A proposal point and its feature, tracked across stages by `origin_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub point: Point3,
    pub feature: FeatureVec,
    pub is_denoising: bool,
    /// Ground truth a denoising proposal stays assigned to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_gt: Option<usize>,
    pub origin_index: usize,
}

impl Proposal {
    pub fn new(point: Point3, feature: FeatureVec, origin_index: usize) -> Self {
        Self {
            point,
            feature,
            is_denoising: false,
            fixed_gt: None,
            origin_index,
        }
    }

    pub fn denoising(point: Point3, feature: FeatureVec, gt: usize, origin_index: usize) -> Self {
        Self {
            point,
            feature,
            is_denoising: true,
            fixed_gt: Some(gt),
            origin_index,
        }
    }
}

/// Head output for one proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Foreground class probabilities followed by one background entry.
    pub class_probs: Vec<f64>,
    pub deltas: Deltas,
    pub centerness: f64,
}

impl Prediction {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::PredictorOutput(msg));
        if self.class_probs.len() < 2 {
            return bad(format!(
                "need at least 2 class entries, got {}",
                self.class_probs.len()
            ));
        }
        if self.class_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("class probability outside [0, 1]".into());
        }
        let sum: f64 = self.class_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return bad(format!("class probabilities sum to {sum}"));
        }
        if !(0.0..=1.0).contains(&self.centerness) {
            return bad(format!("centerness {} outside [0, 1]", self.centerness));
        }
        if !self.deltas.is_finite() {
            return bad("non-finite deltas".into());
        }
        Ok(())
    }

    /// Most probable foreground class and its probability.
    pub fn top_class(&self) -> (u32, f64) {
        let fg = &self.class_probs[..self.class_probs.len() - 1];
        let mut best = 0;
        for (k, p) in fg.iter().enumerate() {
            if *p > fg[best] {
                best = k;
            }
        }
        (best as u32, fg[best])
    }

    /// Decoded detection, or `None` when the deltas imply a degenerate box.
    pub fn detection(&self, point: &Point3, stage: usize) -> Option<Detection> {
        let (class_id, prob) = self.top_class();
        let score = prob * self.centerness;
        let bbox = decode_box(point, &self.deltas).ok()?;
        Some(Detection {
            bbox: bbox.with_class(class_id).with_score(score),
            score,
            class_id,
            stage,
        })
    }
}

/// Detection head abstraction. `stage` is 1-based.
pub trait Predictor {
    fn predict(&self, proposal: &Proposal, stage: usize) -> Prediction;
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn predict(&self, proposal: &Proposal, stage: usize) -> Prediction {
        (**self).predict(proposal, stage)
    }
}

/// Everything one stage consumed and produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    /// Assignment threshold, present when ground truth was supplied.
    pub mu: Option<f64>,
    pub proposals: Vec<Proposal>,
    pub predictions: Vec<Prediction>,
    /// Aligned with `proposals`; `None` where the box was degenerate.
    pub detections: Vec<Option<Detection>>,
    /// Points fed to the next stage; absent on the last stage.
    pub updated_points: Option<Vec<Point3>>,
    pub assignment: Option<Assignment>,
}

impl StageRecord {
    pub fn valid_detections(&self) -> impl Iterator<Item = &Detection> {
        self.detections.iter().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub gts: Option<Vec<OrientedBox>>,
    pub stages: Vec<StageRecord>,
}

impl StageTrace {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }
}

/// Runs all `sched.num_stages` stages. When `gts` is given, each stage's
/// proposals are also assigned with that stage's threshold.
pub fn run_cascade<P: Predictor + ?Sized>(
    proposals: Vec<Proposal>,
    predictor: &P,
    sched: &CpaSchedule,
    weighting: Weighting,
    gts: Option<&[OrientedBox]>,
) -> Result<StageTrace> {
    sched.validate()?;
    let num_stages = sched.num_stages;
    let mut current = proposals;
    let mut stages = Vec::with_capacity(num_stages);

    for stage in 1..=num_stages {
        let predictions: Vec<Prediction> = current
            .iter()
            .map(|p| predictor.predict(p, stage))
            .collect();
        for pred in &predictions {
            pred.validate()?;
        }
        let detections: Vec<Option<Detection>> = current
            .iter()
            .zip(&predictions)
            .map(|(p, pred)| pred.detection(&p.point, stage))
            .collect();

        let (mu, assignment) = match gts {
            Some(gts) => {
                let mu = cpa_threshold(stage, sched)?;
                let points: Vec<Point3> = current.iter().map(|p| p.point).collect();
                let fixed: Vec<Option<usize>> = current.iter().map(|p| p.fixed_gt).collect();
                (Some(mu), Some(assign_with_fixed(&points, &fixed, gts, mu)))
            }
            None => (None, None),
        };

        let mut next = None;
        let mut updated_points = None;
        if stage < num_stages {
            let moved: Vec<Point3> = current
                .iter()
                .zip(&predictions)
                .zip(&detections)
                .map(|((p, pred), det)| match det {
                    Some(_) => update_point(&p.point, &pred.deltas),
                    None => p.point,
                })
                .collect();
            let boxes: Vec<Option<OrientedBox>> =
                detections.iter().map(|d| d.map(|d| d.bbox)).collect();
            let src_points: Vec<Point3> = current.iter().map(|p| p.point).collect();
            let src_features: Vec<FeatureVec> = current.iter().map(|p| p.feature.clone()).collect();
            let voted = ia_voting(
                &moved,
                &boxes,
                &src_points,
                &src_features,
                &src_features,
                weighting,
            )?;
            next = Some(
                current
                    .iter()
                    .zip(moved.iter().zip(voted))
                    .map(|(p, (pt, f))| Proposal {
                        point: *pt,
                        feature: f,
                        ..p.clone()
                    })
                    .collect::<Vec<_>>(),
            );
            updated_points = Some(moved);
        }

        stages.push(StageRecord {
            stage,
            mu,
            proposals: std::mem::take(&mut current),
            predictions,
            detections,
            updated_points,
            assignment,
        });
        if let Some(n) = next {
            current = n;
        }
    }

    Ok(StageTrace {
        gts: gts.map(<[OrientedBox]>::to_vec),
        stages,
    })
}

/// Pools the detections of stages `first..=last` (1-based) and runs one
/// class-wise NMS pass over them. Output is in descending score order.
pub fn ensemble_stages(
    trace: &StageTrace,
    (first, last): (usize, usize),
    iou_threshold: f64,
) -> Result<Vec<Detection>> {
    if first == 0 || first > last || last > trace.num_stages() {
        return Err(Error::StageOutOfRange {
            stage: if first == 0 || first > last {
                first
            } else {
                last
            },
            num_stages: trace.num_stages(),
        });
    }
    let pooled: Vec<Detection> = trace.stages[first - 1..last]
        .iter()
        .flat_map(|s| s.valid_detections().copied())
        .collect();
    Ok(nms(&pooled, iou_threshold)
        .into_iter()
        .map(|i| pooled[i])
        .collect())
}

/// Ranking score of a stage-1 prediction: centerness times foreground
/// probability. The centerness branch is only supervised on positives, so
/// the foreground factor is what keeps background candidates out.
pub fn selection_score(pred: &Prediction) -> f64 {
    let background = pred.class_probs.last().copied().unwrap_or(0.0);
    pred.centerness * (1.0 - background)
}

/// Keeps the `b` candidates with the highest `scores` as proposals.
pub fn proposals_from_scores(
    points: &[Point3],
    features: &[FeatureVec],
    scores: &[f64],
    b: usize,
) -> Result<Vec<Proposal>> {
    if points.len() != features.len() || points.len() != scores.len() {
        return Err(Error::Misaligned {
            what: "candidate points vs features vs scores",
            left: points.len(),
            right: features.len().min(scores.len()),
        });
    }
    Ok(select_top_b(scores, b)
        .into_iter()
        .enumerate()
        .map(|(slot, i)| Proposal::new(points[i], features[i].clone(), slot))
        .collect())
}

/// Scores every candidate with the stage-1 head and keeps the top `b`
/// by [`selection_score`].
pub fn initial_proposals<P: Predictor + ?Sized>(
    points: &[Point3],
    features: &[FeatureVec],
    predictor: &P,
    b: usize,
) -> Result<Vec<Proposal>> {
    if points.len() != features.len() {
        return Err(Error::Misaligned {
            what: "candidate points vs features",
            left: points.len(),
            right: features.len(),
        });
    }
    let scores: Vec<f64> = points
        .iter()
        .zip(features)
        .enumerate()
        .map(|(i, (p, f))| selection_score(&predictor.predict(&Proposal::new(*p, f.clone(), i), 1)))
        .collect();
    proposals_from_scores(points, features, &scores, b)
}

/// Appends one denoising proposal per ground truth: the candidate nearest to
/// its center, fixed to that ground truth for every stage.
pub fn append_denoising(
    proposals: &mut Vec<Proposal>,
    points: &[Point3],
    features: &[FeatureVec],
    gts: &[OrientedBox],
) -> Result<()> {
    let centers: Vec<Point3> = gts.iter().map(|g| g.center).collect();
    let picks = select_denoising(points, &centers)?;
    let base = proposals.len();
    for (t, k) in picks.into_iter().enumerate() {
        proposals.push(Proposal::denoising(
            points[k],
            features[k].clone(),
            t,
            base + t,
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{encode_deltas, Size3};

    /// Regresses the exact box of a fixed target.
    struct Exact(OrientedBox);

    impl Predictor for Exact {
        fn predict(&self, p: &Proposal, _stage: usize) -> Prediction {
            let deltas = encode_deltas(&p.point, &self.0);
            Prediction {
                class_probs: vec![1.0, 0.0],
                deltas,
                centerness: crate::geometry::centerness(&deltas),
            }
        }
    }

    fn gt() -> OrientedBox {
        OrientedBox::new(Point3::new(1.0, 0.5, 0.3), Size3::new(1.0, 2.0, 0.8), 0.4)
            .unwrap()
            .with_class(0)
    }

    fn proposals() -> Vec<Proposal> {
        [(1.2, 0.5, 0.3), (0.8, 0.9, 0.1), (3.0, 3.0, 0.0)]
            .iter()
            .enumerate()
            .map(|(i, &(x, y, z))| {
                Proposal::new(Point3::new(x, y, z), FeatureVec(vec![i as f64]), i)
            })
            .collect()
    }

    #[test]
    fn single_stage_is_plain_prediction() {
        let sched = CpaSchedule::new(0.4, 0.2, 1).unwrap();
        let trace = run_cascade(
            proposals(),
            &Exact(gt()),
            &sched,
            Weighting::ExpNegDist,
            None,
        )
        .unwrap();
        assert_eq!(trace.num_stages(), 1);
        let s = &trace.stages[0];
        assert!(s.updated_points.is_none());
        assert!(s.mu.is_none() && s.assignment.is_none());
        assert_eq!(s.proposals, proposals());
        for (p, d) in s.proposals.iter().zip(&s.detections) {
            let d = d.unwrap();
            let expect = Exact(gt()).predict(p, 1).detection(&p.point, 1).unwrap();
            assert_eq!(d, expect);
        }
    }

    #[test]
    fn exact_predictor_converges_to_center() {
        let sched = CpaSchedule::default();
        let g = gt();
        let trace = run_cascade(
            proposals(),
            &Exact(g),
            &sched,
            Weighting::ExpNegDist,
            Some(&[g]),
        )
        .unwrap();
        assert_eq!(trace.num_stages(), 3);
        for (l, s) in trace.stages.iter().enumerate().skip(1) {
            assert_eq!(s.mu, Some(cpa_threshold(l + 1, &sched).unwrap()));
            for p in &s.proposals {
                assert!(p.point.distance(&g.center) < 1e-9);
            }
            // Centered proposals are positives at every threshold.
            assert_eq!(s.assignment.as_ref().unwrap().regular_positive_count(), 3);
        }
        let origins: Vec<usize> = trace.stages[2]
            .proposals
            .iter()
            .map(|p| p.origin_index)
            .collect();
        assert_eq!(origins, vec![0, 1, 2]);
    }

    #[test]
    fn ensemble_single_stage_equals_stage_nms() {
        let sched = CpaSchedule::default();
        let trace = run_cascade(
            proposals(),
            &Exact(gt()),
            &sched,
            Weighting::ExpNegDist,
            None,
        )
        .unwrap();
        let stage2: Vec<Detection> = trace.stages[1].valid_detections().copied().collect();
        let expect: Vec<Detection> = nms(&stage2, 0.5).into_iter().map(|i| stage2[i]).collect();
        assert_eq!(ensemble_stages(&trace, (2, 2), 0.5).unwrap(), expect);
        // All stages regress the same box: one survivor, the top score overall.
        let all = ensemble_stages(&trace, (1, 3), 0.5).unwrap();
        assert_eq!(all.len(), 1);
        let best = trace
            .stages
            .iter()
            .flat_map(|s| s.valid_detections())
            .map(|d| d.score)
            .fold(0.0, f64::max);
        assert_eq!(all[0].score, best);
        assert!(ensemble_stages(&trace, (2, 1), 0.5).is_err());
        assert!(ensemble_stages(&trace, (0, 1), 0.5).is_err());
        assert!(ensemble_stages(&trace, (1, 4), 0.5).is_err());
    }

    struct Broken;

    impl Predictor for Broken {
        fn predict(&self, _p: &Proposal, _stage: usize) -> Prediction {
            Prediction {
                class_probs: vec![0.7, 0.7],
                deltas: Deltas::new([1.0; 6], 0.0),
                centerness: 0.5,
            }
        }
    }

    #[test]
    fn contract_violation_surfaces() {
        let err = run_cascade(
            proposals(),
            &Broken,
            &CpaSchedule::default(),
            Weighting::ExpNegDist,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::PredictorOutput(_)));
    }

    #[test]
    fn denoising_proposals_keep_their_target() {
        let g = gt();
        let mut props = proposals();
        let pts: Vec<Point3> = props.iter().map(|p| p.point).collect();
        let feats: Vec<FeatureVec> = props.iter().map(|p| p.feature.clone()).collect();
        append_denoising(&mut props, &pts, &feats, &[g]).unwrap();
        assert_eq!(props.len(), 4);
        assert!(props[3].is_denoising && props[3].fixed_gt == Some(0));
        assert_eq!(props[3].point, pts[0]);
        let trace = run_cascade(
            props,
            &Exact(g),
            &CpaSchedule::default(),
            Weighting::ExpNegDist,
            Some(&[g]),
        )
        .unwrap();
        for s in &trace.stages {
            let t = s.assignment.as_ref().unwrap().targets[3];
            assert!(t.is_denoising && t.matched.unwrap().gt_index == 0);
        }
    }
}
