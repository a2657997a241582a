//! Detection metrics and cascade statistics.
//!
//! AP uses greedy score-ordered matching: each detection takes the
//! highest-IoU still-unmatched ground truth of its class in its scene, and is
//! a true positive when that IoU reaches the threshold.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assignment::responsible_gt;
use crate::cascade::StageTrace;
use crate::error::{Error, Result};
use crate::geometry::{centerness, encode_deltas, OrientedBox};
use crate::overlap::{Detection, IouKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Area under the monotonized precision-recall curve.
    #[default]
    Continuous,
    #[serde(rename = "11point")]
    ElevenPoint,
}

impl std::str::FromStr for ApInterpolation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "continuous" => Ok(Self::Continuous),
            "11point" => Ok(Self::ElevenPoint),
            other => Err(format!("unknown AP interpolation '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ApOptions {
    pub iou: IouKind,
    pub interpolation: ApInterpolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub ap: f64,
    pub num_gt: usize,
    pub num_det: usize,
    /// Raw precision/recall after each detection, in score order.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub iou_threshold: f64,
    /// Unweighted mean over classes present in the ground truth.
    pub map: f64,
    pub per_class: Vec<ClassAp>,
}

/// One scene's detections and ground truth.
#[derive(Debug, Clone, Copy)]
pub struct EvalScene<'a> {
    pub detections: &'a [Detection],
    pub gts: &'a [OrientedBox],
}

fn gt_class(g: &OrientedBox) -> u32 {
    g.class_id.unwrap_or(0)
}

/// AP of a single scene.
pub fn average_precision(
    dets: &[Detection],
    gts: &[OrientedBox],
    iou_threshold: f64,
    opts: ApOptions,
) -> ApResult {
    average_precision_scenes(
        &[EvalScene {
            detections: dets,
            gts,
        }],
        iou_threshold,
        opts,
    )
}

/// AP over a set of scenes; detections only match ground truth of their own scene.
pub fn average_precision_scenes(
    scenes: &[EvalScene<'_>],
    iou_threshold: f64,
    opts: ApOptions,
) -> ApResult {
    let classes: BTreeSet<u32> = scenes
        .iter()
        .flat_map(|s| s.gts.iter().map(gt_class))
        .collect();
    let per_class: Vec<ClassAp> = classes
        .into_iter()
        .map(|c| class_ap(scenes, c, iou_threshold, opts))
        .collect();
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    ApResult {
        iou_threshold,
        map,
        per_class,
    }
}

fn class_ap(scenes: &[EvalScene<'_>], class_id: u32, thr: f64, opts: ApOptions) -> ClassAp {
    let mut dets: Vec<(usize, &Detection)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, sc)| {
            sc.detections
                .iter()
                .filter(|d| d.class_id == class_id)
                .map(move |d| (s, d))
        })
        .collect();
    // Stable: ties keep scene-then-input order.
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut matched: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gts.len()]).collect();
    let num_gt: usize = scenes
        .iter()
        .map(|s| s.gts.iter().filter(|g| gt_class(g) == class_id).count())
        .sum();

    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (k, (s, d)) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in scenes[*s].gts.iter().enumerate() {
            if matched[*s][g] || gt_class(gt) != class_id {
                continue;
            }
            let iou = opts.iou.iou(&d.bbox, gt);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            if iou >= thr {
                matched[*s][g] = true;
                tp += 1;
            }
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(if num_gt == 0 {
            0.0
        } else {
            tp as f64 / num_gt as f64
        });
    }

    let ap = if num_gt == 0 {
        0.0
    } else {
        match opts.interpolation {
            ApInterpolation::Continuous => continuous_ap(&precision, &recall),
            ApInterpolation::ElevenPoint => eleven_point_ap(&precision, &recall),
        }
    };
    ClassAp {
        class_id,
        ap,
        num_gt,
        num_det: dets.len(),
        precision,
        recall,
    }
}

fn continuous_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

fn eleven_point_ap(precision: &[f64], recall: &[f64]) -> f64 {
    (0..=10)
        .map(|t| {
            let t = t as f64 / 10.0;
            precision
                .iter()
                .zip(recall)
                .filter(|(_, r)| **r >= t - 1e-12)
                .map(|(p, _)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant or there are fewer than two samples.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// One regular proposal's measurements at one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalSample {
    /// Centerness of the stage's input point w.r.t. its responsible ground truth.
    pub centerness_before: f64,
    /// Centerness of the predicted box center w.r.t. the same ground truth.
    pub centerness_after: f64,
    /// IoU of the predicted box with that ground truth.
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: usize,
    pub mu: Option<f64>,
    pub positives: usize,
    pub samples: Vec<ProposalSample>,
}

impl StageStats {
    fn mean(&self, f: impl Fn(&ProposalSample) -> f64) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(f).sum::<f64>() / self.samples.len() as f64
    }

    pub fn mean_centerness_before(&self) -> f64 {
        self.mean(|s| s.centerness_before)
    }

    pub fn mean_centerness_after(&self) -> f64 {
        self.mean(|s| s.centerness_after)
    }

    pub fn median_centerness_before(&self) -> f64 {
        median(self.samples.iter().map(|s| s.centerness_before).collect())
    }

    pub fn median_centerness_after(&self) -> f64 {
        median(self.samples.iter().map(|s| s.centerness_after).collect())
    }

    /// Fraction of samples whose centerness strictly increased.
    pub fn fraction_gained(&self) -> f64 {
        self.mean(|s| {
            if s.centerness_after > s.centerness_before {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Rank correlation between input centerness and output IoU.
    pub fn spearman_rho(&self) -> Option<f64> {
        let c: Vec<f64> = self.samples.iter().map(|s| s.centerness_before).collect();
        let i: Vec<f64> = self.samples.iter().map(|s| s.iou).collect();
        spearman(&c, &i)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CascadeStats {
    pub stages: Vec<StageStats>,
}

impl CascadeStats {
    /// Adds one trace's samples. Stage lists grow to the longest trace seen.
    pub fn add_trace(&mut self, trace: &StageTrace) -> Result<()> {
        let gts = trace
            .gts
            .as_deref()
            .ok_or(Error::EmptyInput("trace carries no ground truth"))?;
        for rec in &trace.stages {
            while self.stages.len() < rec.stage {
                let stage = self.stages.len() + 1;
                self.stages.push(StageStats {
                    stage,
                    mu: None,
                    positives: 0,
                    samples: Vec::new(),
                });
            }
            let st = &mut self.stages[rec.stage - 1];
            st.mu = st.mu.or(rec.mu);
            if let Some(a) = &rec.assignment {
                st.positives += a.regular_positive_count();
            }
            for (prop, det) in rec.proposals.iter().zip(&rec.detections) {
                let (Some(det), false) = (det, prop.is_denoising) else {
                    continue;
                };
                let Some(t) = responsible_gt(&prop.point, gts) else {
                    continue;
                };
                let gt = &gts[t];
                st.samples.push(ProposalSample {
                    centerness_before: centerness(&encode_deltas(&prop.point, gt)),
                    centerness_after: centerness(&encode_deltas(&det.bbox.center, gt)),
                    iou: IouKind::Rotated.iou(&det.bbox, gt),
                });
            }
        }
        Ok(())
    }

    /// Concatenates the sample sets of `other` onto `self`, stage by stage.
    pub fn merge(&mut self, other: CascadeStats) {
        for st in other.stages {
            while self.stages.len() < st.stage {
                let stage = self.stages.len() + 1;
                self.stages.push(StageStats {
                    stage,
                    mu: None,
                    positives: 0,
                    samples: Vec::new(),
                });
            }
            let mine = &mut self.stages[st.stage - 1];
            mine.mu = mine.mu.or(st.mu);
            mine.positives += st.positives;
            mine.samples.extend(st.samples);
        }
    }

    /// CSV with one row per stage.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "stage,mu,positives,mean_centerness_before,mean_centerness_after,spearman_rho\n",
        );
        for s in &self.stages {
            let mu = s.mu.map(|m| m.to_string()).unwrap_or_default();
            let rho = s
                .spearman_rho()
                .map(|r| r.to_string())
                .unwrap_or_else(|| "nan".into());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.stage,
                mu,
                s.positives,
                s.mean_centerness_before(),
                s.mean_centerness_after(),
                rho
            );
        }
        out
    }
}

/// Aggregates statistics over traces in order.
pub fn cascade_stats(traces: &[StageTrace]) -> Result<CascadeStats> {
    if traces.is_empty() {
        return Err(Error::EmptyInput("no traces"));
    }
    let mut stats = CascadeStats::default();
    for t in traces {
        stats.add_trace(t)?;
    }
    Ok(stats)
}
