//! Positive/negative target assignment for proposal points.
//!
//! A proposal is positive for a ground truth when it lies inside the box with
//! half-extents scaled by `mu`. The cascade schedule shrinks `mu` stage by
//! stage so early stages see many positives and later stages only the
//! well-centered ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    centerness, encode_deltas, point_in_scaled_box, Deltas, OrientedBox, Point3,
};

/// Per-stage decreasing assignment threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpaSchedule {
    pub mu_max: f64,
    pub mu_min: f64,
    pub num_stages: usize,
}

impl Default for CpaSchedule {
    fn default() -> Self {
        Self {
            mu_max: 0.4,
            mu_min: 0.2,
            num_stages: 3,
        }
    }
}

impl CpaSchedule {
    pub fn new(mu_max: f64, mu_min: f64, num_stages: usize) -> Result<Self> {
        let s = Self {
            mu_max,
            mu_min,
            num_stages,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu_min > 0.0 && self.mu_min <= self.mu_max && self.mu_max.is_finite()) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < mu_min <= mu_max, got mu_min={} mu_max={}",
                self.mu_min, self.mu_max
            )));
        }
        if self.num_stages == 0 {
            return Err(Error::InvalidSchedule("num_stages must be >= 1".into()));
        }
        Ok(())
    }

    /// Thresholds for stages `1..=L`.
    pub fn thresholds(&self) -> Vec<f64> {
        (1..=self.num_stages)
            .map(|l| cpa_threshold(l, self).expect("stage in range"))
            .collect()
    }
}

/// `mu_l = mu_max - (l / L) (mu_max - mu_min)` for stage `l` in `1..=L`.
pub fn cpa_threshold(stage: usize, sched: &CpaSchedule) -> Result<f64> {
    if stage == 0 || stage > sched.num_stages {
        return Err(Error::StageOutOfRange {
            stage,
            num_stages: sched.num_stages,
        });
    }
    let frac = stage as f64 / sched.num_stages as f64;
    if stage == sched.num_stages {
        return Ok(sched.mu_min);
    }
    Ok(sched.mu_max - frac * (sched.mu_max - sched.mu_min))
}

/// Targets for a matched proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub gt_index: usize,
    pub deltas: Deltas,
    pub centerness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
}

impl Match {
    fn against(p: &Point3, gt_index: usize, gt: &OrientedBox) -> Self {
        let deltas = encode_deltas(p, gt);
        Self {
            gt_index,
            deltas,
            centerness: centerness(&deltas),
            class_id: gt.class_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignedTarget {
    /// `None` for negatives.
    pub matched: Option<Match>,
    pub is_denoising: bool,
}

impl AssignedTarget {
    pub fn is_positive(&self) -> bool {
        self.matched.is_some()
    }
}

/// Assignment of one stage's proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub mu: f64,
    pub targets: Vec<AssignedTarget>,
}

impl Assignment {
    /// Number of positives among regular (non-denoising) proposals.
    pub fn regular_positive_count(&self) -> usize {
        self.targets
            .iter()
            .filter(|t| t.is_positive() && !t.is_denoising)
            .count()
    }

    pub fn positive_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.targets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_positive())
            .map(|(i, _)| i)
    }
}

/// Index of the smallest-volume box whose `mu`-scaled region contains `p`.
pub fn containing_gt(p: &Point3, gts: &[OrientedBox], mu: f64) -> Option<usize> {
    gts.iter()
        .enumerate()
        .filter(|(_, g)| point_in_scaled_box(p, g, mu))
        .min_by(|(i, a), (j, b)| a.volume().total_cmp(&b.volume()).then(i.cmp(j)))
        .map(|(i, _)| i)
}

/// The ground truth a point is responsible for: the smallest box containing
/// it, otherwise the one with the nearest center.
pub fn responsible_gt(p: &Point3, gts: &[OrientedBox]) -> Option<usize> {
    containing_gt(p, gts, 0.5).or_else(|| {
        gts.iter()
            .enumerate()
            .min_by(|(i, a), (j, b)| {
                p.distance(&a.center)
                    .total_cmp(&p.distance(&b.center))
                    .then(i.cmp(j))
            })
            .map(|(i, _)| i)
    })
}

/// Positive iff the point is inside some `mu`-scaled ground truth; the
/// smallest-volume box wins when several contain it.
pub fn assign_targets(points: &[Point3], gts: &[OrientedBox], mu: f64) -> Assignment {
    assign_with_fixed(points, &vec![None; points.len()], gts, mu)
}

/// Like [`assign_targets`], but proposals with `fixed[i] = Some(t)` are
/// denoising proposals and always match ground truth `t`.
pub fn assign_with_fixed(
    points: &[Point3],
    fixed: &[Option<usize>],
    gts: &[OrientedBox],
    mu: f64,
) -> Assignment {
    debug_assert_eq!(points.len(), fixed.len());
    let targets = points
        .iter()
        .zip(fixed)
        .map(|(p, fixed)| match fixed {
            Some(t) => AssignedTarget {
                matched: Some(Match::against(p, *t, &gts[*t])),
                is_denoising: true,
            },
            None => AssignedTarget {
                matched: containing_gt(p, gts, mu).map(|t| Match::against(p, t, &gts[t])),
                is_denoising: false,
            },
        })
        .collect();
    Assignment { mu, targets }
}

/// For each ground-truth center, the index of the point nearest to it in
/// l1 distance (ties to the lower index).
pub fn select_denoising(points: &[Point3], gt_centers: &[Point3]) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("denoising candidate points"));
    }
    Ok(gt_centers
        .iter()
        .map(|g| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, p) in points.iter().enumerate() {
                let d = p.l1_distance(g);
                if d < best_d {
                    best = i;
                    best_d = d;
                }
            }
            best
        })
        .collect())
}

/// Indices of the `b` largest values, descending, ties to the lower index.
pub fn select_top_b(values: &[f64], b: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    order.truncate(b);
    order
}
