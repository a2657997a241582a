//! Box overlap: axis-aligned and yaw-rotated 3D IoU, a Monte-Carlo IoU
//! estimator used as a reference, and class-wise greedy NMS.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{OrientedBox, Point3, EPS};

/// Polygon areas below this are treated as empty.
const MIN_AREA: f64 = 1e-12;

/// A scored, labelled box produced by one decoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
    pub score: f64,
    pub class_id: u32,
    pub stage: usize,
}

/// Which IoU definition a consumer should use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    #[default]
    Rotated,
    /// Ignores yaw and compares the boxes as if axis-aligned.
    Aabb,
}

impl IouKind {
    pub fn iou(self, a: &OrientedBox, b: &OrientedBox) -> f64 {
        match self {
            IouKind::Rotated => iou_rotated(a, b),
            IouKind::Aabb => aabb_overlap(a, b),
        }
    }
}

impl std::str::FromStr for IouKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rotated" => Ok(IouKind::Rotated),
            "aabb" => Ok(IouKind::Aabb),
            other => Err(format!("unknown IoU kind '{other}'")),
        }
    }
}

fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn aabb_overlap(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let ix = interval_overlap(
        a.center.x - a.size.w / 2.0,
        a.center.x + a.size.w / 2.0,
        b.center.x - b.size.w / 2.0,
        b.center.x + b.size.w / 2.0,
    );
    let iy = interval_overlap(
        a.center.y - a.size.l / 2.0,
        a.center.y + a.size.l / 2.0,
        b.center.y - b.size.l / 2.0,
        b.center.y + b.size.l / 2.0,
    );
    let iz = interval_overlap(a.z_min(), a.z_max(), b.z_min(), b.z_max());
    ratio(ix * iy * iz, a.volume(), b.volume())
}

fn ratio(inter: f64, va: f64, vb: f64) -> f64 {
    let union = va + vb - inter;
    if inter <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// IoU of two boxes with zero yaw.
pub fn iou_aabb(a: &OrientedBox, b: &OrientedBox) -> Result<f64> {
    for bx in [a, b] {
        if bx.yaw.abs() > EPS {
            return Err(Error::WrongVariant(bx.yaw));
        }
    }
    Ok(aabb_overlap(a, b))
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn segment_line_intersection(
    p: (f64, f64),
    q: (f64, f64),
    a: (f64, f64),
    b: (f64, f64),
) -> (f64, f64) {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let t = cp / (cp - cq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Sutherland-Hodgman clipping of `subject` by the convex CCW polygon `clip`.
fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let twice: f64 = (0..poly.len())
        .map(|i| {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % poly.len()];
            x0 * y1 - x1 * y0
        })
        .sum();
    (twice / 2.0).abs()
}

/// Area of the intersection of the two boxes' bird's-eye-view footprints.
pub fn bev_intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let area = polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()));
    if area < MIN_AREA {
        0.0
    } else {
        area
    }
}

/// 3D IoU of two yaw-rotated boxes: BEV polygon intersection times vertical
/// overlap.
pub fn iou_rotated(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let iz = interval_overlap(a.z_min(), a.z_max(), b.z_min(), b.z_max());
    if iz <= 0.0 {
        return 0.0;
    }
    ratio(bev_intersection_area(a, b) * iz, a.volume(), b.volume())
}

/// Monte-Carlo IoU estimate and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub iou: f64,
    pub std_err: f64,
}

/// Estimates IoU by sampling uniformly in the joint bounding region and
/// counting membership. Independent of the polygon clipping path.
pub fn iou_monte_carlo(
    a: &OrientedBox,
    b: &OrientedBox,
    samples: usize,
    rng: &mut impl Rng,
) -> McEstimate {
    let radius = |bx: &OrientedBox| (bx.size.w * bx.size.w + bx.size.l * bx.size.l).sqrt() / 2.0;
    let (ra, rb) = (radius(a), radius(b));
    let lo = Point3::new(
        (a.center.x - ra).min(b.center.x - rb),
        (a.center.y - ra).min(b.center.y - rb),
        a.z_min().min(b.z_min()),
    );
    let hi = Point3::new(
        (a.center.x + ra).max(b.center.x + rb),
        (a.center.y + ra).max(b.center.y + rb),
        a.z_max().max(b.z_max()),
    );
    let inside = |bx: &OrientedBox, p: &Point3| {
        let l = bx.to_local(p);
        l.x.abs() <= bx.size.w / 2.0 && l.y.abs() <= bx.size.l / 2.0 && l.z.abs() <= bx.size.h / 2.0
    };
    let (mut both, mut either) = (0u64, 0u64);
    for _ in 0..samples {
        let p = Point3::new(
            rng.random_range(lo.x..hi.x),
            rng.random_range(lo.y..hi.y),
            rng.random_range(lo.z..hi.z),
        );
        let (ia, ib) = (inside(a, &p), inside(b, &p));
        if ia || ib {
            either += 1;
            if ia && ib {
                both += 1;
            }
        }
    }
    if either == 0 {
        return McEstimate {
            iou: 0.0,
            std_err: 0.0,
        };
    }
    let p = both as f64 / either as f64;
    McEstimate {
        iou: p,
        std_err: (p * (1.0 - p) / either as f64).sqrt(),
    }
}

/// Indices of `dets` sorted by descending score, ties by lower index.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    order
}

/// Class-wise greedy NMS with rotated IoU. Returns kept indices in
/// descending score order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(dets) {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_id == dets[i].class_id
                && iou_rotated(&dets[k].bbox, &dets[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
