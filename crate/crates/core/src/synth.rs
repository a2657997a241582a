//! Procedural scenes and a noisy oracle standing in for a trained backbone.
//!
//! Scenes are non-overlapping labelled boxes with points sampled on their
//! faces plus uniform clutter. Each box class owns its own slice of the
//! size range, so a class label carries size information. Surface-point
//! features hold the offset to the owning box center and the class one-hot,
//! both with Gaussian noise; clutter features are pure noise.
//!
//! All randomness comes from `ChaCha8Rng` seeded with a `u64`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assignment::responsible_gt;
use crate::cascade::{Prediction, Predictor, Proposal};
use crate::error::{Error, Result};
use crate::geometry::{centerness, encode_deltas, OrientedBox, Point3, Size3};
use crate::overlap::iou_rotated;
use crate::voting::FeatureVec;

/// Placement attempts per box (and per clutter point) before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Inclusive range of ground-truth boxes per scene.
    pub num_gt: [usize; 2],
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
    pub yaw_enabled: bool,
    pub points_per_box: usize,
    pub clutter_points: usize,
    /// Half-extents in x and y; z spans `[0, workspace[2]]`.
    pub workspace: [f64; 3],
    pub num_classes: u32,
    pub feature_dim: usize,
    pub sigma_feature: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_gt: [3, 6],
            size_min: [0.4, 0.4, 0.4],
            size_max: [1.6, 1.6, 1.2],
            yaw_enabled: false,
            points_per_box: 300,
            clutter_points: 400,
            workspace: [4.0, 4.0, 2.0],
            num_classes: 4,
            feature_dim: 16,
            sigma_feature: 0.05,
            seed: 1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_gt[0] == 0 || self.num_gt[0] > self.num_gt[1] {
            return bad(format!(
                "num_gt range {:?} must satisfy 1 <= min <= max",
                self.num_gt
            ));
        }
        for a in 0..3 {
            if !(self.size_min[a] > 0.0 && self.size_min[a] <= self.size_max[a]) {
                return bad(format!(
                    "size range on axis {a} must satisfy 0 < min <= max"
                ));
            }
            if self.workspace[a].is_nan() || self.workspace[a] <= 0.0 {
                return bad("workspace extents must be positive".into());
            }
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.feature_dim < 3 + self.num_classes as usize {
            return bad(format!(
                "feature_dim {} too small for offset (3) + {} classes",
                self.feature_dim, self.num_classes
            ));
        }
        if self.sigma_feature.is_nan() || self.sigma_feature < 0.0 {
            return bad("sigma_feature must be >= 0".into());
        }
        let [w, l, h] = self.size_max;
        let reach = if self.yaw_enabled {
            (w * w + l * l).sqrt() / 2.0
        } else {
            w.max(l) / 2.0
        };
        if reach >= self.workspace[0].min(self.workspace[1]) || h > self.workspace[2] {
            return bad("workspace cannot contain the largest box".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub gt_boxes: Vec<OrientedBox>,
    pub points: Vec<Point3>,
    pub features: Vec<FeatureVec>,
    /// Owning box of each point; `None` for clutter.
    pub point_gt_labels: Vec<Option<usize>>,
}

fn gauss(rng: &mut impl Rng, sigma: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    sigma * z
}

fn place_box(
    cfg: &SceneConfig,
    rng: &mut impl Rng,
    placed: &[OrientedBox],
    index: usize,
) -> Result<OrientedBox> {
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let class_id = rng.random_range(0..cfg.num_classes);
        let lo = class_id as f64 / cfg.num_classes as f64;
        let hi = (class_id + 1) as f64 / cfg.num_classes as f64;
        let dims: [f64; 3] = std::array::from_fn(|a| {
            let t = rng.random_range(lo..hi);
            cfg.size_min[a] + t * (cfg.size_max[a] - cfg.size_min[a])
        });
        let yaw = if cfg.yaw_enabled {
            rng.random_range(-PI..PI)
        } else {
            0.0
        };
        let (s, c) = yaw.sin_cos();
        let reach_x = (c * dims[0]).abs() / 2.0 + (s * dims[1]).abs() / 2.0;
        let reach_y = (s * dims[0]).abs() / 2.0 + (c * dims[1]).abs() / 2.0;
        let [ex, ey, ez] = cfg.workspace;
        if reach_x >= ex || reach_y >= ey || dims[2] > ez {
            continue;
        }
        let center = Point3::new(
            rng.random_range(-ex + reach_x..ex - reach_x),
            rng.random_range(-ey + reach_y..ey - reach_y),
            dims[2] / 2.0 + rng.random_range(0.0..=(ez - dims[2])),
        );
        let bbox = OrientedBox::new(center, Size3::new(dims[0], dims[1], dims[2]), yaw)?
            .with_class(class_id);
        if placed.iter().all(|p| iou_rotated(p, &bbox) == 0.0) {
            return Ok(bbox);
        }
    }
    Err(Error::Placement {
        index,
        attempts: MAX_PLACEMENT_ATTEMPTS,
    })
}

fn surface_point(bbox: &OrientedBox, rng: &mut impl Rng) -> Point3 {
    let Size3 { w, l, h } = bbox.size;
    let areas = [l * h, w * h, w * l];
    let total = 2.0 * (areas[0] + areas[1] + areas[2]);
    let mut pick = rng.random_range(0.0..total);
    let mut face = 5;
    for f in 0..6 {
        if pick < areas[f / 2] {
            face = f;
            break;
        }
        pick -= areas[f / 2];
    }
    let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
    let u = |rng: &mut dyn rand::RngCore, half: f64| rng.random_range(-half..=half);
    let local = match face / 2 {
        0 => Point3::new(sign * w / 2.0, u(rng, l / 2.0), u(rng, h / 2.0)),
        1 => Point3::new(u(rng, w / 2.0), sign * l / 2.0, u(rng, h / 2.0)),
        _ => Point3::new(u(rng, w / 2.0), u(rng, l / 2.0), sign * h / 2.0),
    };
    bbox.to_world(&local)
}

fn object_feature(
    cfg: &SceneConfig,
    p: &Point3,
    bbox: &OrientedBox,
    rng: &mut impl Rng,
) -> FeatureVec {
    let offset = bbox.center.sub(p);
    let class = bbox.class_id.unwrap_or(0) as usize;
    let mut f = Vec::with_capacity(cfg.feature_dim);
    f.extend([offset.x, offset.y, offset.z]);
    f.extend((0..cfg.num_classes as usize).map(|k| if k == class { 1.0 } else { 0.0 }));
    f.resize(cfg.feature_dim, 0.0);
    for v in &mut f {
        *v += gauss(rng, cfg.sigma_feature);
    }
    FeatureVec(f)
}

/// Generates a scene; identical `(cfg, seed)` always give identical scenes.
pub fn gen_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.num_gt[0]..=cfg.num_gt[1]);
    let mut gt_boxes = Vec::with_capacity(n);
    for i in 0..n {
        let b = place_box(cfg, &mut rng, &gt_boxes, i)?;
        gt_boxes.push(b);
    }

    let mut points = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (t, b) in gt_boxes.iter().enumerate() {
        for _ in 0..cfg.points_per_box {
            let p = surface_point(b, &mut rng);
            features.push(object_feature(cfg, &p, b, &mut rng));
            points.push(p);
            labels.push(Some(t));
        }
    }
    let [ex, ey, ez] = cfg.workspace;
    for i in 0..cfg.clutter_points {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let p = Point3::new(
                rng.random_range(-ex..ex),
                rng.random_range(-ey..ey),
                rng.random_range(0.0..ez),
            );
            if !gt_boxes.iter().any(|b| b.contains(&p)) {
                placed = Some(p);
                break;
            }
        }
        let p = placed.ok_or(Error::Placement {
            index: n + i,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        let f = (0..cfg.feature_dim)
            .map(|_| gauss(&mut rng, cfg.sigma_feature))
            .collect();
        points.push(p);
        features.push(FeatureVec(f));
        labels.push(None);
    }

    Ok(SyntheticScene {
        gt_boxes,
        points,
        features,
        point_gt_labels: labels,
    })
}

/// Minimum number of scene points in a candidate's neighbourhood.
pub const MIN_SUPPORT: usize = 4;

fn voxel_key(p: &Point3, voxel_size: f64) -> [i64; 3] {
    [
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    ]
}

/// Stand-in for a generative sparse encoder. Every voxel within one step
/// (26-neighbourhood) of an occupied voxel becomes a candidate at its voxel
/// center `q`, provided at least [`MIN_SUPPORT`] points fall in its own
/// neighbourhood. Its feature is the neighbourhood mean with the offset
/// channels re-expressed relative to `q` (`f_offset + p - q`), as a
/// translation-equivariant convolution would. Output is in voxel-key order.
pub fn candidate_points(
    scene: &SyntheticScene,
    voxel_size: f64,
) -> Result<(Vec<Point3>, Vec<FeatureVec>)> {
    if voxel_size.is_nan() || voxel_size <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "voxel_size {voxel_size} must be positive"
        )));
    }
    let dim = scene.features.first().map_or(0, FeatureVec::dim);
    let offset_dims = dim.min(3);
    let mut occupied: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in scene.points.iter().enumerate() {
        occupied
            .entry(voxel_key(p, voxel_size))
            .or_default()
            .push(i);
    }
    let neighbours = |k: [i64; 3]| {
        (-1..=1).flat_map(move |dx| {
            (-1..=1).flat_map(move |dy| (-1..=1).map(move |dz| [k[0] + dx, k[1] + dy, k[2] + dz]))
        })
    };
    let cells: BTreeSet<[i64; 3]> = occupied.keys().flat_map(|&k| neighbours(k)).collect();

    let mut points = Vec::new();
    let mut features = Vec::new();
    for key in cells {
        let members: Vec<usize> = neighbours(key)
            .filter_map(|n| occupied.get(&n))
            .flatten()
            .copied()
            .collect();
        if members.len() < MIN_SUPPORT {
            continue;
        }
        let q = Point3::new(
            (key[0] as f64 + 0.5) * voxel_size,
            (key[1] as f64 + 0.5) * voxel_size,
            (key[2] as f64 + 0.5) * voxel_size,
        );
        let mut acc = vec![0.0; dim];
        for &i in &members {
            let p = &scene.points[i];
            let shift = [p.x - q.x, p.y - q.y, p.z - q.z];
            for (a, v) in scene.features[i].0.iter().enumerate() {
                acc[a] += v + if a < offset_dims { shift[a] } else { 0.0 };
            }
        }
        let k = members.len() as f64;
        points.push(q);
        features.push(FeatureVec(acc.into_iter().map(|v| v / k).collect()));
    }
    Ok((points, features))
}

/// Noise model of the oracle predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleNoise {
    /// Std-dev of the multiplicative `N(1, sigma)` factor on each delta.
    pub sigma_delta: f64,
    pub sigma_heading: f64,
    pub p_class_flip: f64,
    /// Std-dev of additive noise on the predicted centerness.
    pub centerness_bias: f64,
}

impl Default for OracleNoise {
    fn default() -> Self {
        Self {
            sigma_delta: 0.1,
            sigma_heading: 0.0,
            p_class_flip: 0.0,
            centerness_bias: 0.05,
        }
    }
}

impl OracleNoise {
    pub const EXACT: OracleNoise = OracleNoise {
        sigma_delta: 0.0,
        sigma_heading: 0.0,
        p_class_flip: 0.0,
        centerness_bias: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_delta >= 0.0
            && self.sigma_heading >= 0.0
            && self.centerness_bias >= 0.0
            && (0.0..1.0).contains(&self.p_class_flip);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid oracle noise {self:?}"
            )))
        }
    }
}

/// Predicts from ground truth with controlled noise.
///
/// Noise for a prediction is drawn from a generator keyed on the seed, the
/// stage and the proposal's coordinates, so the same query always gets the
/// same answer regardless of call order.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    gts: Vec<OrientedBox>,
    num_classes: u32,
    noise: OracleNoise,
    seed: u64,
}

pub fn oracle_predictor(
    scene: &SyntheticScene,
    num_classes: u32,
    noise: OracleNoise,
    seed: u64,
) -> Result<OraclePredictor> {
    noise.validate()?;
    if scene.gt_boxes.is_empty() {
        return Err(Error::EmptyInput("oracle needs at least one ground truth"));
    }
    if num_classes == 0
        || scene
            .gt_boxes
            .iter()
            .any(|g| g.class_id.unwrap_or(0) >= num_classes)
    {
        return Err(Error::InvalidConfig(
            "ground-truth class outside num_classes".into(),
        ));
    }
    Ok(OraclePredictor {
        gts: scene.gt_boxes.clone(),
        num_classes,
        noise,
        seed,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0u64, |h, &p| splitmix64(h ^ p))
}

impl Predictor for OraclePredictor {
    fn predict(&self, proposal: &Proposal, stage: usize) -> Prediction {
        let p = &proposal.point;
        let key = mix(&[
            self.seed,
            stage as u64,
            p.x.to_bits(),
            p.y.to_bits(),
            p.z.to_bits(),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let t = responsible_gt(p, &self.gts).expect("oracle has ground truth");
        let gt = &self.gts[t];
        let truth = encode_deltas(p, gt);

        let mut deltas = truth;
        for d in &mut deltas.d {
            *d *= 1.0 + gauss(&mut rng, self.noise.sigma_delta);
        }
        deltas.heading = gt.yaw + gauss(&mut rng, self.noise.sigma_heading);

        let mut class = gt.class_id.unwrap_or(0);
        let flip: f64 = rng.random();
        if self.num_classes > 1 && flip < self.noise.p_class_flip {
            let other = rng.random_range(0..self.num_classes - 1);
            class = if other >= class { other + 1 } else { other };
        }
        let mut class_probs = vec![0.0; self.num_classes as usize + 1];
        class_probs[class as usize] = 1.0;

        let c = (centerness(&truth) + gauss(&mut rng, self.noise.centerness_bias)).clamp(0.0, 1.0);
        Prediction {
            class_probs,
            deltas,
            centerness: c,
        }
    }
}
