//! Oriented 3D boxes and the point-based box parametrization.
//!
//! A box is regressed from a proposal point as six distances to its faces
//! plus a heading. For yawed boxes the point is first rotated into the box's
//! canonical frame (box axes aligned with x/y/z), where the face distances
//! are taken axis by axis.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for geometric comparisons, in scene units.
pub const EPS: f64 = 1e-9;

/// Denominators smaller than this are treated as points at infinity.
pub const PROJECTION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn sub(&self, other: &Point3) -> Point3 {
        Point3::new(self.x - other.x, self.y - other.y, self.z - other.z)
    }

    pub fn add(&self, other: &Point3) -> Point3 {
        Point3::new(self.x + other.x, self.y + other.y, self.z + other.z)
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        self.sub(other).norm()
    }

    /// Manhattan distance.
    pub fn l1_distance(&self, other: &Point3) -> f64 {
        (self.x - other.x).abs() + (self.y - other.y).abs() + (self.z - other.z).abs()
    }

    /// Rotates about the z-axis by `angle` radians.
    pub fn rotate_z(&self, angle: f64) -> Point3 {
        let (s, c) = angle.sin_cos();
        Point3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }
}

/// Box extents along the box's own x (width), y (length) and z (height) axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Size3 {
    pub w: f64,
    pub l: f64,
    pub h: f64,
}

impl Size3 {
    pub const fn new(w: f64, l: f64, h: f64) -> Self {
        Self { w, l, h }
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_yaw(angle: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut a = angle - two_pi * ((angle + PI) / two_pi).floor();
    if a >= PI {
        a -= two_pi;
    }
    if a < -PI {
        a = -PI;
    }
    a
}

/// A 7-DoF box (center, size, yaw about +z) with optional label and score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Point3,
    pub size: Size3,
    pub yaw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl OrientedBox {
    /// Builds a box, rejecting non-positive sizes and non-finite values.
    /// The yaw is wrapped into `[-pi, pi)`.
    pub fn new(center: Point3, size: Size3, yaw: f64) -> Result<Self> {
        if !center.is_finite() {
            return Err(Error::InvalidBox("non-finite center".into()));
        }
        if !(size.w > 0.0 && size.l > 0.0 && size.h > 0.0)
            || !(size.w.is_finite() && size.l.is_finite() && size.h.is_finite())
        {
            return Err(Error::InvalidBox(format!(
                "size ({}, {}, {}) must be positive and finite",
                size.w, size.l, size.h
            )));
        }
        if !yaw.is_finite() {
            return Err(Error::InvalidBox("non-finite yaw".into()));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
            class_id: None,
            score: None,
        })
    }

    /// Axis-aligned box; panics on invalid input, meant for literals and tests.
    pub fn axis_aligned(center: Point3, size: Size3) -> Self {
        Self::new(center, size, 0.0).expect("valid axis-aligned box")
    }

    pub fn with_class(mut self, class_id: u32) -> Self {
        self.class_id = Some(class_id);
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn volume(&self) -> f64 {
        self.size.volume()
    }

    /// Offset of `p` from the center, expressed in the box's canonical frame.
    pub fn to_local(&self, p: &Point3) -> Point3 {
        p.sub(&self.center).rotate_z(-self.yaw)
    }

    /// Inverse of [`OrientedBox::to_local`].
    pub fn to_world(&self, local: &Point3) -> Point3 {
        local.rotate_z(self.yaw).add(&self.center)
    }

    /// Bird's-eye-view footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let hw = self.size.w / 2.0;
        let hl = self.size.l / 2.0;
        let (s, c) = self.yaw.sin_cos();
        [(hw, hl), (-hw, hl), (-hw, -hl), (hw, -hl)]
            .map(|(x, y)| (self.center.x + c * x - s * y, self.center.y + s * x + c * y))
    }

    pub fn z_min(&self) -> f64 {
        self.center.z - self.size.h / 2.0
    }

    pub fn z_max(&self) -> f64 {
        self.center.z + self.size.h / 2.0
    }

    /// Ordinary inclusive membership (scale 0.5).
    pub fn contains(&self, p: &Point3) -> bool {
        point_in_scaled_box(p, self, 0.5)
    }
}

/// Face distances from a point to a box, measured in the box's canonical frame,
/// plus the box heading.
///
/// `d1`/`d2` are the distances to the +x/-x faces, `d3`/`d4` to the +y/-y faces
/// and `d5`/`d6` to the +z/-z faces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub d: [f64; 6],
    pub heading: f64,
}

impl Deltas {
    pub const fn new(d: [f64; 6], heading: f64) -> Self {
        Self { d, heading }
    }

    /// Box extents implied by the face distances.
    pub fn implied_size(&self) -> (f64, f64, f64) {
        (
            self.d[0] + self.d[1],
            self.d[2] + self.d[3],
            self.d[4] + self.d[5],
        )
    }

    /// Offset from the point to the box center in the canonical frame.
    pub fn local_center_offset(&self) -> Point3 {
        Point3::new(
            (self.d[0] - self.d[1]) / 2.0,
            (self.d[2] - self.d[3]) / 2.0,
            (self.d[4] - self.d[5]) / 2.0,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.d.iter().all(|v| v.is_finite()) && self.heading.is_finite()
    }
}

/// Regression target of `p` against `bbox`.
///
/// Points outside the box produce some negative distances.
pub fn encode_deltas(p: &Point3, bbox: &OrientedBox) -> Deltas {
    let local = bbox.to_local(p);
    let Size3 { w, l, h } = bbox.size;
    Deltas {
        d: [
            w / 2.0 - local.x,
            local.x + w / 2.0,
            l / 2.0 - local.y,
            local.y + l / 2.0,
            h / 2.0 - local.z,
            local.z + h / 2.0,
        ],
        heading: bbox.yaw,
    }
}

/// Reconstructs the box regressed from `p` with deltas `d`.
pub fn decode_box(p: &Point3, d: &Deltas) -> Result<OrientedBox> {
    let (w, l, h) = d.implied_size();
    if !(w > 0.0 && l > 0.0 && h > 0.0) || !d.is_finite() {
        return Err(Error::InvalidDeltas(w, l, h));
    }
    let center = p.add(&d.local_center_offset().rotate_z(d.heading));
    OrientedBox::new(center, Size3::new(w, l, h), d.heading)
}

/// Normalized closeness of the regressing point to the box center.
///
/// 1 at the center, 0 on a face or outside the box.
pub fn centerness(d: &Deltas) -> f64 {
    if d.d.iter().any(|&v| v.is_nan() || v <= EPS) {
        return 0.0;
    }
    let ratio = |a: f64, b: f64| a.min(b) / a.max(b);
    (ratio(d.d[0], d.d[1]) * ratio(d.d[2], d.d[3]) * ratio(d.d[4], d.d[5])).sqrt()
}

/// Moves a proposal point to the center of the box it regresses.
pub fn update_point(p: &Point3, d: &Deltas) -> Point3 {
    p.add(&d.local_center_offset().rotate_z(d.heading))
}

/// Inclusive test of `p` against the box with half-extents scaled to
/// `mu * (w, l, h)`. `mu = 0.5` is ordinary membership.
pub fn point_in_scaled_box(p: &Point3, bbox: &OrientedBox, mu: f64) -> bool {
    let local = bbox.to_local(p);
    local.x.abs() <= mu * bbox.size.w + EPS
        && local.y.abs() <= mu * bbox.size.l + EPS
        && local.z.abs() <= mu * bbox.size.h + EPS
}

/// Projective 3D-to-image mapping with nine parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraMap {
    psi: [f64; 9],
}

impl CameraMap {
    pub fn new(psi: [f64; 9]) -> Result<Self> {
        if psi[6] == 0.0 && psi[7] == 0.0 && psi[8] == 0.0 {
            return Err(Error::InvalidCamera);
        }
        Ok(Self { psi })
    }

    pub fn psi(&self) -> &[f64; 9] {
        &self.psi
    }
}

/// Image coordinates `(u, v)` of `p`.
pub fn project_point(p: &Point3, cam: &CameraMap) -> Result<(f64, f64)> {
    let s = &cam.psi;
    let den = s[6] * p.x + s[7] * p.y + s[8] * p.z;
    if den.abs() < PROJECTION_EPS {
        return Err(Error::BehindCamera(den));
    }
    let u = (s[0] * p.x + s[1] * p.y + s[2] * p.z) / den;
    let v = (s[3] * p.x + s[4] * p.y + s[5] * p.z) / den;
    Ok((u, v))
}
