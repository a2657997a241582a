//! Instance-aware voting: each proposal re-aggregates the features of the
//! proposal points lying inside its own predicted box, weighted by distance
//! to its updated point. Points outside the box never contribute.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_in_scaled_box, OrientedBox, Point3};

/// Dense per-proposal feature vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVec(pub Vec<f64>);

impl FeatureVec {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for FeatureVec {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Distance weighting applied before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `exp(-d)`: nearer points weigh more.
    #[default]
    ExpNegDist,
    /// `-exp(d)` taken verbatim; after normalization farther points weigh more.
    Literal,
}

impl Weighting {
    pub fn weight(self, distance: f64) -> f64 {
        match self {
            Weighting::ExpNegDist => (-distance).exp(),
            Weighting::Literal => -distance.exp(),
        }
    }
}

impl std::str::FromStr for Weighting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "exp_neg_dist" => Ok(Weighting::ExpNegDist),
            "literal" => Ok(Weighting::Literal),
            other => Err(format!("unknown weighting '{other}'")),
        }
    }
}

fn check_dims(features: &[FeatureVec], dim: usize) -> Result<()> {
    match features.iter().find(|f| f.dim() != dim) {
        Some(f) => Err(Error::DimensionMismatch {
            expected: dim,
            got: f.dim(),
        }),
        None => Ok(()),
    }
}

/// Re-aggregates features for every proposal.
///
/// `updated_points[i]` and `predicted_boxes[i]` describe proposal `i`; a
/// `None` box means the proposal produced no valid box and keeps its prior
/// feature. Proposals whose box contains no source point also keep
/// `prior_features[i]`.
pub fn ia_voting(
    updated_points: &[Point3],
    predicted_boxes: &[Option<OrientedBox>],
    source_points: &[Point3],
    source_features: &[FeatureVec],
    prior_features: &[FeatureVec],
    weighting: Weighting,
) -> Result<Vec<FeatureVec>> {
    let misaligned = |what, left, right| Error::Misaligned { what, left, right };
    if updated_points.len() != predicted_boxes.len() {
        return Err(misaligned(
            "updated points vs boxes",
            updated_points.len(),
            predicted_boxes.len(),
        ));
    }
    if updated_points.len() != prior_features.len() {
        return Err(misaligned(
            "updated points vs prior features",
            updated_points.len(),
            prior_features.len(),
        ));
    }
    if source_points.len() != source_features.len() {
        return Err(misaligned(
            "source points vs features",
            source_points.len(),
            source_features.len(),
        ));
    }
    let Some(dim) = source_features
        .first()
        .or(prior_features.first())
        .map(FeatureVec::dim)
    else {
        return Ok(Vec::new());
    };
    check_dims(source_features, dim)?;
    check_dims(prior_features, dim)?;

    let mut out = Vec::with_capacity(updated_points.len());
    for ((p_new, bbox), prior) in updated_points
        .iter()
        .zip(predicted_boxes)
        .zip(prior_features)
    {
        let Some(bbox) = bbox else {
            out.push(prior.clone());
            continue;
        };
        let mut acc = vec![0.0; dim];
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        let mut total = 0.0;
        for (p_src, f_src) in source_points.iter().zip(source_features) {
            if !point_in_scaled_box(p_src, bbox, 0.5) {
                continue;
            }
            let w = weighting.weight(p_new.distance(p_src));
            total += w;
            for (k, v) in f_src.0.iter().enumerate() {
                acc[k] += w * v;
                lo[k] = lo[k].min(*v);
                hi[k] = hi[k].max(*v);
            }
        }
        if total == 0.0 {
            out.push(prior.clone());
        } else {
            // The clamp only removes rounding error; it keeps the result in
            // the hull of the masked features exactly.
            out.push(FeatureVec(
                (0..dim)
                    .map(|k| (acc[k] / total).clamp(lo[k], hi[k]))
                    .collect(),
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Size3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box(c: Point3) -> OrientedBox {
        OrientedBox::axis_aligned(c, Size3::new(1.0, 1.0, 1.0))
    }

    #[test]
    fn own_point_only_returns_its_feature() {
        let src = [Point3::ORIGIN, Point3::new(4.0, 0.0, 0.0)];
        let feats = [FeatureVec(vec![1.0, 2.0]), FeatureVec(vec![9.0, 9.0])];
        let out = ia_voting(
            &[Point3::new(0.1, 0.0, 0.0)],
            &[Some(unit_box(Point3::ORIGIN))],
            &src,
            &feats,
            &[FeatureVec(vec![0.0, 0.0])],
            Weighting::ExpNegDist,
        )
        .unwrap();
        assert_eq!(out[0], FeatureVec(vec![1.0, 2.0]));
    }

    #[test]
    fn equidistant_points_average() {
        let src = [Point3::new(-0.3, 0.0, 0.0), Point3::new(0.3, 0.0, 0.0)];
        let feats = [FeatureVec(vec![1.0, 0.0]), FeatureVec(vec![3.0, 4.0])];
        for weighting in [Weighting::ExpNegDist, Weighting::Literal] {
            let out = ia_voting(
                &[Point3::ORIGIN],
                &[Some(unit_box(Point3::ORIGIN))],
                &src,
                &feats,
                &[FeatureVec::zeros(2)],
                weighting,
            )
            .unwrap();
            assert!((out[0].0[0] - 2.0).abs() < 1e-12);
            assert!((out[0].0[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mask_keeps_prior() {
        let prior = FeatureVec(vec![7.0]);
        let out = ia_voting(
            &[Point3::ORIGIN],
            &[Some(unit_box(Point3::ORIGIN))],
            &[Point3::new(5.0, 5.0, 5.0)],
            &[FeatureVec(vec![1.0])],
            std::slice::from_ref(&prior),
            Weighting::ExpNegDist,
        )
        .unwrap();
        assert_eq!(out[0], prior);
        let out = ia_voting(
            &[Point3::ORIGIN],
            &[None],
            &[Point3::ORIGIN],
            &[FeatureVec(vec![1.0])],
            std::slice::from_ref(&prior),
            Weighting::ExpNegDist,
        )
        .unwrap();
        assert_eq!(out[0], prior);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = ia_voting(
            &[Point3::ORIGIN],
            &[Some(unit_box(Point3::ORIGIN))],
            &[Point3::ORIGIN, Point3::ORIGIN],
            &[FeatureVec(vec![1.0]), FeatureVec(vec![1.0, 2.0])],
            &[FeatureVec(vec![0.0])],
            Weighting::ExpNegDist,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn literal_weighting_favours_far_points() {
        let src = [Point3::new(0.05, 0.0, 0.0), Point3::new(0.45, 0.0, 0.0)];
        let feats = [FeatureVec(vec![0.0]), FeatureVec(vec![1.0])];
        let run = |w| {
            ia_voting(
                &[Point3::ORIGIN],
                &[Some(unit_box(Point3::ORIGIN))],
                &src,
                &feats,
                &[FeatureVec::zeros(1)],
                w,
            )
            .unwrap()[0]
                .0[0]
        };
        assert!(run(Weighting::ExpNegDist) < 0.5);
        assert!(run(Weighting::Literal) > 0.5);
    }

    #[test]
    fn permutation_of_sources_is_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src: Vec<Point3> = (0..12)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let feats: Vec<FeatureVec> = (0..12)
            .map(|_| FeatureVec(vec![rng.random(), rng.random()]))
            .collect();
        let bx = [Some(
            OrientedBox::new(Point3::ORIGIN, Size3::new(1.5, 1.2, 1.4), 0.4).unwrap(),
        )];
        let a = ia_voting(
            &[Point3::ORIGIN],
            &bx,
            &src,
            &feats,
            &[FeatureVec::zeros(2)],
            Weighting::ExpNegDist,
        )
        .unwrap();
        let (mut rs, mut rf) = (src.clone(), feats.clone());
        rs.reverse();
        rf.reverse();
        let b = ia_voting(
            &[Point3::ORIGIN],
            &bx,
            &rs,
            &rf,
            &[FeatureVec::zeros(2)],
            Weighting::ExpNegDist,
        )
        .unwrap();
        for (x, y) in a[0].0.iter().zip(&b[0].0) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
