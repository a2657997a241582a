use cascadev_core::{ia_voting, FeatureVec, OrientedBox, Point3, Size3, Weighting};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_box(rng: &mut impl Rng) -> OrientedBox {
    OrientedBox::new(
        Point3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ),
        Size3::new(
            rng.random_range(0.5..2.5),
            rng.random_range(0.5..2.5),
            rng.random_range(0.5..2.5),
        ),
        rng.random_range(-3.0..3.0),
    )
    .unwrap()
}

fn random_point(rng: &mut impl Rng, r: f64) -> Point3 {
    Point3::new(
        rng.random_range(-r..r),
        rng.random_range(-r..r),
        rng.random_range(-r..r),
    )
}

/// Inside test written from scratch: undo the translation, rotate by -yaw.
fn inside(p: &Point3, b: &OrientedBox) -> bool {
    let (dx, dy, dz) = (p.x - b.center.x, p.y - b.center.y, p.z - b.center.z);
    let (s, c) = b.yaw.sin_cos();
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    lx.abs() <= b.size.w / 2.0 + 1e-9
        && ly.abs() <= b.size.l / 2.0 + 1e-9
        && dz.abs() <= b.size.h / 2.0 + 1e-9
}

fn brute_force(
    p_new: &Point3,
    b: &OrientedBox,
    src: &[Point3],
    feats: &[FeatureVec],
    prior: &FeatureVec,
) -> Vec<f64> {
    let dim = prior.0.len();
    let mut num = vec![0.0; dim];
    let mut den = 0.0;
    for j in 0..src.len() {
        if !inside(&src[j], b) {
            continue;
        }
        let d = ((p_new.x - src[j].x).powi(2)
            + (p_new.y - src[j].y).powi(2)
            + (p_new.z - src[j].z).powi(2))
        .sqrt();
        let w = (-d).exp();
        den += w;
        for (n, f) in num.iter_mut().zip(&feats[j].0) {
            *n += w * f;
        }
    }
    if den == 0.0 {
        prior.0.clone()
    } else {
        num.iter().map(|v| v / den).collect()
    }
}

fn random_features(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<FeatureVec> {
    (0..n)
        .map(|_| FeatureVec((0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()))
        .collect()
}

#[test]
fn matches_direct_double_loop_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut nonempty = 0;
    for _ in 0..1000 {
        let n_prop = rng.random_range(1..4);
        let src: Vec<Point3> = (0..10).map(|_| random_point(&mut rng, 1.5)).collect();
        let feats = random_features(&mut rng, 10, 6);
        let upd: Vec<Point3> = (0..n_prop).map(|_| random_point(&mut rng, 1.0)).collect();
        let boxes: Vec<Option<OrientedBox>> =
            (0..n_prop).map(|_| Some(random_box(&mut rng))).collect();
        let prior = random_features(&mut rng, n_prop, 6);
        let out = ia_voting(&upd, &boxes, &src, &feats, &prior, Weighting::ExpNegDist).unwrap();
        for i in 0..n_prop {
            let b = boxes[i].as_ref().unwrap();
            if src.iter().any(|p| inside(p, b)) {
                nonempty += 1;
            }
            let expect = brute_force(&upd[i], b, &src, &feats, &prior[i]);
            for (a, e) in out[i].0.iter().zip(&expect) {
                worst = worst.max((a - e).abs());
            }
        }
    }
    assert!(nonempty > 500, "too few non-empty masks ({nonempty})");
    assert!(worst <= 1e-12, "max deviation {worst}");
}

#[test]
fn output_lies_in_hull_of_masked_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let src: Vec<Point3> = (0..12).map(|_| random_point(&mut rng, 1.5)).collect();
        let feats = random_features(&mut rng, 12, 4);
        let b = random_box(&mut rng);
        let p = random_point(&mut rng, 1.0);
        let out = ia_voting(
            &[p],
            &[Some(b)],
            &src,
            &feats,
            &[FeatureVec::zeros(4)],
            Weighting::ExpNegDist,
        )
        .unwrap();
        let masked: Vec<&FeatureVec> = src
            .iter()
            .zip(&feats)
            .filter(|(q, _)| inside(q, &b))
            .map(|(_, f)| f)
            .collect();
        if masked.is_empty() {
            assert_eq!(out[0], FeatureVec::zeros(4));
            continue;
        }
        for k in 0..4 {
            let lo = masked.iter().map(|f| f.0[k]).fold(f64::INFINITY, f64::min);
            let hi = masked
                .iter()
                .map(|f| f.0[k])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                out[0].0[k] >= lo && out[0].0[k] <= hi,
                "{} outside [{lo}, {hi}]",
                out[0].0[k]
            );
        }
    }
}

#[test]
fn points_outside_the_box_have_no_influence() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let src: Vec<Point3> = (0..12).map(|_| random_point(&mut rng, 2.0)).collect();
        let feats = random_features(&mut rng, 12, 4);
        let b = random_box(&mut rng);
        let p = random_point(&mut rng, 1.0);
        let prior = [FeatureVec::zeros(4)];
        let base = ia_voting(
            &[p],
            &[Some(b)],
            &src,
            &feats,
            &prior,
            Weighting::ExpNegDist,
        )
        .unwrap();
        let mut scrambled = feats.clone();
        for (q, f) in src.iter().zip(&mut scrambled) {
            if !inside(q, &b) {
                *f = FeatureVec(vec![1e6; 4]);
            }
        }
        let again = ia_voting(
            &[p],
            &[Some(b)],
            &src,
            &scrambled,
            &prior,
            Weighting::ExpNegDist,
        )
        .unwrap();
        assert_eq!(base, again);
    }
}

#[test]
fn voting_reduces_feature_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let b = OrientedBox::axis_aligned(Point3::ORIGIN, Size3::new(2.0, 2.0, 2.0));
    let truth: Vec<f64> = (0..8).map(|k| k as f64 * 0.5).collect();
    let trials = 1000;
    let mut diffs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let src: Vec<Point3> = (0..10).map(|_| random_point(&mut rng, 1.0)).collect();
        let feats: Vec<FeatureVec> = (0..10)
            .map(|_| {
                FeatureVec(
                    truth
                        .iter()
                        .map(|t| t + 0.3 * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            })
            .collect();
        let out = ia_voting(
            &[src[0]],
            &[Some(b)],
            &src,
            &feats,
            &[feats[0].clone()],
            Weighting::ExpNegDist,
        )
        .unwrap();
        let sq = |f: &FeatureVec| {
            f.0.iter()
                .zip(&truth)
                .map(|(a, t)| (a - t).powi(2))
                .sum::<f64>()
        };
        diffs.push(sq(&feats[0]) - sq(&out[0]));
    }
    let n = trials as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    // One-sided 95% bound on the mean MSE reduction.
    assert!(
        mean - 1.645 * sd / n.sqrt() > 0.0,
        "mean reduction {mean}, sd {sd}"
    );
}
