//! Seeded inputs shared by the benchmarks in `benches/`.

use cascadev_core::{Detection, OrientedBox, Point3, Size3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(rng: &mut impl Rng, extent: f64) -> OrientedBox {
    let center = Point3::new(
        rng.random_range(-extent..extent),
        rng.random_range(-extent..extent),
        rng.random_range(0.0..extent),
    );
    let size = Size3::new(
        rng.random_range(0.3..2.0),
        rng.random_range(0.3..2.0),
        rng.random_range(0.3..2.0),
    );
    OrientedBox::new(center, size, rng.random_range(-3.1..3.1)).expect("positive size")
}

/// `n` detections over `classes` classes, clustered so NMS has work to do.
pub fn random_detections(n: usize, classes: u32, seed: u64) -> Vec<Detection> {
    let mut rng = rng(seed);
    (0..n)
        .map(|_| Detection {
            bbox: random_box(&mut rng, 3.0),
            score: rng.random_range(0.0..1.0),
            class_id: rng.random_range(0..classes),
            stage: 1,
        })
        .collect()
}

pub fn random_points(n: usize, extent: f64, seed: u64) -> Vec<Point3> {
    let mut rng = rng(seed);
    (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
            )
        })
        .collect()
}
