//! Short seeded training runs.

use cascadev_core::assignment::responsible_gt;
use cascadev_core::{
    assign_targets, centerness, encode_deltas, gen_scene, run_scene, train_cascade, CpaSchedule,
    HeadPredictor, PipelineConfig, SceneConfig, SyntheticScene, TrainConfig,
};

fn scenes(cfg: &SceneConfig, seeds: std::ops::Range<u64>) -> Vec<SyntheticScene> {
    seeds.map(|s| gen_scene(cfg, s).unwrap()).collect()
}

fn short(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        ..TrainConfig::default()
    }
}

#[test]
fn trajectory_is_seed_deterministic_and_losses_are_non_negative() {
    let train = scenes(&SceneConfig::default(), 0..8);
    let pipeline = PipelineConfig::default();
    let (pa, ha) = train_cascade(&train, &pipeline, &short(20)).unwrap();
    let (pb, hb) = train_cascade(&train, &pipeline, &short(20)).unwrap();
    assert_eq!(pa, pb);
    assert_eq!(ha, hb);
    for report in &ha {
        for s in &report.stages {
            assert!(
                s.cls >= 0.0 && s.reg >= 0.0 && s.ctr >= 0.0 && s.total >= 0.0,
                "{s:?}"
            );
        }
    }
    let other = TrainConfig {
        seed: 1,
        ..short(20)
    };
    assert_ne!(train_cascade(&train, &pipeline, &other).unwrap().1, ha);
}

#[test]
fn small_single_threshold_starves_positives_at_step_zero() {
    let sparse = SceneConfig {
        points_per_box: 100,
        ..SceneConfig::default()
    };
    let train = scenes(&sparse, 0..100);
    let tc = TrainConfig {
        steps: 1,
        batch_size: 100,
        ..TrainConfig::default()
    };
    let positives = |schedule: CpaSchedule| {
        let pipeline = PipelineConfig {
            schedule,
            ..PipelineConfig::default()
        };
        train_cascade(&train, &pipeline, &tc).unwrap().1[0].stages[0].positives
    };
    let cpa = positives(CpaSchedule::default());
    let single = positives(CpaSchedule {
        mu_max: 0.2,
        mu_min: 0.2,
        num_stages: 1,
    });
    assert!(cpa >= 5 * single.max(1), "cpa {cpa}, single 0.2 {single}");
}

#[test]
fn later_stage_positives_are_more_central_after_training() {
    let train = scenes(&SceneConfig::default(), 0..40);
    let held_out = scenes(&SceneConfig::default(), 500..520);
    let pipeline = PipelineConfig::default();
    let (params, _) = train_cascade(&train, &pipeline, &short(200)).unwrap();
    let sched = pipeline.schedule;
    let (mut first, mut last) = ((0.0, 0usize), (0.0, 0usize));
    for s in &held_out {
        let run = run_scene(s, &HeadPredictor(&params), &pipeline, true).unwrap();
        for (l, rec) in run.trace.stages.iter().enumerate() {
            if l != 0 && l != sched.num_stages - 1 {
                continue;
            }
            let points: Vec<_> = rec
                .proposals
                .iter()
                .filter(|p| !p.is_denoising)
                .map(|p| p.point)
                .collect();
            let mu = cascadev_core::cpa_threshold(l + 1, &sched).unwrap();
            for (p, t) in points
                .iter()
                .zip(&assign_targets(&points, &s.gt_boxes, mu).targets)
            {
                if !t.is_positive() {
                    continue;
                }
                let gt = &s.gt_boxes[responsible_gt(p, &s.gt_boxes).unwrap()];
                let acc = if l == 0 { &mut first } else { &mut last };
                acc.0 += centerness(&encode_deltas(p, gt));
                acc.1 += 1;
            }
        }
    }
    assert!(first.1 > 0 && last.1 > 0);
    assert!(
        last.0 / last.1 as f64 > first.0 / first.1 as f64,
        "{first:?} {last:?}"
    );
}
