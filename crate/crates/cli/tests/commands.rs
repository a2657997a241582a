use std::path::Path;
use std::process::{Command, Output};

use cascadev_cli::format::{ApReport, DetectionsFile, SceneFile, TraceFile};
use serde::de::DeserializeOwned;

fn cascadev(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascadev"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = cascadev(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read<T: DeserializeOwned>(p: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn default_gen_writes_one_scene() {
    let d = tempfile::tempdir().unwrap();
    ok(&["gen", "--seed", "1", "--out", s(d.path())]);
    let names: Vec<_> = std::fs::read_dir(d.path().join("scenes"))
        .unwrap()
        .collect();
    assert_eq!(names.len(), 1);
    let sf: SceneFile = read(&d.path().join("scenes/scene_0000.json"));
    assert_eq!(sf.seed, 1);
    assert!(!sf.scene.gt_boxes.is_empty());
}

#[test]
fn regenerating_is_byte_identical_and_respects_gt_range() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "num_scenes = 6\n[scene]\nnum_gt = [2, 4]\n");
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&["gen", "--config", &cfg, "--seed", "3", "--out", s(&a)]);
    ok(&["gen", "--config", &cfg, "--seed", "3", "--out", s(&b)]);
    for i in 0..6 {
        let name = format!("scenes/scene_{i:04}.json");
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap()
        );
        let sf: SceneFile = read(&a.join(&name));
        assert!((2..=4).contains(&sf.scene.gt_boxes.len()));
        assert_eq!(sf.seed, 3 + i as u64);
    }
    assert_eq!(
        std::fs::read(a.join("manifest.json")).unwrap(),
        std::fs::read(b.join("manifest.json")).unwrap()
    );
}

#[test]
fn stage_count_follows_flag_and_exact_oracle_scores_one() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        "num_scenes = 3\n[oracle]\nsigma_delta = 0.0\nsigma_heading = 0.0\np_class_flip = 0.0\ncenterness_bias = 0.0\n",
    );
    let gen = d.path().join("gen");
    ok(&["gen", "--config", &cfg, "--seed", "2", "--out", s(&gen)]);
    for stages in ["1", "3"] {
        let run = d.path().join(format!("run{stages}"));
        let eval = d.path().join(format!("eval{stages}"));
        ok(&[
            "run",
            "--scenes",
            s(&gen),
            "--config",
            &cfg,
            "--stages",
            stages,
            "--out",
            s(&run),
        ]);
        ok(&[
            "eval",
            "--traces",
            s(&run),
            "--config",
            &cfg,
            "--out",
            s(&eval),
        ]);
        let t: TraceFile = read(&run.join("traces/trace_0000.json"));
        assert_eq!(t.trace.stages.len().to_string(), stages);
        let dets: DetectionsFile = read(&run.join("detections/detections_0000.json"));
        assert!(!dets.detections.is_empty());
        let stats = std::fs::read_to_string(eval.join("stats.csv")).unwrap();
        assert_eq!(stats.lines().count() - 1, stages.parse::<usize>().unwrap());
        let ap: ApReport = read(&eval.join("ap.json"));
        assert_eq!(ap.num_scenes, 3);
        assert!(ap.results.iter().all(|r| r.map == 1.0), "{:?}", ap.results);
    }
}

#[test]
fn training_writes_one_loss_row_per_step() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        "num_scenes = 2\n[train]\nsteps = 7\nbatch_size = 1\n",
    );
    let gen = d.path().join("gen");
    let train = d.path().join("train");
    ok(&["gen", "--config", &cfg, "--out", s(&gen)]);
    ok(&[
        "train",
        "--scenes",
        s(&gen),
        "--config",
        &cfg,
        "--out",
        s(&train),
    ]);
    let csv = std::fs::read_to_string(train.join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("step,s1_cls"));
    assert_eq!(lines.count(), 7);
    assert!(train.join("model.json").exists());
}

#[test]
fn schema_mismatch_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    let gen = d.path().join("gen");
    ok(&["gen", "--out", s(&gen)]);
    let p = gen.join("scenes/scene_0000.json");
    let text = std::fs::read_to_string(&p)
        .unwrap()
        .replacen("\"1.0\"", "\"2.0\"", 1);
    std::fs::write(&p, text).unwrap();
    let out = cascadev(&[
        "run",
        "--scenes",
        s(&gen),
        "--out",
        s(&d.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exit_codes_for_bad_config_missing_input_and_divergence() {
    let d = tempfile::tempdir().unwrap();
    let out = cascadev(&[
        "gen",
        "--mu-max",
        "0.1",
        "--mu-min",
        "0.4",
        "--out",
        s(d.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = cascadev(&[
        "run",
        "--scenes",
        s(&d.path().join("none")),
        "--out",
        s(&d.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let cfg = write_config(
        d.path(),
        "num_scenes = 2\n[train]\nsteps = 50\nlr = 1e307\n",
    );
    let gen = d.path().join("gen");
    ok(&["gen", "--config", &cfg, "--out", s(&gen)]);
    let out = cascadev(&[
        "train",
        "--scenes",
        s(&gen),
        "--config",
        &cfg,
        "--out",
        s(&d.path().join("t")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
