//! `gen`, `run`, `eval` and `train`. Scenes are processed on a worker pool;
//! every output file has one writer and results are merged in scene order,
//! so artifacts do not depend on the worker count.

use std::fs;
use std::path::{Path, PathBuf};

use cascadev_core::eval::{average_precision_scenes, cascade_stats, ApOptions, EvalScene};
use cascadev_core::{
    gen_scene, oracle_predictor, run_scene, train_cascade, HeadPredictor, SyntheticScene,
};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::format::{
    detections_name, loss_csv, read_json, scene_name, trace_name, write_json, write_text, ApReport,
    DetectionsFile, Manifest, ModelFile, SceneFile, TraceFile, SCHEMA_VERSION,
};
use crate::CliError;

pub const THREADS_ENV: &str = "CASCADEV_THREADS";

/// Worker pool capped by `CASCADEV_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().ok().filter(|n| *n >= 1).ok_or_else(|| {
            CliError::Config(format!(
                "{THREADS_ENV} must be a positive integer, got '{v}'"
            ))
        })?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Config(e.to_string()))
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    files: Vec<String>,
) -> Result<(), CliError> {
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION.into(),
        command: command.into(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        files,
    };
    write_json(&out.join("manifest.json"), &manifest)
}

/// Files in `dir` named `<prefix>NNNN.json`, sorted by name.
fn numbered_files(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>, CliError> {
    let entries =
        fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(prefix) && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Reads every scene file under `dir/scenes`, in index order.
pub fn load_scenes(dir: &Path) -> Result<Vec<SceneFile>, CliError> {
    let paths = numbered_files(&dir.join("scenes"), "scene_")?;
    if paths.is_empty() {
        return Err(CliError::Data(format!(
            "no scene files under {}",
            dir.join("scenes").display()
        )));
    }
    paths.iter().map(|p| read_json::<SceneFile>(p)).collect()
}

/// Writes `cfg.num_scenes` scenes to `out/scenes` and a manifest.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Vec<String>, CliError> {
    cfg.validate()?;
    let pool = thread_pool()?;
    let scenes: Vec<Result<SyntheticScene, _>> = pool.install(|| {
        (0..cfg.num_scenes)
            .into_par_iter()
            .map(|i| gen_scene(&cfg.scene, cfg.scene_seed(i)))
            .collect()
    });
    let mut files = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.into_iter().enumerate() {
        let name = format!("scenes/{}", scene_name(i));
        let file = SceneFile {
            schema_version: SCHEMA_VERSION.into(),
            index: i,
            seed: cfg.scene_seed(i),
            scene: scene?,
        };
        write_json(&out.join(&name), &file)?;
        files.push(name);
    }
    write_manifest(out, "gen", cfg, files.clone())?;
    Ok(files)
}

/// Runs the cascade on every scene under `scenes_dir` with the oracle, or
/// with trained heads when `model` is given.
pub fn cmd_run(
    cfg: &RunConfig,
    scenes_dir: &Path,
    model: Option<&Path>,
    out: &Path,
) -> Result<Vec<String>, CliError> {
    cfg.validate()?;
    let scenes = load_scenes(scenes_dir)?;
    let model = model.map(read_json::<ModelFile>).transpose()?;
    if let Some(m) = &model {
        let dim = scenes[0].scene.features.first().map_or(0, |f| f.dim());
        if m.params.feature_dim != dim {
            return Err(CliError::Data(format!(
                "model expects feature dimension {}, scenes have {dim}",
                m.params.feature_dim
            )));
        }
    }
    let pool = thread_pool()?;
    let runs: Vec<Result<_, CliError>> = pool.install(|| {
        scenes
            .par_iter()
            .map(|sf| {
                let run = match &model {
                    Some(m) => {
                        run_scene(&sf.scene, &HeadPredictor(&m.params), &cfg.pipeline, true)?
                    }
                    None => {
                        let oracle = oracle_predictor(
                            &sf.scene,
                            cfg.scene.num_classes,
                            cfg.oracle,
                            sf.seed,
                        )?;
                        run_scene(&sf.scene, &oracle, &cfg.pipeline, true)?
                    }
                };
                Ok((sf.index, run))
            })
            .collect()
    });
    let mut files = Vec::new();
    for r in runs {
        let (index, run) = r?;
        let trace_path = format!("traces/{}", trace_name(index));
        write_json(
            &out.join(&trace_path),
            &TraceFile {
                schema_version: SCHEMA_VERSION.into(),
                index,
                trace: run.trace,
            },
        )?;
        let det_path = format!("detections/{}", detections_name(index));
        write_json(
            &out.join(&det_path),
            &DetectionsFile {
                schema_version: SCHEMA_VERSION.into(),
                index,
                detections: run.detections,
            },
        )?;
        files.push(trace_path);
        files.push(det_path);
    }
    write_manifest(out, "run", cfg, files.clone())?;
    Ok(files)
}

/// Scores a `run` output directory: `ap.json` (one result per threshold)
/// and `stats.csv` (one row per stage).
pub fn cmd_eval(cfg: &RunConfig, run_dir: &Path, out: &Path) -> Result<ApReport, CliError> {
    cfg.validate()?;
    let trace_paths = numbered_files(&run_dir.join("traces"), "trace_")?;
    let det_paths = numbered_files(&run_dir.join("detections"), "detections_")?;
    if trace_paths.is_empty() {
        return Err(cascadev_core::Error::EmptyInput("no trace files").into());
    }
    if trace_paths.len() != det_paths.len() {
        return Err(CliError::Data(format!(
            "{} trace files but {} detection files",
            trace_paths.len(),
            det_paths.len()
        )));
    }
    let traces: Vec<TraceFile> = trace_paths
        .iter()
        .map(|p| read_json(p))
        .collect::<Result<_, _>>()?;
    let dets: Vec<DetectionsFile> = det_paths
        .iter()
        .map(|p| read_json(p))
        .collect::<Result<_, _>>()?;
    let mut eval_scenes = Vec::with_capacity(traces.len());
    for (t, d) in traces.iter().zip(&dets) {
        if t.index != d.index {
            return Err(CliError::Data(format!(
                "trace {} paired with detections {}",
                t.index, d.index
            )));
        }
        let gts = t
            .trace
            .gts
            .as_deref()
            .ok_or_else(|| CliError::Data(format!("trace {} has no ground truth", t.index)))?;
        eval_scenes.push(EvalScene {
            detections: &d.detections,
            gts,
        });
    }
    let opts = ApOptions {
        iou: cfg.eval.iou,
        interpolation: cfg.eval.ap,
    };
    let report = ApReport {
        schema_version: SCHEMA_VERSION.into(),
        num_scenes: eval_scenes.len(),
        results: cfg
            .eval
            .thresholds
            .iter()
            .map(|&thr| average_precision_scenes(&eval_scenes, thr, opts))
            .collect(),
    };
    let all: Vec<_> = traces.into_iter().map(|t| t.trace).collect();
    let stats = cascade_stats(&all)?;
    write_json(&out.join("ap.json"), &report)?;
    write_text(&out.join("stats.csv"), &stats.to_csv())?;
    write_manifest(out, "eval", cfg, vec!["ap.json".into(), "stats.csv".into()])?;
    Ok(report)
}

/// Trains stage heads on the scenes under `scenes_dir`; writes `model.json`
/// and `loss.csv`.
pub fn cmd_train(cfg: &RunConfig, scenes_dir: &Path, out: &Path) -> Result<Vec<String>, CliError> {
    cfg.validate()?;
    let scenes: Vec<SyntheticScene> = load_scenes(scenes_dir)?
        .into_iter()
        .map(|s| s.scene)
        .collect();
    let (params, history) = train_cascade(&scenes, &cfg.pipeline, &cfg.train)?;
    write_json(
        &out.join("model.json"),
        &ModelFile {
            schema_version: SCHEMA_VERSION.into(),
            config_hash: cfg.hash(),
            params,
        },
    )?;
    write_text(&out.join("loss.csv"), &loss_csv(&history))?;
    let files = vec!["model.json".to_string(), "loss.csv".to_string()];
    write_manifest(out, "train", cfg, files.clone())?;
    Ok(files)
}
