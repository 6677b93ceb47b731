//! Implementations behind the command-line subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use davel_tensor::ParamStore;
use serde::Serialize;

use crate::config::{ModelConfig, RunConfig};
use crate::data::{
    annotation_path, feature_paths, generate_dataset, load_features, load_split, read_annotations, save_dataset, Split,
    VideoSample,
};
use crate::error::{io_err, Error, Result};
use crate::eval::{EvalReport, VideoDetections};
use crate::infer::{attention_maps, detect, evaluate, Inference};
use crate::model::{AttentionMap, Model};
use crate::train::{train, EpochSummary, TrainOutcome};

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const ROUTES_FILE: &str = "routes.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Writes the default run configuration as pretty JSON.
pub fn config_init(path: Option<&Path>) -> Result<String> {
    let text = serde_json::to_string_pretty(&RunConfig::default())? + "\n";
    if let Some(p) = path {
        write_text(p, &text)?;
    }
    Ok(text)
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    RunConfig::from_json(&text)
}

/// Generates the synthetic corpus into `out`; returns the number of videos.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let data = generate_dataset(&cfg.synth)?;
    create_dir(out)?;
    save_dataset(&data, out)?;
    Ok(data.train.len() + data.val.len() + data.test.len())
}

/// Trains from the dataset in `data_dir`, writing artifacts and a copy of the
/// configuration to `out_dir`.
pub fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = load_split(data_dir, Split::Train)?;
    let val_set = load_split(data_dir, Split::Val)?;
    create_dir(out_dir)?;
    write_text(&out_dir.join("config.json"), &(serde_json::to_string_pretty(cfg)? + "\n"))?;
    train(cfg, &train_set, &val_set, out_dir, resume, on_epoch)
}

/// Loads a checkpoint. When `expected` is given, the stored model
/// configuration must match it.
pub fn load_checked(path: &Path, expected: Option<&ModelConfig>) -> Result<(RunConfig, Model, ParamStore<f32>)> {
    let loaded = crate::train::load_model(path)?;
    if let Some(exp) = expected {
        if &loaded.0.model != exp {
            return Err(Error::Version(format!(
                "{} was trained with a different model configuration",
                path.display()
            )));
        }
    }
    Ok(loaded)
}

fn route_lines(videos: &[Inference]) -> Vec<serde_json::Value> {
    videos
        .iter()
        .map(|v| serde_json::json!({"id": v.detections.id, "route": v.route}))
        .collect()
}

/// Paths written by [`cmd_eval`].
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub report_json: PathBuf,
    pub report_txt: PathBuf,
}

/// Evaluates `split` and writes `<split>_report.json`, `<split>_report.txt`,
/// `<split>_detections.jsonl` and `<split>_routes.jsonl` to `out_dir`.
pub fn cmd_eval(
    checkpoint: &Path,
    expected: Option<&ModelConfig>,
    data_dir: &Path,
    split: Split,
    out_dir: &Path,
) -> Result<EvalOutput> {
    let (_, model, store) = load_checked(checkpoint, expected)?;
    let samples = load_split(data_dir, split)?;
    let ev = evaluate(&model, &store, &samples)?;
    create_dir(out_dir)?;
    let name = split.name();
    let report_json = out_dir.join(format!("{name}_report.json"));
    let report_txt = out_dir.join(format!("{name}_report.txt"));
    write_text(&report_json, &(serde_json::to_string_pretty(&ev.report)? + "\n"))?;
    write_text(&report_txt, &ev.report.table("ours"))?;
    write_lines(
        &out_dir.join(format!("{name}_{DETECTIONS_FILE}")),
        ev.videos.iter().map(|v| &v.detections),
    )?;
    write_lines(&out_dir.join(format!("{name}_{ROUTES_FILE}")), route_lines(&ev.videos))?;
    Ok(EvalOutput {
        report: ev.report,
        report_json,
        report_txt,
    })
}

/// One video given as a pair of feature files.
#[derive(Clone, Debug)]
pub struct FeatureInput {
    pub id: String,
    pub audio: PathBuf,
    pub visual: PathBuf,
}

/// Detects events in each input and writes `detections.jsonl` plus
/// `routes.jsonl` to `out_dir`.
pub fn cmd_infer(
    checkpoint: &Path,
    expected: Option<&ModelConfig>,
    inputs: &[FeatureInput],
    out_dir: &Path,
) -> Result<Vec<VideoDetections>> {
    let (_, model, store) = load_checked(checkpoint, expected)?;
    let mut results = Vec::with_capacity(inputs.len());
    for inp in inputs {
        let sample = VideoSample::new(inp.id.clone(), load_features(&inp.audio)?, load_features(&inp.visual)?, Vec::new())?;
        results.push(detect(&model, &store, &sample)?);
    }
    create_dir(out_dir)?;
    write_lines(&out_dir.join(DETECTIONS_FILE), results.iter().map(|v| &v.detections))?;
    write_lines(&out_dir.join(ROUTES_FILE), route_lines(&results))?;
    Ok(results.into_iter().map(|r| r.detections).collect())
}

/// Feature-file inputs for every video of a stored split.
pub fn split_inputs(data_dir: &Path, split: Split) -> Result<Vec<FeatureInput>> {
    let records = read_annotations(&annotation_path(data_dir, split))?;
    Ok(records
        .into_iter()
        .map(|r| {
            let (audio, visual) = feature_paths(data_dir, split, &r.id);
            FeatureInput { id: r.id, audio, visual }
        })
        .collect())
}

/// Writes `<id>_<branch>.csv` for the six stage attention maps of one video.
pub fn cmd_dump_attn(
    checkpoint: &Path,
    expected: Option<&ModelConfig>,
    data_dir: &Path,
    split: Split,
    id: &str,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (_, model, store) = load_checked(checkpoint, expected)?;
    let samples = load_split(data_dir, split)?;
    let sample = samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::Lookup(id.to_string()))?;
    let maps = attention_maps(&model, &store, sample)?;
    create_dir(out_dir)?;
    maps.iter()
        .map(|m| {
            let path = out_dir.join(format!("{id}_{}.csv", m.name));
            write_csv(m, &path)?;
            Ok(path)
        })
        .collect()
}

fn write_csv(map: &AttentionMap, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in 0..map.rows {
        let row: Vec<String> = map.row(r).iter().map(|v| format!("{v:.9}")).collect();
        writeln!(out, "{}", row.join(",")).map_err(io_err(path))?;
    }
    fs::write(path, out).map_err(io_err(path))
}
