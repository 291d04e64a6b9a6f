//! Experiment configuration, the end-to-end pipeline, ablation sweeps and
//! run manifests.

mod ablation;
mod config;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use ablation::{run_ablation, AblationKind, AblationRow, AblationTable};
pub use config::{ExperimentConfig, SEED_ENV};
pub use report::{render_curves, render_overlay, render_run_plots};

use crate::data::{frame_name, generate_dataset, load_dataset, load_mask, save_dataset, save_mask, split_domains, LoadOptions, VideoSequence};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EpochPoint, MetricsReport};
use crate::model::{init_model, save_checkpoint, ModelState};
use crate::train::{train_stage1, TrainHistory};
use crate::ttt::{infer_video, predict_per_epoch, AdaptationTrace, Strategy, TTTConfig};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("DATTT_GIT_REV"));

/// Masks per video id, one entry per frame.
pub type Predictions = BTreeMap<String, Vec<Vec<bool>>>;

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage { stage: name.into(), source: Box::new(e) })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("value serializes") + "\n"))
}

/// Files under `dir` relative to `base`, sorted, skipping `exclude` names at
/// the top level.
fn list_files(base: &Path, dir: &Path, exclude: &[&str], out: &mut Vec<PathBuf>) -> Result<()> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        let rel = p.strip_prefix(base).expect("under base").to_path_buf();
        if dir == base && exclude.iter().any(|x| rel.as_os_str() == *x) {
            continue;
        }
        if p.is_dir() {
            list_files(base, &p, exclude, out)?;
        } else {
            out.push(rel);
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// SHA-256 of every file under `dir`, keyed by `prefix/relative path`.
pub fn checksum_tree(dir: &Path, prefix: &str, exclude: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    list_files(dir, dir, exclude, &mut files)?;
    files
        .into_iter()
        .map(|rel| {
            let key = Path::new(prefix).join(&rel).to_string_lossy().replace('\\', "/");
            Ok((key, sha256_file(&dir.join(rel))?))
        })
        .collect()
}

/// Train and test splits, plus the directories they were read from.
pub struct Splits {
    pub train: Vec<VideoSequence>,
    pub test: Vec<VideoSequence>,
    pub train_root: PathBuf,
    pub test_root: PathBuf,
}

/// Writes the synthetic splits of `cfg` under `root/{train,test}`.
pub fn generate_splits(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let split = cfg.split_config();
    split.validate()?;
    let (train, test) = split_domains(&split, &split.shift)?;
    for (name, specs) in [("train", train), ("test", test)] {
        let dir = root.join(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        save_dataset(&dir, &generate_dataset(&specs)?)?;
    }
    Ok(())
}

/// Loads `data_root` when configured, otherwise generates the synthetic
/// splits under `work/data` and reads them back, so every run sees the
/// stored (quantized) frames.
pub fn prepare_data(cfg: &ExperimentConfig, work: &Path) -> Result<Splits> {
    let root = match &cfg.data_root {
        Some(r) => r.clone(),
        None => {
            let r = work.join("data");
            generate_splits(cfg, &r)?;
            r
        }
    };
    let (train_root, test_root) = (root.join("train"), root.join("test"));
    let opts = LoadOptions::default();
    Ok(Splits { train: load_dataset(&train_root, &opts)?, test: load_dataset(&test_root, &opts)?, train_root, test_root })
}

/// Stage-1 training from a fresh initialization.
pub fn train_model(cfg: &ExperimentConfig, train: &[VideoSequence]) -> Result<(ModelState, TrainHistory)> {
    let model = init_model(&cfg.model, cfg.seed)?;
    train_stage1(model, train, &cfg.train_config())
}

/// Predictions and scores of one adaptation setting over a test split.
pub struct Adapted {
    pub strategy: Strategy,
    pub baseline: Predictions,
    /// Final-epoch predictions (equal to `baseline` for strategy none).
    pub adapted: Predictions,
    pub baseline_report: MetricsReport,
    /// Final-epoch report with the J/F-per-epoch curve attached.
    pub report: MetricsReport,
    pub traces: Vec<AdaptationTrace>,
}

impl Adapted {
    pub fn delta_j(&self) -> f64 {
        self.report.aggregate.j - self.baseline_report.aggregate.j
    }

    pub fn delta_f(&self) -> f64 {
        self.report.aggregate.f - self.baseline_report.aggregate.f
    }
}

/// Adapts `model` to every test video independently and scores the
/// unadapted model, every epoch, and the final epoch.
pub fn adapt_and_score(model: &ModelState, test: &[VideoSequence], cfg: &TTTConfig) -> Result<Adapted> {
    cfg.validate()?;
    let per_video: Vec<(Vec<Vec<bool>>, Vec<Vec<Vec<bool>>>, AdaptationTrace)> = test
        .par_iter()
        .map(|v| {
            let base = infer_video(model, v)?;
            if cfg.strategy == Strategy::None {
                return Ok((base, Vec::new(), AdaptationTrace { video_id: v.video_id.clone(), ..Default::default() }));
            }
            let (epochs, trace) = predict_per_epoch(model, v, cfg)?;
            Ok((base, epochs, trace))
        })
        .collect::<Result<_>>()?;
    let mut baseline = Predictions::new();
    let mut epochs: Vec<Predictions> = Vec::new();
    let mut traces = Vec::new();
    for (v, (base, per_epoch, trace)) in test.iter().zip(per_video) {
        for (e, masks) in per_epoch.into_iter().enumerate() {
            if epochs.len() <= e {
                epochs.push(Predictions::new());
            }
            epochs[e].insert(v.video_id.clone(), masks);
        }
        baseline.insert(v.video_id.clone(), base);
        traces.push(trace);
    }
    let baseline_report = evaluate(&baseline, test, true)?;
    let point = |epoch: usize, r: &MetricsReport| EpochPoint { epoch, j: r.aggregate.j, f: r.aggregate.f };
    let mut curve = vec![point(0, &baseline_report)];
    let mut report = baseline_report.clone();
    for (e, preds) in epochs.iter().enumerate() {
        report = evaluate(preds, test, true)?;
        curve.push(point(e + 1, &report));
    }
    report.curves.insert(cfg.strategy.name().to_string(), curve);
    let adapted = epochs.pop().unwrap_or_else(|| baseline.clone());
    Ok(Adapted { strategy: cfg.strategy, baseline, adapted, baseline_report, report, traces })
}

/// Writes `root/<video>/<frame>.png` for every prediction.
pub fn save_predictions(root: &Path, preds: &Predictions, test: &[VideoSequence]) -> Result<()> {
    for v in test {
        let Some(masks) = preds.get(&v.video_id) else { continue };
        let dir = root.join(&v.video_id);
        create_dir(&dir)?;
        for (i, m) in masks.iter().enumerate() {
            save_mask(&dir.join(frame_name(i, "png")), m, v.height(), v.width())?;
        }
    }
    Ok(())
}

/// Reads predictions written by [`save_predictions`] for the videos of `dataset`.
pub fn load_predictions(root: &Path, dataset: &[VideoSequence]) -> Result<Predictions> {
    dataset
        .iter()
        .map(|v| {
            let dir = root.join(&v.video_id);
            let masks = (0..v.len())
                .map(|i| {
                    let p = dir.join(frame_name(i, "png"));
                    if p.exists() {
                        load_mask(&p, v.height(), v.width())
                    } else {
                        Err(Error::Dataset(format!("missing prediction {}", p.display())))
                    }
                })
                .collect::<Result<_>>()?;
            Ok((v.video_id.clone(), masks))
        })
        .collect()
}

/// One CSV with the trace rows of every video, plus `ttt/<video>/trace.csv`.
pub fn write_traces(out: &Path, traces: &[AdaptationTrace]) -> Result<()> {
    let path = out.join("trace.csv");
    let err = |e: csv::Error| Error::format(&path, e.to_string());
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    w.write_record(["video_id", "step", "frame", "init", "frame_epoch", "video_pass", "loss", "skipped", "wall_ms"]).map_err(err)?;
    for t in traces {
        for r in &t.rows {
            let init = serde_json::to_value(r.init).expect("serializes");
            w.write_record([
                t.video_id.clone(),
                r.step.to_string(),
                r.frame.to_string(),
                init.as_str().unwrap_or_default().to_string(),
                r.frame_epoch.to_string(),
                r.video_pass.to_string(),
                r.loss.map_or(String::new(), |l| l.to_string()),
                r.loss.is_none().to_string(),
                format!("{:.3}", r.wall_ms),
            ])
            .map_err(err)?;
        }
        let dir = out.join("ttt").join(&t.video_id);
        create_dir(&dir)?;
        t.write_csv(&dir.join("trace.csv"))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub experiment: u64,
    pub data: u64,
    pub model_init: u64,
    pub train: u64,
    pub ttt: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRefs {
    pub report_json: String,
    pub report_csv: String,
    pub baseline_json: String,
    pub baseline_csv: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: String,
    pub baseline_j: f64,
    pub baseline_f: f64,
    pub j: f64,
    pub f: f64,
    pub delta_j: f64,
    pub delta_f: f64,
    pub ttt_steps: usize,
    pub ttt_skipped_steps: usize,
}

/// Everything needed to reproduce a run: the resolved configuration, the
/// seeds, checksums of inputs and outputs, and timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub code_version: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    /// Dataset files read by the run.
    pub inputs: BTreeMap<String, String>,
    /// Files written by the run, relative to the output directory.
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock seconds per stage.
    pub timing: BTreeMap<String, f64>,
    pub reports: ReportRefs,
    pub summary: Summary,
}

impl ExperimentManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Moves the partial contents of `out` into `out/failed/` and records the error.
fn retain_failed(out: &Path, err: &Error) {
    let failed = out.join("failed");
    if fs::create_dir_all(&failed).is_err() {
        return;
    }
    if let Ok(rd) = fs::read_dir(out) {
        for e in rd.flatten() {
            if e.file_name() != "failed" {
                let _ = fs::rename(e.path(), failed.join(e.file_name()));
            }
        }
    }
    let _ = fs::write(failed.join("error.txt"), format!("{err}\n"));
}

/// Full experiment: data, stage-1 training, per-video adaptation,
/// evaluation, plots and manifest, all under `out`.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentManifest> {
    cfg.validate()?;
    create_dir(out)?;
    let failed = out.join("failed");
    if failed.exists() {
        fs::remove_dir_all(&failed).map_err(|e| Error::io(&failed, e))?;
    }
    let result = pipeline(cfg, out);
    if let Err(e) = &result {
        log::error!("{e}");
        retain_failed(out, e);
    }
    result
}

fn pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentManifest> {
    let mut timing = BTreeMap::new();
    let mut timed = |name: &str, t: Instant| {
        timing.insert(name.to_string(), t.elapsed().as_secs_f64());
    };
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;

    let t = Instant::now();
    let splits = stage("data", || prepare_data(cfg, out))?;
    let key = |dir: &Path| dir.strip_prefix(out).unwrap_or(dir).to_string_lossy().into_owned();
    let mut inputs = stage("data", || checksum_tree(&splits.train_root, &key(&splits.train_root), &[]))?;
    inputs.extend(stage("data", || checksum_tree(&splits.test_root, &key(&splits.test_root), &[]))?);
    timed("data", t);
    log::info!("data: {} train / {} test videos", splits.train.len(), splits.test.len());

    let t = Instant::now();
    let model = stage("train", || {
        let (model, history) = train_model(cfg, &splits.train)?;
        save_checkpoint(&model, &out.join("model").join("stage1.ckpt"))?;
        history.write_csv(&out.join("history.csv"))?;
        Ok(model)
    })?;
    timed("train", t);

    let t = Instant::now();
    let ttt_cfg = cfg.ttt_config();
    let adapted = stage("ttt", || {
        let a = adapt_and_score(&model, &splits.test, &ttt_cfg)?;
        write_traces(out, &a.traces)?;
        save_predictions(&out.join("predictions").join("none"), &a.baseline, &splits.test)?;
        save_predictions(&out.join("predictions").join("final"), &a.adapted, &splits.test)?;
        Ok(a)
    })?;
    timed("ttt", t);
    log::info!(
        "{}: J {:.4} -> {:.4}",
        adapted.strategy.name(),
        adapted.baseline_report.aggregate.j,
        adapted.report.aggregate.j
    );

    let t = Instant::now();
    stage("eval", || {
        adapted.report.write_json(&out.join("report.json"))?;
        adapted.report.write_csv(&out.join("report.csv"))?;
        adapted.baseline_report.write_json(&out.join("baseline.json"))?;
        adapted.baseline_report.write_csv(&out.join("baseline.csv"))
    })?;
    timed("eval", t);

    let t = Instant::now();
    stage("report", || render_run_plots(&out.join("plots"), &adapted.report, &splits.test, &adapted.baseline, &adapted.adapted))?;
    timed("report", t);

    let outputs = checksum_tree(out, "", &["manifest.json", "failed", "data"])?;
    let steps: usize = adapted.traces.iter().map(|t| t.len()).sum();
    let skipped: usize = adapted.traces.iter().map(|t| t.skipped()).sum();
    let (b, a) = (&adapted.baseline_report.aggregate, &adapted.report.aggregate);
    let manifest = ExperimentManifest {
        code_version: CODE_VERSION.to_string(),
        config: cfg.clone(),
        seeds: Seeds { experiment: cfg.seed, data: cfg.seed, model_init: cfg.seed, train: cfg.seed, ttt: cfg.seed },
        inputs,
        outputs,
        timing,
        reports: ReportRefs {
            report_json: "report.json".into(),
            report_csv: "report.csv".into(),
            baseline_json: "baseline.json".into(),
            baseline_csv: "baseline.csv".into(),
        },
        summary: Summary {
            strategy: adapted.strategy.name().to_string(),
            baseline_j: b.j,
            baseline_f: b.f,
            j: a.j,
            f: a.f,
            delta_j: a.j - b.j,
            delta_f: a.f - b.f,
            ttt_steps: steps,
            ttt_skipped_steps: skipped,
        },
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
