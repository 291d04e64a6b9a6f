//! Region similarity (Jaccard) and region F-measure with per-video aggregation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::VideoSequence;
use crate::error::{Error, Result};

fn counts(gt: &[bool], pred: &[bool]) -> Result<(usize, usize, usize)> {
    if gt.len() != pred.len() {
        return Err(Error::Shape(format!("mask sizes differ: {} vs {}", gt.len(), pred.len())));
    }
    let mut inter = 0;
    let mut n_gt = 0;
    let mut n_pred = 0;
    for (&g, &p) in gt.iter().zip(pred) {
        inter += (g && p) as usize;
        n_gt += g as usize;
        n_pred += p as usize;
    }
    Ok((inter, n_gt, n_pred))
}

/// `|gt ∩ pred| / |gt ∪ pred|`; two empty masks score 1.
pub fn jaccard(gt: &[bool], pred: &[bool]) -> Result<f64> {
    let (inter, n_gt, n_pred) = counts(gt, pred)?;
    let union = n_gt + n_pred - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Harmonic mean of region precision and recall; two empty masks score 1.
pub fn f_measure(gt: &[bool], pred: &[bool]) -> Result<f64> {
    let (inter, n_gt, n_pred) = counts(gt, pred)?;
    if n_gt == 0 && n_pred == 0 {
        return Ok(1.0);
    }
    if inter == 0 {
        return Ok(0.0);
    }
    let p = inter as f64 / n_pred as f64;
    let r = inter as f64 / n_gt as f64;
    Ok(2.0 * p * r / (p + r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub video_id: String,
    pub frame_index: usize,
    pub j: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video_id: String,
    pub frames: usize,
    pub j: f64,
    pub f: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Aggregate {
    pub j: f64,
    pub f: f64,
}

/// Dataset mean after each adaptation epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochPoint {
    pub epoch: usize,
    pub j: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub per_frame: Vec<FrameMetrics>,
    pub per_video: Vec<VideoMetrics>,
    /// Mean over videos of the per-video means.
    pub aggregate: Aggregate,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub curves: BTreeMap<String, Vec<EpochPoint>>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores predicted masks (`video_id -> per-frame masks`) against the
/// dataset. Unannotated frames are skipped when `annotated_only` is set and
/// are an error otherwise.
pub fn evaluate(
    predictions: &BTreeMap<String, Vec<Vec<bool>>>,
    dataset: &[VideoSequence],
    annotated_only: bool,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for video in dataset {
        let preds = predictions.get(&video.video_id);
        let mut frames = Vec::new();
        for s in &video.samples {
            let gt = match &s.mask {
                Some(m) => m,
                None if annotated_only => continue,
                None => {
                    return Err(Error::Dataset(format!(
                        "video `{}` frame {} has no ground-truth mask",
                        video.video_id, s.frame_index
                    )))
                }
            };
            let pred = preds.and_then(|p| p.get(s.frame_index)).ok_or_else(|| {
                Error::Dataset(format!("missing prediction for video `{}` frame {}", video.video_id, s.frame_index))
            })?;
            frames.push(FrameMetrics {
                video_id: video.video_id.clone(),
                frame_index: s.frame_index,
                j: jaccard(gt, pred)?,
                f: f_measure(gt, pred)?,
            });
        }
        if frames.is_empty() {
            continue;
        }
        report.per_video.push(VideoMetrics {
            video_id: video.video_id.clone(),
            frames: frames.len(),
            j: mean(frames.iter().map(|m| m.j)),
            f: mean(frames.iter().map(|m| m.f)),
        });
        report.per_frame.extend(frames);
    }
    report.aggregate = aggregate(&report.per_video);
    Ok(report)
}

pub fn aggregate(per_video: &[VideoMetrics]) -> Aggregate {
    Aggregate { j: mean(per_video.iter().map(|v| v.j)), f: mean(per_video.iter().map(|v| v.f)) }
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// One row per video plus a final `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["video_id", "frames", "j", "region_f"]).map_err(io)?;
        for v in &self.per_video {
            w.write_record([v.video_id.clone(), v.frames.to_string(), v.j.to_string(), v.f.to_string()]).map_err(io)?;
        }
        let a = &self.aggregate;
        w.write_record(["mean".to_string(), self.per_frame.len().to_string(), a.j.to_string(), a.f.to_string()])
            .map_err(io)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}
