//! Per-video test-time adaptation of the image encoder, plus the entropy
//! (TENT) and normalization-statistics baselines.

mod schedule;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use schedule::{build_schedule, InitSource, ScheduleStep, Strategy, TTTSchedule};

use crate::augment::{sample_records, AugConfig, AugmentedView, Interp};
use crate::data::{VideoSample, VideoSequence};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::network::{Graph, NormModes, NormUpdate};
use crate::model::{forward, Component, ComponentSet, ModelState};
use crate::nn::{AdamConfig, Tensor, Var};
use crate::train::{all_grads, MaskedOptimizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Depth agreement between two augmented views of the frame.
    Consistency,
    /// Depth error against the stored reference depth map.
    #[serde(rename = "pseudo")]
    PseudoDepth,
}

impl Objective {
    pub const ALL: [Objective; 2] = [Objective::Consistency, Objective::PseudoDepth];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Consistency => "consistency",
            Objective::PseudoDepth => "pseudo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "consistency" => Ok(Objective::Consistency),
            "pseudo" | "pseudo_depth" => Ok(Objective::PseudoDepth),
            other => Err(Error::validation("ttt.objective", format!("unknown objective `{other}`; valid: consistency, pseudo"))),
        }
    }
}

/// Behaviour of the normalization layers of the adapted components during
/// update steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormUsage {
    /// Training mode: normalize with the statistics of the current batch of
    /// views and fold them into the running statistics.
    #[default]
    Train,
    /// Keep the stored running statistics fixed.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TTTConfig {
    pub strategy: Strategy,
    pub objective: Objective,
    pub epochs: usize,
    /// View pairs (consistency) or views (pseudo depth) per step.
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Global gradient-norm cap; `0` disables clipping.
    pub clip_norm: f64,
    /// Number of interleaved clips to sample from; `None` visits every frame.
    pub clips: Option<usize>,
    pub trainable: Vec<Component>,
    pub norm: NormUsage,
    /// Predict each frame with the weights adapted on it (TTT-MWI only).
    pub per_frame_snapshots: bool,
    /// Taken from the experiment seed rather than the config section.
    #[serde(skip)]
    pub seed: u64,
    /// Filled from the shared sections by the harness.
    #[serde(skip)]
    pub aug: AugConfig,
    #[serde(skip)]
    pub loss: LossConfig,
}

impl Default for TTTConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::TttLtv,
            objective: Objective::Consistency,
            epochs: 10,
            batch_size: 8,
            optimizer: AdamConfig { lr: 1e-5, ..AdamConfig::default() },
            clip_norm: 0.0,
            clips: None,
            trainable: vec![Component::ImageEncoder],
            norm: NormUsage::Train,
            per_frame_snapshots: false,
            seed: 0,
            aug: AugConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TTTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategy != Strategy::None && self.epochs == 0 {
            return Err(Error::validation("ttt.epochs", "must be at least 1 when adapting"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("ttt.batch_size", "must be positive"));
        }
        if !(self.optimizer.lr >= 0.0) {
            return Err(Error::validation("ttt.optimizer.lr", "must be non-negative"));
        }
        if self.clips == Some(0) {
            return Err(Error::validation("ttt.clips", "must be positive"));
        }
        self.loss.validate()?;
        self.aug.validate()
    }

    pub fn trainable_set(&self) -> ComponentSet {
        ComponentSet::of(&self.trainable)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "frame", rename_all = "snake_case")]
pub enum SnapshotScope {
    /// Valid for every frame of the video.
    Video,
    /// Valid for one frame only.
    Frame(usize),
}

/// Adapted weights at an epoch boundary.
#[derive(Clone, Debug)]
pub struct Snapshot {
    /// 1-based epoch; 0 for the unadapted model.
    pub epoch: usize,
    pub scope: SnapshotScope,
    pub state: ModelState,
}

/// Borrowed view of a snapshot passed to observers while adaptation runs.
pub struct SnapshotEvent<'a> {
    pub epoch: usize,
    pub scope: SnapshotScope,
    pub state: &'a ModelState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub frame: usize,
    pub init: InitSource,
    pub frame_epoch: usize,
    pub video_pass: usize,
    /// `None` when the step was skipped (no usable support).
    pub loss: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct AdaptationTrace {
    pub video_id: String,
    pub rows: Vec<TraceRow>,
    pub warnings: Vec<String>,
}

impl AdaptationTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn skipped(&self) -> usize {
        self.rows.iter().filter(|r| r.loss.is_none()).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["step", "frame", "init", "frame_epoch", "video_pass", "loss", "skipped", "wall_ms"]).map_err(io)?;
        for r in &self.rows {
            let init = match r.init {
                InitSource::Pretrained => "pretrained",
                InitSource::Carry => "carry",
            };
            w.write_record([
                r.step.to_string(),
                r.frame.to_string(),
                init.to_string(),
                r.frame_epoch.to_string(),
                r.video_pass.to_string(),
                r.loss.map_or(String::new(), |l| l.to_string()),
                r.loss.is_none().to_string(),
                format!("{:.3}", r.wall_ms),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Stable per-video stream id so each video draws its own random numbers.
fn video_stream(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn rngs(seed: u64, video_id: &str) -> (ChaCha8Rng, ChaCha8Rng) {
    let stream = video_stream(video_id);
    let mut a = ChaCha8Rng::seed_from_u64(seed);
    a.set_stream(stream.wrapping_mul(2));
    let mut b = ChaCha8Rng::seed_from_u64(seed);
    b.set_stream(stream.wrapping_mul(2).wrapping_add(1));
    (a, b)
}

/// Self-supervised loss of one step; `None` means skip.
enum StepLoss {
    Consistency,
    Pseudo,
    Entropy,
}

struct StepOut {
    loss: f64,
    grads: Vec<Option<Vec<f64>>>,
    norm: Vec<NormUpdate>,
}

type StepGrads = Option<StepOut>;

fn norm_modes(usage: NormUsage, trainable: ComponentSet) -> NormModes {
    match usage {
        NormUsage::Frozen => NormModes::default(),
        NormUsage::Train => NormModes { train: trainable },
    }
}

fn consistency_step(
    state: &ModelState,
    sample: &VideoSample,
    cfg: &TTTConfig,
    mask: &[bool],
    opt: &MaskedOptimizer,
    rng: &mut ChaCha8Rng,
) -> Result<StepGrads> {
    let (h, w) = (sample.height(), sample.width());
    let mut views = Vec::with_capacity(2 * cfg.batch_size);
    for _ in 0..2 * cfg.batch_size {
        let (geo, photo) = sample_records(&cfg.aug, h, w, rng)?;
        views.push(AugmentedView::from_records(&sample.image, geo, photo)?);
    }
    let pairs: Vec<(AugmentedView, AugmentedView)> = {
        let mut it = views.into_iter();
        std::iter::from_fn(|| Some((it.next()?, it.next()?))).collect()
    };
    let mut g = Graph::new(state, mask, norm_modes(cfg.norm, cfg.trainable_set()));
    let terms = consistency_terms(&mut g, &pairs, &cfg.loss)?;
    finish(g, terms, opt)
}

/// One SILog term per view pair with at least two jointly valid pixels.
fn consistency_terms(g: &mut Graph<'_>, pairs: &[(AugmentedView, AugmentedView)], loss: &LossConfig) -> Result<Vec<Var>> {
    let inputs: Vec<Var> = pairs.iter().flat_map(|(a, b)| [a, b]).map(|v| g.input(v.image.clone())).collect();
    let depths = g.depth_batch(&inputs)?;
    let mut terms = Vec::new();
    for (pair, d) in pairs.iter().zip(depths.chunks(2)) {
        let m1 = Arc::new(pair.0.geometric.inverse_map(Interp::Bilinear));
        let m2 = Arc::new(pair.1.geometric.inverse_map(Interp::Bilinear));
        let valid: Vec<bool> = m1.validity().iter().zip(m2.validity()).map(|(&a, b)| a && b).collect();
        if valid.iter().filter(|&&v| v).count() < 2 {
            continue;
        }
        let c1 = g.tape.resample(d[0].depth, m1);
        let c2 = g.tape.resample(d[1].depth, m2);
        let reference = if loss.stop_grad_reference { g.input(g.tape.value(c1).clone()) } else { c1 };
        terms.push(g.tape.silog(c2, reference, Arc::new(valid), loss.silog));
    }
    Ok(terms)
}

/// Mean depth-consistency loss over view pairs and its gradient for every
/// parameter. Errors when no pair has two jointly valid pixels.
pub fn consistency_loss_grad(
    state: &ModelState,
    pairs: &[(AugmentedView, AugmentedView)],
    loss: &LossConfig,
    norm: NormModes,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let all = vec![true; state.params.len()];
    let mut g = Graph::new(state, &all, norm);
    let terms = consistency_terms(&mut g, pairs, loss)?;
    if terms.is_empty() {
        return Err(Error::validation("pairs", "no pair has two jointly valid pixels"));
    }
    let n = terms.len() as f64;
    let total = g.tape.sum(&terms);
    let out = g.tape.scale(total, 1.0 / n);
    let value = g.tape.value(out).item();
    let mut grads = g.tape.backward(out);
    Ok((value, all_grads(state, &g, &mut grads)))
}

fn pseudo_step(
    state: &ModelState,
    sample: &VideoSample,
    cfg: &TTTConfig,
    mask: &[bool],
    opt: &MaskedOptimizer,
    rng: &mut ChaCha8Rng,
) -> Result<StepGrads> {
    let (h, w) = (sample.height(), sample.width());
    let depth = Tensor::from_vec(1, h, w, sample.depth.clone());
    let mut views = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let (geo, photo) = sample_records(&cfg.aug, h, w, rng)?;
        views.push((AugmentedView::from_records(&sample.image, geo, photo)?, geo.apply(&depth, Interp::Nearest)?));
    }
    let mut g = Graph::new(state, mask, norm_modes(cfg.norm, cfg.trainable_set()));
    let inputs: Vec<Var> = views.iter().map(|v| g.input(v.0.image.clone())).collect();
    let depths = g.depth_batch(&inputs)?;
    let mut terms = Vec::new();
    for ((_, reference), d) in views.iter().zip(&depths) {
        let n = reference.len();
        let r = g.input(reference.clone());
        terms.push(g.tape.silog(d.depth, r, Arc::new(vec![true; n]), cfg.loss.silog));
    }
    finish(g, terms, opt)
}

fn entropy_step(state: &ModelState, sample: &VideoSample, cfg: &TTTConfig, mask: &[bool], opt: &MaskedOptimizer) -> Result<StepGrads> {
    let mut g = Graph::new(state, mask, norm_modes(cfg.norm, ComponentSet::ALL));
    let (i, f) = (g.input(sample.image.clone()), g.input(sample.flow.clone()));
    let (m, _) = g.forward_batch(&[(i, f)], state.config.use_modulation)?.remove(0);
    let e = g.tape.entropy(m.logits);
    finish(g, vec![e], opt)
}

fn finish(mut g: Graph<'_>, terms: Vec<Var>, opt: &MaskedOptimizer) -> Result<StepGrads> {
    if terms.is_empty() {
        return Ok(None);
    }
    let n = terms.len() as f64;
    let total = g.tape.sum(&terms);
    let loss = g.tape.scale(total, 1.0 / n);
    let value = g.tape.value(loss).item();
    if !value.is_finite() {
        return Ok(Some(StepOut { loss: value, grads: Vec::new(), norm: Vec::new() }));
    }
    let mut grads = g.tape.backward(loss);
    Ok(Some(StepOut { loss: value, grads: opt.collect(&g, &mut grads), norm: g.norm_updates() }))
}

/// Runs a schedule, calling `hook` at every snapshot point.
fn run(
    pretrained: &ModelState,
    video: &VideoSequence,
    cfg: &TTTConfig,
    objective: StepLoss,
    mask: Vec<bool>,
    reset: ComponentSet,
    hook: &mut dyn FnMut(&SnapshotEvent<'_>) -> Result<()>,
) -> Result<(ModelState, AdaptationTrace)> {
    cfg.validate()?;
    video.validate()?;
    let (mut sched_rng, mut aug_rng) = rngs(cfg.seed, &video.video_id);
    let schedule = build_schedule(video.len(), cfg.strategy, cfg.epochs, cfg.clips, &mut sched_rng)?;
    let mut trace = AdaptationTrace { video_id: video.video_id.clone(), rows: Vec::new(), warnings: schedule.warnings.clone() };
    for w in &trace.warnings {
        log::warn!("{}: {w}", video.video_id);
    }
    let mut state = pretrained.clone();
    if schedule.steps.is_empty() {
        hook(&SnapshotEvent { epoch: 0, scope: SnapshotScope::Video, state: &state })?;
        return Ok((state, trace));
    }
    let per_frame = cfg.strategy == Strategy::TttN || (cfg.strategy == Strategy::TttMwi && cfg.per_frame_snapshots);
    let last_frame = schedule.steps.last().map(|s| s.frame);
    let mut opt = MaskedOptimizer::new(&state, &mask, cfg.optimizer, cfg.clip_norm);
    for (k, step) in schedule.steps.iter().enumerate() {
        if step.init == InitSource::Pretrained {
            state.copy_components_from(pretrained, reset);
            opt = MaskedOptimizer::new(&state, &mask, cfg.optimizer, cfg.clip_norm);
        }
        let t0 = Instant::now();
        let sample = &video.samples[step.frame];
        let out = match objective {
            StepLoss::Consistency => consistency_step(&state, sample, cfg, &mask, &opt, &mut aug_rng)?,
            StepLoss::Pseudo => pseudo_step(&state, sample, cfg, &mask, &opt, &mut aug_rng)?,
            StepLoss::Entropy => entropy_step(&state, sample, cfg, &mask, &opt)?,
        };
        let loss = match out {
            Some(out) if !out.loss.is_finite() => {
                return Err(Error::NonFinite { step: k, detail: format!("video `{}` frame {}", video.video_id, step.frame) })
            }
            Some(out) => {
                opt.apply(&mut state, out.grads);
                state.apply_norm_updates(&out.norm, state.config.norm_momentum);
                Some(out.loss)
            }
            None => None,
        };
        trace.rows.push(TraceRow {
            step: k,
            frame: step.frame,
            init: step.init,
            frame_epoch: step.frame_epoch,
            video_pass: step.video_pass,
            loss,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        let next = schedule.steps.get(k + 1);
        if per_frame {
            hook(&SnapshotEvent { epoch: step.frame_epoch + 1, scope: SnapshotScope::Frame(step.frame), state: &state })?;
        } else if cfg.strategy == Strategy::TttLtv {
            if next.is_none_or(|n| n.video_pass != step.video_pass) {
                hook(&SnapshotEvent { epoch: step.video_pass + 1, scope: SnapshotScope::Video, state: &state })?;
            }
        } else if Some(step.frame) == last_frame && next.is_none_or(|n| n.frame == step.frame) {
            // offline TTT-MWI: the weights after the e-th step on the final frame
            hook(&SnapshotEvent { epoch: step.frame_epoch + 1, scope: SnapshotScope::Video, state: &state })?;
        }
    }
    Ok((state, trace))
}

/// Result of adapting one video.
pub struct Adaptation {
    /// Video-wide snapshots for every epoch, or per-frame snapshots of the
    /// final epoch for per-frame schedules.
    pub snapshots: Vec<Snapshot>,
    pub trace: AdaptationTrace,
}

fn objective_step(cfg: &TTTConfig, video: &VideoSequence) -> Result<StepLoss> {
    match cfg.objective {
        Objective::Consistency => Ok(StepLoss::Consistency),
        Objective::PseudoDepth => {
            if let Some(s) = video.samples.iter().find(|s| !s.has_depth) {
                return Err(Error::Dataset(format!(
                    "pseudo-depth adaptation needs depth maps; video `{}` frame {} has none",
                    video.video_id, s.frame_index
                )));
            }
            Ok(StepLoss::Pseudo)
        }
    }
}

/// Adapts the trainable components on one video and reports every snapshot
/// to `hook` as it is produced.
pub fn adapt_video_with(
    pretrained: &ModelState,
    video: &VideoSequence,
    cfg: &TTTConfig,
    hook: &mut dyn FnMut(&SnapshotEvent<'_>) -> Result<()>,
) -> Result<AdaptationTrace> {
    let objective = objective_step(cfg, video)?;
    let set = cfg.trainable_set();
    Ok(run(pretrained, video, cfg, objective, pretrained.mask_components(set), set, hook)?.1)
}

pub fn adapt_video(pretrained: &ModelState, video: &VideoSequence, cfg: &TTTConfig) -> Result<Adaptation> {
    let mut snapshots = Vec::new();
    let epochs = cfg.epochs;
    let trace = adapt_video_with(pretrained, video, cfg, &mut |ev| {
        if ev.scope == SnapshotScope::Video || ev.epoch == epochs {
            snapshots.push(Snapshot { epoch: ev.epoch, scope: ev.scope, state: ev.state.clone() });
        }
        Ok(())
    })?;
    Ok(Adaptation { snapshots, trace })
}

/// Binary masks `sigmoid(logits) > 0.5` for every frame, in evaluation mode.
pub fn infer_video(model: &ModelState, video: &VideoSequence) -> Result<Vec<Vec<bool>>> {
    video.samples.par_iter().map(|s| infer_frame(model, s)).collect()
}

pub fn infer_frame(model: &ModelState, sample: &VideoSample) -> Result<Vec<bool>> {
    let out = forward(model, &sample.image, &sample.flow, model.config.use_modulation)?;
    Ok(out.mask_logits.iter().map(|&z| z > 0.0).collect())
}

/// Masks predicted after every adaptation epoch (`[epoch][frame]`).
///
/// Frames without a snapshot of their own (skipped by clip sampling under a
/// per-frame schedule) keep the unadapted prediction.
pub fn predict_per_epoch(
    pretrained: &ModelState,
    video: &VideoSequence,
    cfg: &TTTConfig,
) -> Result<(Vec<Vec<Vec<bool>>>, AdaptationTrace)> {
    if cfg.strategy == Strategy::None {
        cfg.validate()?;
        return Ok((vec![infer_video(pretrained, video)?], AdaptationTrace { video_id: video.video_id.clone(), ..Default::default() }));
    }
    let t = video.len();
    let mut preds: Vec<Vec<Option<Vec<bool>>>> = vec![vec![None; t]; cfg.epochs];
    let trace = adapt_video_with(pretrained, video, cfg, &mut |ev| {
        let row = &mut preds[ev.epoch - 1];
        match ev.scope {
            SnapshotScope::Video => {
                for (slot, mask) in row.iter_mut().zip(infer_video(ev.state, video)?) {
                    *slot = Some(mask);
                }
            }
            SnapshotScope::Frame(f) => row[f] = Some(infer_frame(ev.state, &video.samples[f])?),
        }
        Ok(())
    })?;
    let mut base: Option<Vec<Vec<bool>>> = None;
    let mut out = Vec::with_capacity(cfg.epochs);
    for row in preds {
        let mut masks = Vec::with_capacity(t);
        for (f, slot) in row.into_iter().enumerate() {
            masks.push(match slot {
                Some(m) => m,
                None => {
                    if base.is_none() {
                        base = Some(infer_video(pretrained, video)?);
                    }
                    base.as_ref().expect("filled")[f].clone()
                }
            });
        }
        out.push(masks);
    }
    Ok((out, trace))
}

/// Entropy minimization over the normalization affine parameters, driven by
/// the same schedules. Returns the final weights and the trace.
pub fn tent_adapt(model: &ModelState, video: &VideoSequence, cfg: &TTTConfig) -> Result<(ModelState, AdaptationTrace)> {
    if model.config.norm != crate::model::NormKind::Batch {
        return Err(Error::validation("model.norm", "entropy adaptation needs normalization layers"));
    }
    let mask = model.mask_norm_affine();
    let reset = ComponentSet::ALL;
    if cfg.strategy == Strategy::None || cfg.epochs == 0 {
        return Ok((model.clone(), AdaptationTrace { video_id: video.video_id.clone(), ..Default::default() }));
    }
    run(model, video, cfg, StepLoss::Entropy, mask, reset, &mut |_| Ok(()))
}

/// Replaces every normalization layer's running statistics by the moments of
/// its inputs over all frames of `video`. No parameter changes.
pub fn bn_stats_adapt(model: &ModelState, video: &VideoSequence) -> Result<ModelState> {
    video.validate()?;
    let updates = {
        let frozen = vec![false; model.params.len()];
        let mut g = Graph::new(model, &frozen, NormModes { train: ComponentSet::of(&[Component::ImageEncoder, Component::FlowEncoder]) });
        let images: Vec<Var> = video.samples.iter().map(|s| g.input(s.image.clone())).collect();
        let flows: Vec<Var> = video.samples.iter().map(|s| g.input(s.flow.clone())).collect();
        g.encode(Component::ImageEncoder, &images)?;
        g.encode(Component::FlowEncoder, &flows)?;
        g.norm_updates()
    };
    let mut out = model.clone();
    out.apply_norm_updates(&updates, 1.0);
    Ok(out)
}

/// Pre-normalization activations of every normalization layer for a batch
/// of frames, under evaluation-mode statistics (for inspection and tests).
pub fn norm_layer_inputs(model: &ModelState, video: &VideoSequence) -> Result<Vec<(String, Vec<Tensor>)>> {
    let mut g = Graph::eval(model);
    let images: Vec<Var> = video.samples.iter().map(|s| g.input(s.image.clone())).collect();
    let flows: Vec<Var> = video.samples.iter().map(|s| g.input(s.flow.clone())).collect();
    g.encode(Component::ImageEncoder, &images)?;
    g.encode(Component::FlowEncoder, &flows)?;
    Ok(g.norm_inputs.iter().map(|(name, vars)| (name.clone(), vars.iter().map(|&v| g.tape.value(v).clone()).collect())).collect())
}
