//! Joint segmentation + depth training of all five components.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_records, AugConfig, AugmentedView, Interp};
use crate::data::{VideoSample, VideoSequence};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::network::{Graph, NormModes};
use crate::model::{ComponentSet, ModelState};
use crate::nn::optim::clip_global_norm;
use crate::nn::{Adam, AdamConfig, Gradients, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub optimizer: AdamConfig,
    /// Global gradient-norm cap; `0` disables clipping.
    pub clip_norm: f64,
    /// Taken from the experiment seed rather than the config section.
    #[serde(skip)]
    pub seed: u64,
    /// Filled from the shared sections by the harness.
    #[serde(skip)]
    pub loss: LossConfig,
    #[serde(skip)]
    pub aug: AugConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            max_steps: None,
            optimizer: AdamConfig::default(),
            clip_norm: 5.0,
            seed: 0,
            loss: LossConfig::default(),
            aug: AugConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("train.batch_size", "must be positive"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::validation("train.optimizer.lr", "must be positive"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::validation("train.clip_norm", "must be non-negative"));
        }
        self.loss.validate()?;
        self.aug.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub bce: f64,
    pub silog: f64,
    pub joint: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bce: f64,
    pub silog: f64,
    pub joint: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["step", "epoch", "bce", "silog", "joint", "lr"]).map_err(io)?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.epoch.to_string(),
                s.bce.to_string(),
                s.silog.to_string(),
                s.joint.to_string(),
                s.lr.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Adam over the parameters flagged in a mask, with optional clipping.
pub(crate) struct MaskedOptimizer {
    indices: Vec<usize>,
    adam: Adam,
    clip_norm: f64,
}

impl MaskedOptimizer {
    pub fn new(state: &ModelState, mask: &[bool], cfg: AdamConfig, clip_norm: f64) -> Self {
        let indices: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let sizes: Vec<usize> = indices.iter().map(|&i| state.params[i].data.len()).collect();
        Self { indices, adam: Adam::new(cfg, &sizes), clip_norm }
    }

    /// Pulls the gradients of the masked parameters out of a backward pass.
    pub fn collect(&self, graph: &Graph<'_>, grads: &mut Gradients) -> Vec<Option<Vec<f64>>> {
        self.indices.iter().map(|&i| grads.take(graph.param_var(i)).map(Tensor::into_vec)).collect()
    }

    /// Clips, then applies one Adam step. Returns the pre-clipping gradient norm.
    pub fn apply(&mut self, state: &mut ModelState, mut grads: Vec<Option<Vec<f64>>>) -> f64 {
        let norm = {
            let mut present: Vec<&mut [f64]> = grads.iter_mut().flatten().map(|g| g.as_mut_slice()).collect();
            if self.clip_norm > 0.0 {
                clip_global_norm(&mut present, self.clip_norm)
            } else {
                present.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
            }
        };
        let mut slots: Vec<Option<&mut [f64]>> = state.params.iter_mut().map(|p| Some(p.data.as_mut_slice())).collect();
        let mut params: Vec<&mut [f64]> = self.indices.iter().map(|&i| slots[i].take().expect("unique index")).collect();
        let refs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
        self.adam.step(&mut params, &refs);
        norm
    }
}

/// One training example after augmentation.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub image: Tensor,
    pub flow: Tensor,
    pub depth: Vec<f64>,
    pub mask: Vec<f64>,
}

/// Applies one drawn set of augmentation records to every field of a sample.
pub fn augment_sample(sample: &VideoSample, cfg: &AugConfig, rng: &mut ChaCha8Rng) -> Result<TrainExample> {
    let mask = sample
        .mask_f64()
        .ok_or_else(|| Error::Dataset(format!("frame {} has no mask", sample.frame_index)))?;
    let (h, w) = (sample.height(), sample.width());
    let (g, p) = sample_records(cfg, h, w, rng)?;
    let view = AugmentedView::from_records(&sample.image, g, p)?;
    let flow = g.apply_flow(&sample.flow)?;
    let depth = g.apply(&Tensor::from_vec(1, h, w, sample.depth.clone()), Interp::Nearest)?.into_vec();
    let mask = g.apply(&Tensor::from_vec(1, h, w, mask), Interp::Nearest)?.into_vec();
    Ok(TrainExample { image: view.image, flow, depth, mask })
}

/// Loss parts of one forward/backward pass over a batch.
pub(crate) struct BatchLoss {
    pub bce: f64,
    pub silog: f64,
    pub joint: f64,
}

/// Builds the joint objective over a batch on `g`; returns the scalar node.
pub(crate) fn joint_objective(
    g: &mut Graph<'_>,
    batch: &[TrainExample],
    cfg: &LossConfig,
    use_modulation: bool,
) -> Result<(Var, BatchLoss)> {
    let inputs: Vec<(Var, Var)> = batch.iter().map(|ex| (g.input(ex.image.clone()), g.input(ex.flow.clone()))).collect();
    let outs = g.forward_batch(&inputs, use_modulation)?;
    let mut terms = Vec::with_capacity(batch.len());
    let (mut bce_sum, mut silog_sum) = (0.0, 0.0);
    for ((mask_vars, depth_vars), ex) in outs.iter().zip(batch) {
        let bce = g.tape.bce(mask_vars.logits, Arc::new(ex.mask.clone()), None);
        bce_sum += g.tape.value(bce).item();
        if cfg.lambda == 0.0 {
            terms.push(bce);
            continue;
        }
        let (h, w) = (ex.image.height(), ex.image.width());
        let reference = g.input(Tensor::from_vec(1, h, w, ex.depth.clone()));
        let valid = Arc::new(vec![true; h * w]);
        let silog = g.tape.silog(depth_vars.depth, reference, valid, cfg.silog);
        silog_sum += g.tape.value(silog).item();
        let weighted = g.tape.scale(silog, cfg.lambda);
        terms.push(g.tape.add(bce, weighted));
    }
    let total = g.tape.sum(&terms);
    let n = batch.len() as f64;
    let loss = g.tape.scale(total, 1.0 / n);
    let parts = BatchLoss { bce: bce_sum / n, silog: silog_sum / n, joint: g.tape.value(loss).item() };
    Ok((loss, parts))
}

/// Gradients of every parameter from a backward pass; unused ones are zero.
pub(crate) fn all_grads(state: &ModelState, g: &Graph<'_>, grads: &mut Gradients) -> Vec<Vec<f64>> {
    (0..state.params.len())
        .map(|i| grads.take(g.param_var(i)).map_or_else(|| vec![0.0; state.params[i].data.len()], Tensor::into_vec))
        .collect()
}

/// Mean joint loss over `batch` and its gradient for every parameter.
pub fn joint_loss_grad(state: &ModelState, batch: &[TrainExample], cfg: &LossConfig, norm: NormModes) -> Result<(f64, Vec<Vec<f64>>)> {
    let trainable = vec![true; state.params.len()];
    let mut g = Graph::new(state, &trainable, norm);
    let (loss, parts) = joint_objective(&mut g, batch, cfg, state.config.use_modulation)?;
    let mut grads = g.tape.backward(loss);
    Ok((parts.joint, all_grads(state, &g, &mut grads)))
}

fn frame_index(dataset: &[VideoSequence]) -> Vec<(usize, usize)> {
    dataset
        .iter()
        .enumerate()
        .flat_map(|(v, video)| video.samples.iter().enumerate().filter(|(_, s)| s.mask.is_some()).map(move |(f, _)| (v, f)))
        .collect()
}

fn run(mut model: ModelState, dataset: &[VideoSequence], cfg: &TrainConfig, label: &str) -> Result<(ModelState, TrainHistory)> {
    cfg.validate()?;
    let frames = frame_index(dataset);
    if frames.is_empty() {
        return Err(Error::Dataset("training set has no annotated frames".into()));
    }
    let mut history = TrainHistory::default();
    let limit = cfg.max_steps.unwrap_or(usize::MAX);
    if cfg.epochs == 0 || limit == 0 {
        return Ok((model, history));
    }
    let trainable = vec![true; model.params.len()];
    let mut opt = MaskedOptimizer::new(&model, &trainable, cfg.optimizer, cfg.clip_norm);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(1);
    let momentum = model.config.norm_momentum;
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order = frames.clone();
        order.shuffle(&mut order_rng);
        let first_step = history.steps.len();
        for ids in order.chunks(cfg.batch_size) {
            if step >= limit {
                break 'epochs;
            }
            let batch: Vec<TrainExample> = ids
                .iter()
                .map(|&(v, f)| augment_sample(&dataset[v].samples[f], &cfg.aug, &mut aug_rng))
                .collect::<Result<_>>()?;
            let (grads, updates, parts) = {
                let mut g = Graph::new(&model, &trainable, NormModes { train: ComponentSet::ALL });
                let (loss, parts) = joint_objective(&mut g, &batch, &cfg.loss, model.config.use_modulation)?;
                if !parts.joint.is_finite() {
                    let ids: Vec<String> = ids.iter().map(|&(v, f)| format!("{}#{f}", dataset[v].video_id)).collect();
                    return Err(Error::NonFinite { step, detail: format!("{label} batch [{}]", ids.join(", ")) });
                }
                let mut grads = g.tape.backward(loss);
                (opt.collect(&g, &mut grads), g.norm_updates(), parts)
            };
            opt.apply(&mut model, grads);
            model.apply_norm_updates(&updates, momentum);
            if !model.all_finite() {
                return Err(Error::NonFinite { step, detail: format!("{label}: parameters became non-finite") });
            }
            history.steps.push(StepRecord {
                step,
                epoch,
                bce: parts.bce,
                silog: parts.silog,
                joint: parts.joint,
                lr: cfg.optimizer.lr,
            });
            step += 1;
        }
        let rows = &history.steps[first_step..];
        let mean = |f: fn(&StepRecord) -> f64| rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64;
        history.epochs.push(EpochRecord { epoch, bce: mean(|s| s.bce), silog: mean(|s| s.silog), joint: mean(|s| s.joint) });
        log::info!("{label} epoch {epoch}: joint {:.4} (bce {:.4}, silog {:.4})", mean(|s| s.joint), mean(|s| s.bce), mean(|s| s.silog));
    }
    Ok((model, history))
}

/// Trains every component jointly from `model` on `dataset`.
pub fn train_stage1(model: ModelState, dataset: &[VideoSequence], cfg: &TrainConfig) -> Result<(ModelState, TrainHistory)> {
    run(model, dataset, cfg, "train")
}

/// Continues training a pretrained model with the same loop.
pub fn finetune(model: ModelState, dataset: &[VideoSequence], cfg: &TrainConfig) -> Result<(ModelState, TrainHistory)> {
    run(model, dataset, cfg, "finetune")
}
