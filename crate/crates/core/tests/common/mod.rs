#![allow(dead_code)]

use dattt::data::{generate_video, sample_scene_specs, SplitConfig, VideoSequence};
use dattt::model::{init_model, ModelConfig, ModelState};

pub const SIDE: usize = 32;

/// A model small enough for finite-difference checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig { base_width: 4, decoder_width: 4, input_height: SIDE, input_width: SIDE, ..ModelConfig::default() }
}

pub fn tiny_model(seed: u64) -> ModelState {
    init_model(&tiny_config(), seed).unwrap()
}

/// One shifted-domain synthetic video on a 32x32 canvas.
pub fn video(frames: usize, seed: u64) -> VideoSequence {
    let cfg = SplitConfig { height: SIDE, width: SIDE, seed, ..SplitConfig::default() };
    let photometric = cfg.photometric.shifted(&cfg.shift);
    let spec = sample_scene_specs(&cfg, "clip", 1, frames, 7, photometric).remove(0);
    generate_video(&spec).unwrap()
}

/// `tiny_model` with every parameter jittered, so no activation sits exactly
/// on a ReLU kink (zero flow gives exactly zero pre-activations at init).
pub fn generic_model(seed: u64) -> ModelState {
    let mut m = tiny_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in &mut m.params {
        for x in &mut p.data {
            let n: f64 = StandardNormal.sample(&mut rng);
            *x += 0.05 * n;
        }
    }
    m
}

pub fn params_bits(m: &ModelState) -> Vec<Vec<u64>> {
    m.params.iter().map(|p| p.data.iter().map(|x| x.to_bits()).collect()).collect()
}

use dattt::augment::{sample_pair, AugConfig, AugmentedView};
use dattt::losses::LossConfig;
use dattt::model::{Component, ComponentSet, NormModes};
use dattt::train::{augment_sample, joint_loss_grad, TrainExample};
use dattt::ttt::consistency_loss_grad;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type LossGrad<'a> = dyn Fn(&ModelState) -> (f64, Vec<Vec<f64>>) + 'a;

fn shifted(m: &ModelState, dir: &[Vec<f64>], h: f64) -> ModelState {
    let mut out = m.clone();
    for (p, d) in out.params.iter_mut().zip(dir) {
        for (x, dx) in p.data.iter_mut().zip(d) {
            *x += h * dx;
        }
    }
    out
}

/// Largest relative error between the analytic directional derivative and a
/// central difference, over `directions` random unit directions.
pub fn worst_directional_error(model: &ModelState, f: &LossGrad<'_>, directions: usize, seed: u64) -> f64 {
    let (_, grad) = f(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let mut dir: Vec<Vec<f64>> =
            model.params.iter().map(|p| p.data.iter().map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let norm = dir.iter().flatten().map(|x: &f64| x * x).sum::<f64>().sqrt();
        dir.iter_mut().flatten().for_each(|x| *x /= norm);
        let analytic: f64 = grad.iter().flatten().zip(dir.iter().flatten()).map(|(g, d)| g * d).sum();
        let numeric = (f(&shifted(model, &dir, h)).0 - f(&shifted(model, &dir, -h)).0) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

pub fn train_batch(video: &VideoSequence, frames: &[usize], seed: u64) -> Vec<TrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    frames.iter().map(|&f| augment_sample(&video.samples[f], &AugConfig::default(), &mut rng).unwrap()).collect()
}

pub fn view_pairs(video: &VideoSequence, frame: usize, n: usize, seed: u64) -> Vec<(AugmentedView, AugmentedView)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_pair(&video.samples[frame].image, &AugConfig::default(), &mut rng).unwrap()).collect()
}

pub fn joint_fn<'a>(batch: &'a [TrainExample]) -> Box<LossGrad<'a>> {
    Box::new(move |m: &ModelState| {
        joint_loss_grad(m, batch, &LossConfig::default(), NormModes { train: ComponentSet::ALL }).unwrap()
    })
}

pub fn consistency_fn<'a>(pairs: &'a [(AugmentedView, AugmentedView)]) -> Box<LossGrad<'a>> {
    Box::new(move |m: &ModelState| {
        let norm = NormModes { train: ComponentSet::of(&[Component::ImageEncoder]) };
        consistency_loss_grad(m, pairs, &LossConfig::default(), norm).unwrap()
    })
}
