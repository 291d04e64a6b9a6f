mod common;

use common::*;
use dattt::augment::AugConfig;
use dattt::model::{Component, ModelState};
use dattt::nn::AdamConfig;
use dattt::ttt::{
    adapt_video, bn_stats_adapt, build_schedule, infer_video, norm_layer_inputs, predict_per_epoch, tent_adapt, InitSource,
    Objective, SnapshotScope, Strategy, TTTConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(strategy: Strategy, objective: Objective, epochs: usize) -> TTTConfig {
    TTTConfig {
        strategy,
        objective,
        epochs,
        batch_size: 2,
        optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
        ..TTTConfig::default()
    }
}

fn others_identical(a: &ModelState, b: &ModelState) -> bool {
    Component::ALL.iter().filter(|&&c| c != Component::ImageEncoder).all(|&c| a.component_bits_equal(b, c))
}

#[test]
fn freezing_contract_for_every_strategy_and_objective() {
    let v = video(10, 1);
    let pretrained = tiny_model(1);
    for strategy in Strategy::ALL {
        for objective in Objective::ALL {
            let a = adapt_video(&pretrained, &v, &cfg(strategy, objective, 2)).unwrap();
            assert!(!a.snapshots.is_empty());
            for s in &a.snapshots {
                assert!(others_identical(&pretrained, &s.state), "{strategy:?}/{objective:?} touched a frozen component");
                if strategy != Strategy::None {
                    assert!(!s.state.component_bits_equal(&pretrained, Component::ImageEncoder), "{strategy:?} did not adapt");
                }
            }
        }
    }
}

#[test]
fn identical_views_give_zero_loss_and_no_update() {
    let v = video(3, 2);
    let pretrained = tiny_model(2);
    let c = TTTConfig { aug: AugConfig::none(), ..cfg(Strategy::TttLtv, Objective::Consistency, 2) };
    let a = adapt_video(&pretrained, &v, &c).unwrap();
    assert!(a.trace.rows.iter().all(|r| r.loss == Some(0.0)), "{:?}", a.trace.rows);
    let last = &a.snapshots.last().unwrap().state;
    for (p, q) in pretrained.params.iter().zip(&last.params) {
        let diff = p.data.iter().zip(&q.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12, "{} moved by {diff:e}", p.name);
    }
}

#[test]
fn no_adaptation_returns_the_pretrained_model() {
    let v = video(4, 3);
    let pretrained = tiny_model(3);
    let a = adapt_video(&pretrained, &v, &cfg(Strategy::None, Objective::Consistency, 3)).unwrap();
    assert!(a.trace.is_empty());
    assert_eq!(a.snapshots.len(), 1);
    assert_eq!(params_bits(&a.snapshots[0].state), params_bits(&pretrained));
}

#[test]
fn snapshots_and_trace_follow_the_schedule() {
    let v = video(5, 4);
    let pretrained = tiny_model(4);
    let ltv = adapt_video(&pretrained, &v, &cfg(Strategy::TttLtv, Objective::Consistency, 3)).unwrap();
    let epochs: Vec<usize> = ltv.snapshots.iter().map(|s| s.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3]);
    assert!(ltv.snapshots.iter().all(|s| s.scope == SnapshotScope::Video));
    assert_eq!(ltv.trace.len(), 15);

    let n = adapt_video(&pretrained, &v, &cfg(Strategy::TttN, Objective::Consistency, 2)).unwrap();
    assert_eq!(n.trace.len(), 10);
    let frames: Vec<SnapshotScope> = n.snapshots.iter().map(|s| s.scope).collect();
    assert_eq!(frames, (0..5).map(SnapshotScope::Frame).collect::<Vec<_>>());

    let (curves, trace) = predict_per_epoch(&pretrained, &v, &cfg(Strategy::TttMwi, Objective::Consistency, 2)).unwrap();
    assert_eq!(curves.len(), 2);
    assert!(curves.iter().all(|e| e.len() == 5));
    assert_eq!(trace.len(), 10);
}

#[test]
fn adaptation_is_deterministic() {
    let v = video(3, 5);
    let pretrained = tiny_model(5);
    let c = cfg(Strategy::TttLtv, Objective::Consistency, 2);
    let a = adapt_video(&pretrained, &v, &c).unwrap();
    let b = adapt_video(&pretrained, &v, &c).unwrap();
    assert_eq!(params_bits(&a.snapshots[1].state), params_bits(&b.snapshots[1].state));
}

#[test]
fn inference_is_deterministic_and_binary() {
    let v = video(4, 6);
    let m = tiny_model(6);
    let a = infer_video(&m, &v).unwrap();
    assert_eq!(a, infer_video(&m, &v).unwrap());
    assert_eq!(a.len(), 4);
    assert!(a.iter().all(|mask| mask.len() == SIDE * SIDE));
}

#[test]
fn zero_logits_predict_background() {
    let v = video(2, 7);
    let mut m = tiny_model(7);
    for p in m.params.iter_mut().filter(|p| p.name.starts_with("mask_decoder.head")) {
        p.data.iter_mut().for_each(|x| *x = 0.0);
    }
    let out = dattt::model::forward(&m, &v.samples[0].image, &v.samples[0].flow, true).unwrap();
    assert!(out.mask_logits.iter().all(|&z| z == 0.0));
    assert!(infer_video(&m, &v).unwrap().iter().flatten().all(|&b| !b));
}

#[test]
fn pseudo_objective_needs_depth_maps() {
    let mut v = video(3, 8);
    v.samples[1].has_depth = false;
    let err = adapt_video(&tiny_model(8), &v, &cfg(Strategy::TttLtv, Objective::PseudoDepth, 1)).err().unwrap();
    assert!(err.to_string().contains("frame 1"), "{err}");
    assert!(adapt_video(&tiny_model(8), &v, &cfg(Strategy::TttLtv, Objective::Consistency, 1)).is_ok());
}

#[test]
fn tent_updates_only_normalization_affine_parameters() {
    let v = video(10, 9);
    let m = tiny_model(9);
    let c = TTTConfig { optimizer: AdamConfig { lr: 1e-2, ..AdamConfig::default() }, ..cfg(Strategy::TttLtv, Objective::Consistency, 6) };
    let (adapted, trace) = tent_adapt(&m, &v, &c).unwrap();
    let mut changed = 0;
    for (p, q) in m.params.iter().zip(&adapted.params) {
        if p.kind.is_norm_affine() {
            changed += (p.data != q.data) as usize;
        } else {
            assert_eq!(p.data, q.data, "{} changed", p.name);
        }
    }
    assert!(changed > 0);
    // One window is one pass over the video, so windows see the same frames.
    let losses: Vec<f64> = trace.rows.iter().map(|r| r.loss.unwrap()).collect();
    let windows: Vec<f64> = losses.chunks(10).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    assert!(windows.windows(2).all(|w| w[1] <= w[0]), "{windows:?}");

    let (same, trace) = tent_adapt(&m, &v, &TTTConfig { epochs: 0, strategy: Strategy::None, ..c }).unwrap();
    assert!(trace.is_empty());
    assert_eq!(params_bits(&same), params_bits(&m));
}

fn moments(xs: &[dattt::nn::Tensor]) -> (Vec<f64>, Vec<f64>) {
    let c = xs[0].channels();
    let n = (xs.len() * xs[0].plane_len()) as f64;
    let mean: Vec<f64> = (0..c).map(|k| xs.iter().flat_map(|x| x.plane(k)).sum::<f64>() / n).collect();
    let var = (0..c).map(|k| xs.iter().flat_map(|x| x.plane(k)).map(|v| (v - mean[k]).powi(2)).sum::<f64>() / n).collect();
    (mean, var)
}

#[test]
fn bn_stats_match_recomputed_moments() {
    let v = video(6, 10);
    let m = generic_model(10);
    let adapted = bn_stats_adapt(&m, &v).unwrap();
    assert_eq!(params_bits(&adapted), params_bits(&m));
    let layers = norm_layer_inputs(&adapted, &v).unwrap();
    assert_eq!(layers.len(), 8);
    for (name, xs) in &layers {
        let (mean, var) = moments(xs);
        let rm = &adapted.buffer(&format!("{name}.running_mean")).unwrap().data;
        let rv = &adapted.buffer(&format!("{name}.running_var")).unwrap().data;
        for k in 0..mean.len() {
            assert!((rm[k] - mean[k]).abs() <= 1e-5, "{name} mean[{k}]");
            assert!((rv[k] - var[k]).abs() <= 1e-5, "{name} var[{k}]");
        }
    }
    let twice = bn_stats_adapt(&adapted, &v).unwrap();
    for (a, b) in adapted.buffers.iter().zip(&twice.buffers) {
        let diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-6, "{} drifted by {diff:e}", a.name);
    }
}

fn check_laws(t: usize, e: usize, strategy: Strategy, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = build_schedule(t, strategy, e, None, &mut rng).unwrap();
    assert_eq!(s.steps.len(), e * t);
    let frames: Vec<usize> = s.steps.iter().map(|x| x.frame).collect();
    let inits: Vec<InitSource> = s.steps.iter().map(|x| x.init).collect();
    match strategy {
        Strategy::TttN | Strategy::TttMwi => {
            let expected: Vec<usize> = (0..t).flat_map(|f| std::iter::repeat_n(f, e)).collect();
            assert_eq!(frames, expected);
            for (i, init) in inits.iter().enumerate() {
                let fresh = if strategy == Strategy::TttN { i % e == 0 } else { i == 0 };
                assert_eq!(*init == InitSource::Pretrained, fresh, "step {i}");
            }
            assert_eq!(s.reloads(), if strategy == Strategy::TttN { t } else { 1 });
        }
        Strategy::TttLtv => {
            let expected: Vec<usize> = (0..e).flat_map(|_| 0..t).collect();
            assert_eq!(frames, expected);
            assert_eq!(s.reloads(), 1);
            assert_eq!(inits[0], InitSource::Pretrained);
        }
        Strategy::None => assert!(s.steps.is_empty()),
    }
}

#[test]
fn schedule_laws_over_the_full_grid() {
    for t in 1..=50 {
        for e in 1..=10 {
            for strategy in [Strategy::TttN, Strategy::TttMwi, Strategy::TttLtv] {
                check_laws(t, e, strategy, (t * 11 + e) as u64);
            }
        }
    }
}

proptest! {
    #[test]
    fn clip_sampling_visits_each_residue_once_per_epoch(
        t in 1usize..120, n in 1usize..25, e in 1usize..4, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = build_schedule(t, Strategy::TttLtv, e, Some(n), &mut rng).unwrap();
        prop_assert_eq!(s.warnings.len(), usize::from(n > t));
        let n = n.min(t);
        prop_assert_eq!(s.steps.len(), e * n);
        for pass in s.steps.chunks(n) {
            let mut residues: Vec<usize> = pass.iter().map(|x| x.frame % n).collect();
            prop_assert!(pass.windows(2).all(|w| w[0].frame < w[1].frame));
            residues.sort_unstable();
            prop_assert_eq!(residues, (0..n).collect::<Vec<_>>());
            prop_assert!(pass.iter().all(|x| x.frame < t));
        }
    }

    #[test]
    fn clip_sampled_naive_schedule_resets_per_visited_frame(
        t in 1usize..60, n in 1usize..12, e in 1usize..5, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = build_schedule(t, Strategy::TttN, e, Some(n), &mut rng).unwrap();
        let n = n.min(t);
        prop_assert_eq!(s.steps.len(), e * n);
        prop_assert_eq!(s.reloads(), n);
        prop_assert_eq!(s.frames.len(), n);
    }
}
