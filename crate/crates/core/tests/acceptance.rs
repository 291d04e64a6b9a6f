//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 8 and 9 are directional results measured on synthetic data; they
//! are reported but only fail the target when `DATTT_ACCEPT_STRICT=1`.

mod common;

use std::time::{Duration, Instant};

use common::*;
use dattt::augment::{warp_to_canonical, GeometricRecord, Interp};
use dattt::data::{generate_video, sample_scene_specs, SplitConfig};
use dattt::eval::{f_measure, jaccard};
use dattt::harness::{adapt_and_score, prepare_data, run_pipeline, train_model, ExperimentConfig};
use dattt::losses::{silog_loss, SilogConfig};
use dattt::model::{forward, init_model, Component, ModelConfig};
use dattt::nn::Tensor;
use dattt::ttt::{adapt_video, build_schedule, InitSource, Objective, Strategy, TTTConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn pixel_oracle(gt: &[bool], pred: &[bool]) -> (f64, f64) {
    let tp = gt.iter().zip(pred).filter(|(g, p)| **g && **p).count();
    let fp = gt.iter().zip(pred).filter(|(g, p)| !**g && **p).count();
    let fneg = gt.iter().zip(pred).filter(|(g, p)| **g && !**p).count();
    if tp + fp + fneg == 0 {
        return (1.0, 1.0);
    }
    let j = tp as f64 / (tp + fp + fneg) as f64;
    if tp == 0 {
        return (j, 0.0);
    }
    let (p, r) = (tp as f64 / (tp + fp) as f64, tp as f64 / (tp + fneg) as f64);
    (j, 2.0 * p * r / (p + r))
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0usize;
    let mut check = |gt: &[bool], pred: &[bool]| {
        let (j, f) = pixel_oracle(gt, pred);
        if jaccard(gt, pred).unwrap() != j || f_measure(gt, pred).unwrap() != f {
            mismatches += 1;
        }
    };
    for _ in 0..1000 {
        let gt: Vec<bool> = (0..64).map(|_| rng.random()).collect();
        let pred: Vec<bool> = (0..64).map(|_| rng.random()).collect();
        check(&gt, &pred);
    }
    let bits = |m: u32| -> Vec<bool> { (0..9).map(|i| m >> i & 1 == 1).collect() };
    let mut f_below_j = 0usize;
    for a in 0..512u32 {
        let gt = bits(a);
        for b in 0..512u32 {
            let pred = bits(b);
            check(&gt, &pred);
            f_below_j += (f_measure(&gt, &pred).unwrap() < jaccard(&gt, &pred).unwrap()) as usize;
        }
    }
    let t = start.elapsed();
    outcome(
        mismatches == 0 && f_below_j == 0 && t < Duration::from_secs(60),
        format!("{mismatches} mismatches over 1000 random 8x8 + 262144 3x3 pairs, F<J in {f_below_j}, {}", secs(t)),
    )
}

fn silog_closed_forms() -> Outcome {
    let cfg = SilogConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r: Vec<f64> = (0..256).map(|_| rng.random_range(4.0..8.0)).collect();
    let zero = silog_loss(&r, &r, None, &cfg).unwrap().abs();
    let e: Vec<f64> = r.iter().map(|v| v * std::f64::consts::E).collect();
    let closed = (silog_loss(&e, &r, None, &cfg).unwrap() - 10.0 * 0.15f64.sqrt()).abs();
    let inv = SilogConfig { lambda_v: 1.0, eps_log: 0.0, ..cfg };
    let p: Vec<f64> = (0..256).map(|_| rng.random_range(0.5..20.0)).collect();
    let base = silog_loss(&p, &r, None, &inv).unwrap();
    let scale_err = [0.1, 0.5, 3.0, 42.0]
        .iter()
        .map(|s| {
            let q: Vec<f64> = p.iter().map(|v| v * s).collect();
            (silog_loss(&q, &r, None, &inv).unwrap() - base).abs()
        })
        .fold(0.0, f64::max);
    outcome(
        zero <= 1e-9 && closed <= 1e-6 && scale_err <= 1e-9,
        format!("|L(r,r)| {zero:.1e}, |L(e r,r) - 10 sqrt(0.15)| {closed:.1e}, scale drift {scale_err:.1e}"),
    )
}

fn gradient_checks() -> Outcome {
    let model = generic_model(1);
    let v = video(4, 3);
    let batch = train_batch(&v, &[0, 2], 11);
    let joint = worst_directional_error(&model, &*joint_fn(&batch), 100, 5);
    let pairs = view_pairs(&v, 1, 2, 12);
    let cons = worst_directional_error(&model, &*consistency_fn(&pairs), 100, 6);
    let n = model.num_params();
    outcome(
        n <= 10_000 && joint < 1e-3 && cons < 1e-3,
        format!("{n} params, 100 directions each: joint {joint:.1e}, consistency {cons:.1e}"),
    )
}

fn freezing_contract() -> Outcome {
    let start = Instant::now();
    let split = SplitConfig::default();
    let spec = sample_scene_specs(&split, "frz", 1, 10, 9, split.photometric.shifted(&split.shift)).remove(0);
    let v = generate_video(&spec).unwrap();
    let pretrained = init_model(&ModelConfig::default(), 4).unwrap();
    let mut violations = Vec::new();
    let mut runs = 0;
    for strategy in Strategy::ALL {
        for objective in Objective::ALL {
            let cfg = TTTConfig { strategy, objective, epochs: 2, ..TTTConfig::default() };
            for s in adapt_video(&pretrained, &v, &cfg).unwrap().snapshots {
                runs += 1;
                for c in Component::ALL.into_iter().filter(|&c| c != Component::ImageEncoder) {
                    if !s.state.component_bits_equal(&pretrained, c) {
                        violations.push(format!("{}/{}:{}", strategy.name(), objective.name(), c.name()));
                    }
                }
            }
        }
    }
    let t = start.elapsed();
    outcome(
        violations.is_empty() && t < Duration::from_secs(60),
        format!("{runs} snapshots over 8 strategy/objective runs, violations {violations:?}, {}", secs(t)),
    )
}

fn modulation_identity() -> Outcome {
    let split = SplitConfig::default();
    let spec = sample_scene_specs(&split, "mod", 1, 2, 3, split.photometric).remove(0);
    let v = generate_video(&spec).unwrap();
    let s = &v.samples[1];
    let fresh = init_model(&ModelConfig::default(), 5).unwrap();
    let on = forward(&fresh, &s.image, &s.flow, true).unwrap();
    let off = forward(&fresh, &s.image, &s.flow, false).unwrap();
    let diff = on.mask_logits.iter().zip(&off.mask_logits).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut trained = fresh.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for p in trained.params.iter_mut().filter(|p| p.component == Component::Modulation) {
        p.data.iter_mut().for_each(|x| *x += rng.random_range(-0.1..0.1));
    }
    let noisy = Tensor::from_vec(2, s.flow.height(), s.flow.width(), s.flow.data().iter().map(|f| f + rng.random_range(-3.0..3.0)).collect());
    let a = forward(&trained, &s.image, &s.flow, true).unwrap();
    let b = forward(&trained, &s.image, &noisy, true).unwrap();
    let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let depth_same = bits(&a.depth) == bits(&b.depth) && bits(&a.depth_raw) == bits(&b.depth_raw);
    let mask_moves = a.mask_logits != b.mask_logits;
    outcome(
        diff <= 1e-6 && depth_same && mask_moves,
        format!("zero-init max |on - off| {diff:.1e}; depth bitwise flow-invariant: {depth_same}; mask responds to flow: {mask_moves}"),
    )
}

fn random_record(rng: &mut ChaCha8Rng) -> GeometricRecord {
    let (h, w) = (rng.random_range(8..96), rng.random_range(8..96));
    let mut g = GeometricRecord::uncropped(h, w, rng.random(), rng.random_range(0.5..2.0));
    let (rh, rw) = g.resized;
    let frac: f64 = rng.random_range(0.2..=1.0);
    let ch = ((rh as f64 * frac).round() as usize).clamp(1, rh);
    let cw = ((rw as f64 * frac).round() as usize).clamp(1, rw);
    g.crop_origin = (rng.random_range(0..=rh - ch), rng.random_range(0..=rw - cw));
    g.crop_size = (ch, cw);
    g
}

fn augmentation_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut bad, mut empty) = (0, 0);
    for _ in 0..1000 {
        let g = random_record(&mut rng);
        let (h, w) = g.base;
        let mask: Vec<f64> = (0..h * w).map(|_| f64::from(rng.random_bool(0.4))).collect();
        let view = g.apply(&Tensor::from_vec(1, h, w, mask.clone()), Interp::Nearest).unwrap();
        let (back, valid) = warp_to_canonical(view.data(), &g, (h, w), Interp::Nearest).unwrap();
        empty += valid.iter().all(|v| !v) as usize;
        bad += (0..h * w).any(|i| valid[i] && back[i] != mask[i]) as usize;
    }
    outcome(bad == 0 && empty == 0, format!("1000 records: {bad} inexact round trips, {empty} empty validity sets"))
}

fn schedule_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut broken = Vec::new();
    for t in 1..=50 {
        for e in 1..=10 {
            for strategy in [Strategy::TttN, Strategy::TttMwi, Strategy::TttLtv] {
                let s = build_schedule(t, strategy, e, None, &mut rng).unwrap();
                let frames: Vec<usize> = s.steps.iter().map(|x| x.frame).collect();
                let pre: Vec<bool> = s.steps.iter().map(|x| x.init == InitSource::Pretrained).collect();
                let (order, fresh): (Vec<usize>, Vec<bool>) = match strategy {
                    Strategy::TttLtv => ((0..e).flat_map(|_| 0..t).collect(), (0..e * t).map(|i| i == 0).collect()),
                    Strategy::TttN => ((0..t).flat_map(|f| vec![f; e]).collect(), (0..e * t).map(|i| i % e == 0).collect()),
                    _ => ((0..t).flat_map(|f| vec![f; e]).collect(), (0..e * t).map(|i| i == 0).collect()),
                };
                let reloads = if strategy == Strategy::TttN { t } else { 1 };
                if s.steps.len() != e * t || frames != order || pre != fresh || s.reloads() != reloads {
                    broken.push(format!("{}(T={t},E={e})", strategy.name()));
                }
            }
        }
    }
    let mut clip_ok = true;
    for e in 1..=5 {
        let s = build_schedule(100, Strategy::TttLtv, e, Some(10), &mut rng).unwrap();
        clip_ok &= s.steps.len() == 10 * e;
        for pass in s.steps.chunks(10) {
            let mut r: Vec<usize> = pass.iter().map(|x| x.frame % 10).collect();
            r.sort_unstable();
            clip_ok &= r == (0..10).collect::<Vec<_>>();
        }
    }
    outcome(
        broken.is_empty() && clip_ok,
        format!("1500 schedules, violations {broken:?}; 10 clips over 100 frames one per residue: {clip_ok}"),
    )
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct SeedRun {
    none: f64,
    ltv: f64,
    n: f64,
    pseudo: f64,
    main_time: Duration,
    pseudo_time: Duration,
}

fn seed_run(seed: u64) -> SeedRun {
    let start = Instant::now();
    let work = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
    let splits = prepare_data(&cfg, work.path()).unwrap();
    let (model, _) = train_model(&cfg, &splits.train).unwrap();
    let score = |strategy, objective| {
        let ttt = TTTConfig { strategy, objective, ..cfg.ttt_config() };
        adapt_and_score(&model, &splits.test, &ttt).unwrap()
    };
    let ltv = score(Strategy::TttLtv, Objective::Consistency);
    let n = score(Strategy::TttN, Objective::Consistency);
    let main_time = start.elapsed();
    let t = Instant::now();
    let pseudo = score(Strategy::TttLtv, Objective::PseudoDepth);
    SeedRun {
        none: ltv.baseline_report.aggregate.j,
        ltv: ltv.report.aggregate.j,
        n: n.report.aggregate.j,
        pseudo: pseudo.report.aggregate.j,
        main_time,
        pseudo_time: t.elapsed(),
    }
}

fn pts(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn directional(runs: &[SeedRun]) -> Outcome {
    let wins: Vec<bool> = runs.iter().map(|r| r.ltv >= r.n && r.ltv >= r.none + 0.02).collect();
    let time: Duration = runs.iter().map(|r| r.main_time).sum();
    let per_seed: Vec<String> = runs
        .iter()
        .zip(SEEDS)
        .map(|(r, s)| format!("s{s} none {} N {} LTV {}", pts(r.none), pts(r.n), pts(r.ltv)))
        .collect();
    let k = wins.iter().filter(|&&w| w).count();
    outcome(k >= 4 && time < Duration::from_secs(900), format!("{k}/5 seeds hold [{}], {}", per_seed.join("; "), secs(time)))
}

fn objective_direction(runs: &[SeedRun]) -> Outcome {
    let per_seed: Vec<String> = runs
        .iter()
        .zip(SEEDS)
        .map(|(r, s)| format!("s{s} consistency {:+.1} pseudo {:+.1}", 100.0 * (r.ltv - r.none), 100.0 * (r.pseudo - r.none)))
        .collect();
    let k = runs.iter().filter(|r| r.ltv - r.none >= r.pseudo - r.none).count();
    let time: Duration = runs.iter().map(|r| r.pseudo_time).sum();
    outcome(k >= 4, format!("{k}/5 seeds hold [{}], extra {}", per_seed.join("; "), secs(time)))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let table = toml::Table::try_from(ExperimentConfig::default()).unwrap();
    let reduced = ["data.train_videos=4", "data.test_videos=2", "data.test_frames=8", "train.max_steps=20", "ttt.epochs=2"]
        .map(String::from);
    let cfg = ExperimentConfig::from_table(table, &reduced).unwrap();
    run_pipeline(&cfg, &dir.path().join("seed_run")).unwrap();
    let manifest = dir.path().join("seed_run").join("manifest.json");
    let replay = ExperimentConfig::load(Some(&manifest), &[]).unwrap();
    let mut reports = Vec::new();
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        run_pipeline(&replay, &out).unwrap();
        reports.push(std::fs::read(out.join("report.json")).unwrap());
    }
    let original = std::fs::read(dir.path().join("seed_run").join("report.json")).unwrap();
    let same = reports[0] == reports[1];
    outcome(same && reports[0] == original, format!("two replays of one manifest: report.json identical {same}, matches original {}", reports[0] == original))
}

fn main() {
    let strict = std::env::var("DATTT_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    let mut results: Vec<(usize, &str, Outcome, bool)> = Vec::new();
    let mut report = |id: usize, name: &'static str, o: Outcome, required: bool| {
        println!("criterion {id:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o, required));
    };
    report(1, "metric oracle", metric_oracle(), true);
    report(2, "silog closed forms", silog_closed_forms(), true);
    report(3, "gradient checks", gradient_checks(), true);
    report(4, "freezing contract", freezing_contract(), true);
    report(5, "modulation identity", modulation_identity(), true);
    report(6, "augmentation round trip", augmentation_round_trip(), true);
    report(7, "schedule laws", schedule_laws(), true);
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| seed_run(s)).collect();
    report(8, "ltv beats naive and no adaptation", directional(&runs), strict);
    report(9, "consistency beats pseudo depth", objective_direction(&runs), strict);
    report(10, "determinism", determinism(), true);

    let failed: Vec<usize> = results.iter().filter(|r| r.3 && !r.2.pass).map(|r| r.0).collect();
    let reported: Vec<usize> = results.iter().filter(|r| !r.3 && !r.2.pass).map(|r| r.0).collect();
    if !reported.is_empty() {
        println!("not enforced (set DATTT_ACCEPT_STRICT=1): failing criteria {reported:?}");
    }
    if !failed.is_empty() {
        eprintln!("required criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
