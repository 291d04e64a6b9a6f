use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dattt::data::{load_dataset, LoadOptions};
use dattt::eval::{evaluate, EpochPoint};
use dattt::harness::{
    adapt_and_score, generate_splits, load_predictions, render_run_plots, run_ablation, run_pipeline, save_predictions, train_model,
    write_traces, AblationKind, ExperimentConfig,
};
use dattt::model::{load_checkpoint, save_checkpoint};
use dattt::ttt::{adapt_video_with, SnapshotScope};

#[derive(Parser)]
#[command(name = "dattt", version, about = "Depth-aware test-time training for video object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML config, or a run's manifest.json to replay it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set ttt.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<String>) -> Result<ExperimentConfig> {
        let mut all = self.overrides.clone();
        all.extend(extra);
        Ok(ExperimentConfig::load(self.config.as_deref(), &all)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and test splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage-1 joint segmentation and depth training.
    Train {
        /// Training dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Adapt a checkpoint to every video of a dataset and predict masks.
    Ttt {
        #[arg(long)]
        ckpt: PathBuf,
        /// Test dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        clips: Option<usize>,
        /// Also write the adapted weights of every snapshot.
        #[arg(long)]
        save_snapshots: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score predicted masks against a dataset.
    Eval {
        /// Directory of `<video>/<frame>.png` masks.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch curves (`curves.json` from `ttt`) to attach to the report.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Render curve plots and mask overlays for a `run` or `ttt` output directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Test dataset directory; defaults to `<run>/data/test`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sweep one knob and tabulate J/F deltas against no adaptation.
    Ablate {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Full pipeline: data, training, adaptation, evaluation, plots, manifest.
    Run {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load(dir: &Path) -> Result<Vec<dattt::data::VideoSequence>> {
    load_dataset(dir, &LoadOptions::default()).with_context(|| format!("loading {}", dir.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { out, cfg } => {
            let cfg = cfg.load(vec![])?;
            generate_splits(&cfg, &out)?;
            println!("wrote {}/train and {}/test", out.display(), out.display());
        }
        Command::Train { data, out, cfg } => {
            let cfg = cfg.load(vec![])?;
            let train = load(&data)?;
            std::fs::create_dir_all(&out)?;
            let (model, history) = train_model(&cfg, &train)?;
            save_checkpoint(&model, &out.join("stage1.ckpt"))?;
            history.write_csv(&out.join("history.csv"))?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let last = history.steps.last().map_or(f64::NAN, |s| s.joint);
            println!("trained {} steps, final joint loss {last:.4}", history.steps.len());
        }
        Command::Ttt { ckpt, data, out, strategy, objective, epochs, clips, save_snapshots, cfg } => {
            let mut extra = Vec::new();
            if let Some(s) = strategy {
                extra.push(format!("ttt.strategy=\"{s}\""));
            }
            if let Some(o) = objective {
                extra.push(format!("ttt.objective=\"{o}\""));
            }
            if let Some(e) = epochs {
                extra.push(format!("ttt.epochs={e}"));
            }
            if let Some(n) = clips {
                extra.push(format!("ttt.clips={n}"));
            }
            let cfg = cfg.load(extra)?;
            let ttt = cfg.ttt_config();
            let model = load_checkpoint(&ckpt)?;
            let test = load(&data)?;
            std::fs::create_dir_all(&out)?;
            let a = adapt_and_score(&model, &test, &ttt)?;
            write_traces(&out, &a.traces)?;
            save_predictions(&out.join("predictions").join("none"), &a.baseline, &test)?;
            save_predictions(&out.join("predictions").join("final"), &a.adapted, &test)?;
            write_json(&out.join("curves.json"), &a.report.curves)?;
            a.report.write_json(&out.join("report.json"))?;
            a.report.write_csv(&out.join("report.csv"))?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            if save_snapshots {
                for v in &test {
                    let dir = out.join("snapshots").join(&v.video_id);
                    std::fs::create_dir_all(&dir)?;
                    adapt_video_with(&model, v, &ttt, &mut |ev| {
                        let name = match ev.scope {
                            SnapshotScope::Video => format!("epoch_{:02}.ckpt", ev.epoch),
                            SnapshotScope::Frame(f) => format!("frame_{f:05}_epoch_{:02}.ckpt", ev.epoch),
                        };
                        save_checkpoint(ev.state, &dir.join(name))
                    })?;
                }
            }
            println!(
                "{}: J {:.4} -> {:.4} ({:+.4})",
                ttt.strategy.name(),
                a.baseline_report.aggregate.j,
                a.report.aggregate.j,
                a.delta_j()
            );
        }
        Command::Eval { pred, data, out, curves } => {
            let dataset = load(&data)?;
            let preds = load_predictions(&pred, &dataset)?;
            let mut report = evaluate(&preds, &dataset, true)?;
            if let Some(c) = curves {
                let text = std::fs::read_to_string(&c).with_context(|| format!("reading {}", c.display()))?;
                report.curves = serde_json::from_str::<BTreeMap<String, Vec<EpochPoint>>>(&text)?;
            }
            std::fs::create_dir_all(&out)?;
            report.write_json(&out.join("report.json"))?;
            report.write_csv(&out.join("report.csv"))?;
            println!("J {:.4} F {:.4} over {} videos", report.aggregate.j, report.aggregate.f, report.per_video.len());
        }
        Command::Report { run, data } => {
            let data = data.unwrap_or_else(|| run.join("data").join("test"));
            let test = load(&data)?;
            let report = dattt::eval::MetricsReport::read_json(&run.join("report.json"))?;
            let baseline = load_predictions(&run.join("predictions").join("none"), &test)?;
            let adapted = load_predictions(&run.join("predictions").join("final"), &test)?;
            render_run_plots(&run.join("plots"), &report, &test, &baseline, &adapted)?;
            println!("wrote {}", run.join("plots").display());
        }
        Command::Ablate { kind, out, cfg } => {
            let kind = AblationKind::parse(&kind)?;
            let cfg = cfg.load(vec![])?;
            let table = run_ablation(kind, &cfg, &out)?;
            print!("{}", table.to_markdown());
        }
        Command::Run { out, cfg } => {
            let cfg = cfg.load(vec![])?;
            let m = run_pipeline(&cfg, &out)?;
            let s = &m.summary;
            println!(
                "{}: J {:.4} -> {:.4} ({:+.4}), F {:.4} -> {:.4}; manifest {}",
                s.strategy,
                s.baseline_j,
                s.j,
                s.delta_j,
                s.baseline_f,
                s.f,
                out.join("manifest.json").display()
            );
        }
    }
    Ok(())
}
