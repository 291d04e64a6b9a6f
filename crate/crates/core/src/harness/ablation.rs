//! Sweeps over one experiment knob, reported as deltas against no adaptation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{adapt_and_score, create_dir, prepare_data, train_model, write_json, write_text, ExperimentConfig};
use crate::augment::AUG_KINDS;
use crate::error::{Error, Result};
use crate::ttt::{Objective, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Lambda,
    Augmentation,
    Strategy,
    Objective,
    Clips,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] =
        [AblationKind::Lambda, AblationKind::Augmentation, AblationKind::Strategy, AblationKind::Objective, AblationKind::Clips];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Lambda => "lambda",
            AblationKind::Augmentation => "augmentation",
            AblationKind::Strategy => "strategy",
            AblationKind::Objective => "objective",
            AblationKind::Clips => "clips",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::validation("ablation kind", format!("unknown kind `{s}`; valid: {}", valid.join(", ")))
        })
    }
}

pub const LAMBDA_GRID: [f64; 3] = [1.0, 0.1, 0.01];
pub const CLIP_GRID: [usize; 4] = [1, 5, 10, 20];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Mean J and F without adaptation for the model this row adapts.
    pub baseline_j: f64,
    pub baseline_f: f64,
    pub j: f64,
    pub f: f64,
    pub delta_j: f64,
    pub delta_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

fn signed(x: f64) -> String {
    let v = 100.0 * x;
    if v >= 0.0 {
        format!("+{v:.1}")
    } else {
        format!("-{:.1}", -v)
    }
}

impl AblationTable {
    /// Markdown table in points (J and F scaled by 100) with signed deltas.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} | J | F | ΔJ | ΔF |\n|---|---|---|---|---|\n", self.kind.name());
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {:.1} | {:.1} | {} | {} |", r.label, 100.0 * r.j, 100.0 * r.f, signed(r.delta_j), signed(r.delta_f));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["label", "baseline_j", "baseline_f", "j", "f", "delta_j", "delta_f"]).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.baseline_j.to_string(),
                r.baseline_f.to_string(),
                r.j.to_string(),
                r.f.to_string(),
                r.delta_j.to_string(),
                r.delta_f.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Variant labels and configs for a sweep.
fn variants(kind: AblationKind, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match kind {
        AblationKind::Lambda => LAMBDA_GRID.iter().map(|&l| (format!("lambda={l}"), with(&|c| c.loss.lambda = l))).collect(),
        AblationKind::Augmentation => {
            let mut v: Vec<_> = AUG_KINDS
                .iter()
                .map(|&k| (format!("w/o {k}"), with(&|c| c.ttt_aug_off(k))))
                .collect();
            v.push(("full".into(), base.clone()));
            v
        }
        AblationKind::Strategy => Strategy::ALL.iter().map(|&s| (s.name().to_string(), with(&|c| c.ttt.strategy = s))).collect(),
        AblationKind::Objective => Objective::ALL.iter().map(|&o| (o.name().to_string(), with(&|c| c.ttt.objective = o))).collect(),
        AblationKind::Clips => CLIP_GRID.iter().map(|&n| (format!("clips={n}"), with(&|c| c.ttt.clips = Some(n)))).collect(),
    }
}

impl ExperimentConfig {
    /// Disables one augmentation during adaptation only.
    fn ttt_aug_off(&mut self, kind: &str) {
        let mut aug = self.ttt_aug.clone().unwrap_or_else(|| self.aug.clone());
        aug.set_enabled(kind, false).expect("known augmentation");
        self.ttt_aug = Some(aug);
    }
}

/// Runs the sweep of `kind` around `base`. Stage-1 training is shared by
/// every row except for the lambda sweep, which retrains per value. Tables
/// are written to `out` as `ablation_<kind>.{json,csv,md}`.
pub fn run_ablation(kind: AblationKind, base: &ExperimentConfig, out: &Path) -> Result<AblationTable> {
    base.validate()?;
    create_dir(out)?;
    let splits = prepare_data(base, out)?;
    let shared = if kind == AblationKind::Lambda { None } else { Some(train_model(base, &splits.train)?.0) };
    let mut rows = Vec::new();
    for (label, cfg) in variants(kind, base) {
        cfg.validate()?;
        let trained;
        let model = match &shared {
            Some(m) => m,
            None => {
                trained = train_model(&cfg, &splits.train)?.0;
                &trained
            }
        };
        let a = adapt_and_score(model, &splits.test, &cfg.ttt_config())?;
        log::info!("{}: {label}: J {:.4} ({:+.4})", kind.name(), a.report.aggregate.j, a.delta_j());
        rows.push(AblationRow {
            label,
            baseline_j: a.baseline_report.aggregate.j,
            baseline_f: a.baseline_report.aggregate.f,
            j: a.report.aggregate.j,
            f: a.report.aggregate.f,
            delta_j: a.delta_j(),
            delta_f: a.delta_f(),
        });
    }
    let table = AblationTable { kind, rows };
    let stem = format!("ablation_{}", kind.name());
    write_json(&out.join(format!("{stem}.json")), &table)?;
    table.write_csv(&out.join(format!("{stem}.csv")))?;
    write_text(&out.join(format!("{stem}.md")), &table.to_markdown())?;
    Ok(table)
}
