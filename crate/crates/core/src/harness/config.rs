//! The experiment config file: TOML with one section per module and dotted
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentManifest;
use crate::augment::AugConfig;
use crate::data::SplitConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::nn::AdamConfig;
use crate::train::TrainConfig;
use crate::ttt::TTTConfig;

/// Environment variable that replaces the config seed.
pub const SEED_ENV: &str = "DATTT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds data generation, initialization, training and adaptation.
    pub seed: u64,
    /// Directory holding `train/` and `test/` datasets; generated when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    pub data: SplitConfig,
    /// Augmentations for stage-1 training, and for adaptation unless
    /// `ttt_aug` is set.
    pub aug: AugConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ttt_aug: Option<AugConfig>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub ttt: TTTConfig,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: a short, higher learning-rate stage-1 run.
    fn default() -> Self {
        Self {
            seed: 0,
            data_root: None,
            data: SplitConfig::default(),
            aug: AugConfig::default(),
            ttt_aug: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig {
                epochs: 100,
                max_steps: Some(200),
                optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
                ..TrainConfig::default()
            },
            ttt: TTTConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables.
fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.split_config().validate()?;
        if self.data_root.is_none() && (self.data.height, self.data.width) != (self.model.input_height, self.model.input_width) {
            return Err(Error::validation(
                "data.height/data.width",
                format!(
                    "{}x{} differs from the model input {}x{}",
                    self.data.height, self.data.width, self.model.input_height, self.model.input_width
                ),
            ));
        }
        self.aug.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train_config().validate()?;
        self.ttt_config().validate()
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig { seed: self.seed, ..self.data.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, loss: self.loss, aug: self.aug.clone(), ..self.train.clone() }
    }

    pub fn ttt_config(&self) -> TTTConfig {
        let aug = self.ttt_aug.clone().unwrap_or_else(|| self.aug.clone());
        TTTConfig { seed: self.seed, loss: self.loss, aug, ..self.ttt.clone() }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?, &[])
    }

    /// Builds a config from a TOML table after applying `key=value` overrides.
    pub fn from_table(mut table: toml::Table, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the config recorded in a run's `manifest.json`,
    /// then applies overrides and the seed environment variable.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let table = match path {
            None => toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?,
            Some(p) if p.extension().is_some_and(|e| e == "json") => {
                let m = ExperimentManifest::read(p)?;
                toml::Table::try_from(m.config).map_err(|e| Error::Config(e.to_string()))?
            }
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::format(p, e.to_string()))?
            }
        };
        let mut cfg = Self::from_table(table, overrides)?;
        cfg.apply_seed_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw.trim().parse().map_err(|_| Error::validation(SEED_ENV, format!("`{raw}` is not an unsigned integer")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn dotted_overrides() {
        let table = toml::Table::try_from(ExperimentConfig::default()).unwrap();
        let o = ["ttt.epochs=3", "ttt.strategy=ttt_n", "loss.lambda = 1.0", "aug.hflip.enabled=false"].map(String::from);
        let cfg = ExperimentConfig::from_table(table.clone(), &o).unwrap();
        assert_eq!(cfg.ttt.epochs, 3);
        assert_eq!(cfg.ttt.strategy, crate::ttt::Strategy::TttN);
        assert_eq!(cfg.loss.lambda, 1.0);
        assert!(!cfg.aug.hflip.enabled);
        assert!(ExperimentConfig::from_table(table.clone(), &["ttt.nope=1".into()]).is_err());
        assert!(ExperimentConfig::from_table(table, &["seed".into()]).is_err());
    }
}
