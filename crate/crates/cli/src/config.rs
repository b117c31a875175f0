//! The run configuration: one TOML document plus `section.key=value`
//! overrides from the command line.

use std::path::Path;

use formgen_core::dataio::{NormalizationSpec, SyntheticConfig};
use formgen_core::metrics::{EvalMode, EvalOptions};
use formgen_core::model::ModelConfig;
use formgen_core::sampler::{NoiseMode, SampleConfig};
use formgen_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Share of plays used for training; the rest validate.
    pub train_ratio: f64,
    pub split_seed: u64,
    pub synth_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_ratio: 0.8,
            split_seed: 0,
            synth_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Score sampled trajectories at this temperature instead of concept means.
    pub sampled_temperature: Option<f64>,
    pub apd_samples: usize,
    pub apd_temperature: f64,
    pub noise_mode: NoiseMode,
    pub seed: u64,
    pub horizons: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let o = EvalOptions::default();
        Self {
            sampled_temperature: None,
            apd_samples: o.apd_samples,
            apd_temperature: o.apd_temperature,
            noise_mode: o.noise_mode,
            seed: o.seed,
            horizons: o.horizons,
        }
    }
}

impl EvalConfig {
    pub fn options(&self, normalization: &NormalizationSpec) -> EvalOptions {
        EvalOptions {
            mode: match self.sampled_temperature {
                Some(temperature) => EvalMode::Sampled { temperature },
                None => EvalMode::ConceptMean,
            },
            apd_samples: self.apd_samples,
            apd_temperature: self.apd_temperature,
            noise_mode: self.noise_mode,
            seed: self.seed,
            horizons: self.horizons.clone(),
            normalization: normalization.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    /// Players every request must supply.
    pub num_players: usize,
    pub max_samples: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            num_players: 11,
            max_samples: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub normalization: NormalizationSpec,
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

fn config_error(detail: impl Into<String>) -> CliError {
    CliError::config(detail)
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_error(format!("override key {key:?} is malformed")));
    }
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_error(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (defaults when absent) and applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::input(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_error(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.normalization.validate()?;
        if !(self.data.train_ratio > 0.0 && self.data.train_ratio < 1.0) {
            return Err(config_error(format!("data.train_ratio {} outside (0, 1)", self.data.train_ratio)));
        }
        if self.serve.max_samples == 0 || self.serve.num_players == 0 {
            return Err(config_error("serve.max_samples and serve.num_players must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }
}
