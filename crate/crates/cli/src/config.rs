//! Experiment files: a TOML document naming a scenario file plus training,
//! network and optional reward/encoder overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spformer_core::agent::{check_compatible, RewardWeights, TrainConfig};
use spformer_core::encoder::EncoderWeights;
use spformer_core::net::NetConfig;
use spformer_core::sim::ScenarioConfig;

use crate::error::{CliError, CliResult};

fn default_checkpoint_every() -> usize {
    250
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scenario TOML, relative to this file's directory.
    pub scenario: String,
    /// Root for run directories, relative to this file's directory.
    pub output_dir: String,
    pub run_id: String,
    pub seeds: Vec<u64>,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderWeights>,
}

/// A loaded experiment with the scenario file read and overrides applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    pub scenario: ScenarioConfig,
}

fn config_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Config {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| config_err(path, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }
}

pub fn load_scenario(path: &Path) -> CliResult<ScenarioConfig> {
    if !path.is_file() {
        return Err(config_err(path, "scenario file not found"));
    }
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let sc: ScenarioConfig = toml::from_str(&text).map_err(|e| config_err(path, e))?;
    sc.validate().map_err(|e| config_err(path, e))?;
    Ok(sc)
}

impl Experiment {
    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.is_file() {
            return Err(config_err(path, "config file not found"));
        }
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let config = ExperimentConfig::parse(&text, path)?;
        Self::from_config(config, path)
    }

    /// Resolves `config` as if it had been read from `path`.
    pub fn from_config(config: ExperimentConfig, path: &Path) -> CliResult<Self> {
        let scenario_path = base_dir(path).join(&config.scenario);
        let mut scenario = load_scenario(&scenario_path)?;
        if let Some(r) = config.reward {
            scenario.reward = r;
        }
        if let Some(e) = config.encoder {
            scenario.encoder = e;
        }
        let exp = Experiment {
            config,
            path: path.to_path_buf(),
            scenario,
        };
        exp.validate()?;
        Ok(exp)
    }

    pub fn validate(&self) -> CliResult<()> {
        let c = &self.config;
        let err = |e: spformer_core::Error| config_err(&self.path, e);
        self.scenario.validate().map_err(err)?;
        c.train.validate().map_err(err)?;
        c.net.validate().map_err(err)?;
        check_compatible(&c.net, &self.scenario).map_err(err)?;
        if c.seeds.is_empty() {
            return Err(config_err(&self.path, "seeds must not be empty"));
        }
        if c.checkpoint_every == 0 {
            return Err(config_err(&self.path, "checkpoint_every must be positive"));
        }
        if c.run_id.is_empty() || c.run_id.contains(['/', '\\']) {
            return Err(config_err(&self.path, "run_id must be a plain directory name"));
        }
        Ok(())
    }

    /// `<output_dir>/<run_id>`, relative to the config file.
    pub fn run_dir(&self) -> PathBuf {
        base_dir(&self.path).join(&self.config.output_dir).join(&self.config.run_id)
    }

    /// Applies one `--ablation` switch: `ppe=off`, `ego_only_tokens`,
    /// `learned_pos` or `target_sync=N`.
    pub fn apply_ablation(&mut self, spec: &str) -> CliResult<()> {
        let (key, value) = match spec.split_once('=') {
            Some((k, v)) => (k.trim(), Some(v.trim())),
            None => (spec.trim(), None),
        };
        let flag = |v: Option<&str>| -> CliResult<bool> {
            match v {
                None | Some("on") | Some("true") => Ok(true),
                Some("off") | Some("false") => Ok(false),
                Some(other) => Err(CliError::Usage(format!("ablation {key}: expected on/off, got {other}"))),
            }
        };
        match key {
            "ppe" => self.config.net.ppe = flag(value)?,
            "ego_only_tokens" => {
                let on = flag(value)?;
                self.scenario.encoder.ego_only_tokens = on;
                self.config.encoder.get_or_insert(self.scenario.encoder).ego_only_tokens = on;
            }
            "learned_pos" => self.config.net.learned_pos = flag(value)?,
            "target_sync" => {
                let n = value
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| CliError::Usage(format!("ablation target_sync needs an integer, got {spec}")))?;
                self.config.train.target_sync = n;
            }
            _ => return Err(CliError::Usage(format!("unknown ablation {spec}"))),
        }
        self.validate()
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExperimentConfig {
        ExperimentConfig {
            scenario: "ramp.cfg".into(),
            output_dir: "runs".into(),
            run_id: "x".into(),
            seeds: vec![0, 5],
            checkpoint_every: 250,
            train: TrainConfig {
                learning_rate: 3e-4,
                ..TrainConfig::default()
            },
            net: NetConfig::desk(),
            reward: Some(RewardWeights {
                w3: -80.0,
                w4: -0.05,
                ..RewardWeights::default()
            }),
            encoder: None,
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = sample();
        let back = ExperimentConfig::parse(&c.to_toml(), Path::new("x.cfg")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_field_names_line() {
        let text = format!("{}bogus = 1\n", sample().to_toml().replacen("[train]\n", "[train]\nlr = 3\n", 1));
        let e = ExperimentConfig::parse(&text, Path::new("x.cfg")).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line") && msg.contains("lr"), "{msg}");
        assert_eq!(e.exit_code(), 1);
    }
}
