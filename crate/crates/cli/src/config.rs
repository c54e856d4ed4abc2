use std::fs;
use std::path::{Path, PathBuf};

use delta::data::{load_dataset, LoadOptions};
use delta::gen::ModelConfig;
use delta::search::SearchConfig;
use delta::{Dataset, TaskKind};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub target: String,
    pub sensitive: String,
    pub task: TaskKind,
    pub delimiter: char,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            target: "target".into(),
            sensitive: "sensitive".into(),
            task: TaskKind::Classification,
            delimiter: ',',
        }
    }
}

/// Everything one pipeline run needs. The top-level `seed` is copied into
/// the search and model configs so a single value governs the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub search: SearchConfig,
    pub model: ModelConfig,
    /// Privacy weight in the final selection `utility - lambda * privacy`.
    pub lambda: f64,
    pub n_candidates: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            search: SearchConfig::default(),
            model: ModelConfig::default(),
            lambda: 1.0,
            n_candidates: 16,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::from_file(p),
            None => Ok(Self::default()),
        }
    }

    /// Pushes the run seed down and checks every nested config.
    pub fn finalize(&mut self) -> Result<(), CliError> {
        self.search.seed = self.seed;
        self.model.seed = self.seed;
        self.search.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.n_candidates == 0 {
            return Err(CliError::Config("n_candidates must be >= 1".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(CliError::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !self.data.delimiter.is_ascii() {
            return Err(CliError::Config("delimiter must be a single ASCII character".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load_data(&self) -> Result<Dataset, CliError> {
        let path = self
            .data
            .path
            .as_ref()
            .ok_or_else(|| CliError::Config("no data path given (data.path or --data)".into()))?;
        let opts = LoadOptions {
            delimiter: self.data.delimiter as u8,
        };
        Ok(load_dataset(path, &self.data.target, &self.data.sensitive, self.data.task, &opts)?)
    }

    /// Creates the output directory and probes that it accepts files.
    pub fn prepare_output(&self) -> Result<&Path, CliError> {
        let dir = &self.output_dir;
        let probe = dir.join(".write-probe");
        fs::create_dir_all(dir)
            .and_then(|_| fs::write(&probe, b""))
            .and_then(|_| fs::remove_file(&probe))
            .map_err(|e| CliError::Config(format!("output directory {} is not writable: {e}", dir.display())))?;
        Ok(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.data.path = Some("x.csv".into());
        cfg.search.episodes = 3;
        cfg.model.epochs = 7;
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 4\n[search]\nepisodes = 2\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.search.episodes, 2);
        assert_eq!(cfg.search.steps_per_episode, SearchConfig::default().steps_per_episode);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 4\n").is_err());
    }

    #[test]
    fn finalize_propagates_seed_and_validates() {
        let mut cfg = RunConfig {
            seed: 9,
            ..RunConfig::default()
        };
        cfg.finalize().unwrap();
        assert_eq!((cfg.search.seed, cfg.model.seed), (9, 9));
        cfg.lambda = -1.0;
        assert!(matches!(cfg.finalize(), Err(CliError::Config(_))));
    }
}
