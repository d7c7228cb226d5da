//! The pipeline configuration file and seed derivation.

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitness::FitnessConfig;
use crate::llm::LlmClientConfig;
use crate::search::{Evaluator, SearchConfig};
use crate::sim::{EgoPolicyConfig, SimConfig};
use crate::triage::TriageConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory of accident report text files.
    pub reports_dir: Option<PathBuf>,
    /// Logical scenario files searched by a campaign.
    pub scenarios: Vec<PathBuf>,
    /// Default range table; the built-in table when absent.
    pub defaults: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub llm: LlmClientConfig,
    pub sim: SimConfig,
    pub ego: EgoPolicyConfig,
    pub fitness: FitnessConfig,
    pub search: SearchConfig,
    pub triage: TriageConfig,
    pub repetitions: usize,
    /// Also run uniform random sampling with the same budget.
    pub random_baseline: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            llm: LlmClientConfig::default(),
            sim: SimConfig::default(),
            ego: EgoPolicyConfig::default(),
            fitness: FitnessConfig::default(),
            search: SearchConfig::default(),
            triage: TriageConfig::default(),
            repetitions: 5,
            random_baseline: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl PipelineConfig {
    /// Reads a `.json` file, or TOML for any other extension.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), message: e.to_string() })?;
        let syntax = |message: String| ConfigError::Syntax { path: path.to_path_buf(), message };
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| syntax(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| syntax(e.to_string()))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes to JSON")
    }

    pub fn evaluator(&self) -> Evaluator {
        Evaluator { sim: self.sim, ego: self.ego, fitness: self.fitness }
    }

    /// Triage settings with the collision threshold taken from fitness.
    pub fn triage_config(&self) -> TriageConfig {
        TriageConfig { collision_threshold: self.fitness.collision_threshold, ..self.triage }
    }

    /// Value checks plus existence of referenced files. The LLM transcript
    /// is checked only when `needs_llm` is set.
    pub fn check(&self, needs_llm: bool) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.repetitions == 0 {
            return Err(ConfigError::Invalid("repetitions must be at least 1".into()));
        }
        self.sim.check().map_err(|e| invalid(&e))?;
        self.ego.check(&self.sim.physics).map_err(|e| invalid(&e))?;
        self.search.check().map_err(|e| invalid(&e))?;
        if !(self.fitness.eta > 0.0 && self.fitness.collision_threshold >= 0.0) {
            return Err(ConfigError::Invalid("fitness eta must be positive and the threshold non-negative".into()));
        }
        if !(self.triage.window > 0.0) {
            return Err(ConfigError::Invalid("triage window must be positive".into()));
        }
        let mut files: Vec<&PathBuf> = self.paths.scenarios.iter().chain(&self.paths.defaults).collect();
        if needs_llm {
            self.llm.check().map_err(|e| invalid(&e))?;
            if self.llm.mode == crate::llm::LlmMode::Replay {
                files.extend(&self.llm.transcript);
            }
        }
        if let Some(dir) = &self.paths.reports_dir {
            if !dir.is_dir() {
                return Err(ConfigError::Invalid(format!("reports directory {} does not exist", dir.display())));
            }
        }
        for f in files {
            if !f.is_file() {
                return Err(ConfigError::Invalid(format!("file {} does not exist", f.display())));
            }
        }
        Ok(())
    }
}

/// Derives an independent seed from `master` and a path of labels, e.g.
/// `[scenario, repetition, method]`. Each label selects a ChaCha stream of
/// a generator seeded with the running value; the stream's first word is
/// the next running value.
pub fn derive_seed(master: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(master, |state, &label| {
        let mut rng = ChaCha8Rng::seed_from_u64(state);
        rng.set_stream(label);
        rng.next_u64()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::PopulationSize;

    #[test]
    fn defaults_round_trip_both_formats() {
        let cfg = PipelineConfig::default();
        let toml_text = cfg.to_toml();
        assert_eq!(toml::from_str::<PipelineConfig>(&toml_text).unwrap(), cfg);
        assert_eq!(serde_json::from_str::<PipelineConfig>(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.search.population_size, PopulationSize::TemplateLength);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg: PipelineConfig = toml::from_str("repetitions = 2\n[search]\ngenerations = 3\n").unwrap();
        assert_eq!((cfg.repetitions, cfg.search.generations), (2, 3));
        assert_eq!(cfg.search.crossover_rate, 0.4);
    }

    #[test]
    fn misplaced_keys_are_rejected() {
        // a top-level key written after a table header lands in that table
        assert!(toml::from_str::<PipelineConfig>("[search]\nrepetitions = 2\n").is_err());
        assert!(toml::from_str::<PipelineConfig>("[sim.physics]\nmax_acel = 3.0\n").is_err());
    }

    #[test]
    fn check_rejects_bad_values() {
        let cfg = PipelineConfig { repetitions: 0, ..Default::default() };
        assert!(cfg.check(false).is_err());
        let mut cfg = PipelineConfig::default();
        cfg.paths.scenarios.push("/does/not/exist.lsc".into());
        assert!(cfg.check(false).is_err());
        assert!(PipelineConfig::default().check(false).is_ok());
        assert!(PipelineConfig::default().check(true).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        let a = derive_seed(1, &[0, 0, 0]);
        assert_eq!(a, derive_seed(1, &[0, 0, 0]));
        assert_ne!(a, derive_seed(1, &[0, 1, 0]));
        assert_ne!(a, derive_seed(2, &[0, 0, 0]));
        assert_ne!(derive_seed(1, &[1, 0]), derive_seed(1, &[0, 1]));
    }
}
