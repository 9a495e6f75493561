//! Run configuration loaded from TOML, with environment overrides for
//! endpoint secrets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CurationSettings, TEST_CHAPTERS, TRAIN_CHAPTERS};
use crate::finetune::{ExportMode, DEFAULT_SWEEP, DEFAULT_THETA};
use crate::lm::http::ENV_BASE_URL;
use crate::lm::CallSettings;
use crate::simulator::SimSettings;

pub const DEFAULT_MODEL: &str = "gpt-4o-mini";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Models {
    pub generator: String,
    pub answerer: String,
    pub learner: String,
    pub evaluator: String,
    pub segmenter: String,
    pub classifier: String,
    pub aligner: String,
    /// Salience and EIG.
    pub judge: String,
    pub embedding: String,
}

impl Default for Models {
    fn default() -> Self {
        let m = DEFAULT_MODEL.to_string();
        Models {
            generator: m.clone(),
            answerer: m.clone(),
            learner: m.clone(),
            evaluator: m.clone(),
            segmenter: m.clone(),
            classifier: m.clone(),
            aligner: m.clone(),
            judge: m,
            embedding: "text-embedding-3-small".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Temperatures {
    pub question: f64,
    pub answer: f64,
    pub learner: f64,
    pub evaluator: f64,
    pub curation: f64,
    pub judge: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures {
            question: 1.0,
            answer: 0.0,
            learner: 0.0,
            evaluator: 0.0,
            curation: 0.0,
            judge: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Simulation {
    /// Generation trials per chapter, and exam attempts per chapter in `run`.
    pub trials: u32,
    /// Exam attempts per perturbation condition in `utility`.
    pub utility_trials: u32,
}

impl Default for Simulation {
    fn default() -> Self {
        Simulation {
            trials: 3,
            utility_trials: 3,
        }
    }
}

/// Context budgets in characters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub generation_context: usize,
    pub evaluator_document: usize,
    pub metrics_context: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            generation_context: 48_000,
            evaluator_document: 48_000,
            metrics_context: 48_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train_chapters: usize,
    pub test_chapters: usize,
    pub few_shot_exemplars: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_chapters: TRAIN_CHAPTERS,
            test_chapters: TEST_CHAPTERS,
            few_shot_exemplars: crate::forge::MIN_FEW_SHOT_EXEMPLARS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub theta: f64,
    pub sweep: Vec<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            theta: DEFAULT_THETA,
            sweep: DEFAULT_SWEEP.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub requests_per_minute: u32,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Overridden by `OPENAI_BASE_URL` when set.
    pub base_url: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            requests_per_minute: 60,
            timeout_secs: 120,
            max_retries: 5,
            base_url: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub runs_dir: PathBuf,
    pub cache_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            runs_dir: "runs".into(),
            cache_dir: ".studysim-cache".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub base_model: String,
    pub mode: ExportMode,
    pub submit: bool,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            base_model: "gpt-4o-mini-2024-07-18".into(),
            mode: ExportMode::Subject,
            submit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub workers: usize,
    pub models: Models,
    pub temperatures: Temperatures,
    pub simulation: Simulation,
    pub budgets: Budgets,
    pub corpus: CorpusConfig,
    pub filter: FilterConfig,
    pub backend: BackendConfig,
    pub paths: Paths,
    pub finetune: FineTuneConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            workers: 4,
            models: Models::default(),
            temperatures: Temperatures::default(),
            simulation: Simulation::default(),
            budgets: Budgets::default(),
            corpus: CorpusConfig::default(),
            filter: FilterConfig::default(),
            backend: BackendConfig::default(),
            paths: Paths::default(),
            finetune: FineTuneConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str, origin: &str) -> Result<Config, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Config::from_toml(&text, &path.display().to_string())
    }

    /// Applies `OPENAI_BASE_URL` if present. The API key is never stored
    /// in the config.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(ENV_BASE_URL) {
            if !url.trim().is_empty() {
                self.backend.base_url = Some(url);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if self.workers == 0 {
            problems.push("workers must be at least 1".to_string());
        }
        if self.simulation.trials == 0 || self.simulation.utility_trials == 0 {
            problems.push("trial counts must be at least 1".into());
        }
        if !self.filter.theta.is_finite() || self.filter.sweep.iter().any(|t| !t.is_finite()) {
            problems.push("filter thresholds must be finite".into());
        }
        if self.backend.requests_per_minute == 0 {
            problems.push("requests_per_minute must be at least 1".into());
        }
        let t = &self.temperatures;
        for (name, v) in [
            ("question", t.question),
            ("answer", t.answer),
            ("learner", t.learner),
            ("evaluator", t.evaluator),
            ("curation", t.curation),
            ("judge", t.judge),
        ] {
            if !(0.0..=2.0).contains(&v) {
                problems.push(format!("temperature {name} = {v} outside [0, 2]"));
            }
        }
        if self.corpus.few_shot_exemplars < crate::forge::MIN_FEW_SHOT_EXEMPLARS {
            problems.push(format!(
                "few_shot_exemplars must be at least {}",
                crate::forge::MIN_FEW_SHOT_EXEMPLARS
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems.join("; ")))
        }
    }

    /// Canonical TOML rendering, used for the run id and the manifest.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn curation(&self) -> CurationSettings {
        let t = self.temperatures.curation;
        CurationSettings {
            segmenter: CallSettings::new(&self.models.segmenter, t, self.seed),
            classifier: CallSettings::new(&self.models.classifier, t, self.seed),
            aligner: CallSettings::new(&self.models.aligner, t, self.seed),
        }
    }

    pub fn generator(&self, model_override: Option<&str>) -> CallSettings {
        CallSettings::new(
            model_override.unwrap_or(&self.models.generator),
            self.temperatures.question,
            self.seed,
        )
    }

    pub fn answerer(&self) -> CallSettings {
        CallSettings::new(&self.models.answerer, self.temperatures.answer, self.seed)
    }

    pub fn simulation_settings(&self) -> SimSettings {
        SimSettings {
            learner: CallSettings::new(&self.models.learner, self.temperatures.learner, self.seed),
            evaluator: CallSettings::new(
                &self.models.evaluator,
                self.temperatures.evaluator,
                self.seed,
            ),
            document_budget: self.budgets.evaluator_document,
        }
    }

    pub fn judge(&self) -> CallSettings {
        CallSettings::new(&self.models.judge, self.temperatures.judge, self.seed)
    }

    pub fn classifier(&self) -> CallSettings {
        CallSettings::new(
            &self.models.classifier,
            self.temperatures.curation,
            self.seed,
        )
    }
}
