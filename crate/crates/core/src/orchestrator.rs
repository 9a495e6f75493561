//! Stage orchestration over a run directory.
//!
//! A run lives in `<runs_dir>/<run_id>/`. The id is derived from the
//! configuration (minus execution-only settings), the backend identity,
//! the seed and the corpus digest, so identical inputs resolve to the same
//! directory. Every stage records its outputs by hash in `manifest.json`
//! and checks the hashes of the stages it reads before running.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::corpus::{self, read_corpus, CorpusError, CorpusStats};
use crate::domain::{content_hash, Chapter, Split, Strategy, UtilityRecord};
use crate::finetune::{self, ExportMode, FilterOutcome, FineTuneError};
use crate::forge::{self, derive_seed, BloomSampler, ForgeError, GeneratedPair, GeneratorSetup};
use crate::lm::{Backend, Gateway, HttpTransport, LmError, ResponseCache, RetryPolicy};
use crate::manifest::{
    file_sha256, to_pretty, tree_digest, write_atomic, Accounting, RunManifest, StageAccounting,
    StageRecord,
};
use crate::metrics::{self, correlate, MetricError, MetricRecord, METRIC_PAIRS, SIMILARITY_PAIRS};
use crate::report::{self, ScoreRow};
use crate::simulator::{simulate, SimError, StudySet, TrialAggregate};
use crate::utility::{chapter_utilities, UtilityError};

pub const LATEST_FILE: &str = "latest";
pub const CACHE_LOG: &str = "cache.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Validation(String),
    #[error("stage {stage} is missing or stale: {detail}")]
    Dependency { stage: String, detail: String },
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Other(String),
}

impl PipelineError {
    /// Process exit code: 2 validation, 3 upstream dependency, 4 backend
    /// failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            PipelineError::Dependency { .. } => 3,
            PipelineError::Backend(_) => 4,
            PipelineError::Other(_) => 1,
        }
    }

    fn dependency(stage: &str, detail: impl Into<String>) -> Self {
        PipelineError::Dependency {
            stage: stage.to_string(),
            detail: detail.into(),
        }
    }

    fn context(self, ctx: &str) -> Self {
        match self {
            PipelineError::Validation(m) => PipelineError::Validation(format!("{ctx}: {m}")),
            PipelineError::Backend(m) => PipelineError::Backend(format!("{ctx}: {m}")),
            PipelineError::Other(m) => PipelineError::Other(format!("{ctx}: {m}")),
            d => d,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Other(format!("{}: {e}", path.display()))
}

impl From<LmError> for PipelineError {
    fn from(e: LmError) -> Self {
        match e {
            LmError::Retryable(_) | LmError::Fatal(_) | LmError::Config(_) => {
                PipelineError::Backend(e.to_string())
            }
            LmError::Cache(_) | LmError::InvalidInput(_) => PipelineError::Other(e.to_string()),
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Layout(_) | CorpusError::Split { .. } => {
                PipelineError::Validation(e.to_string())
            }
            CorpusError::Lm(e) => e.into(),
            other => PipelineError::Other(other.to_string()),
        }
    }
}

impl From<ForgeError> for PipelineError {
    fn from(e: ForgeError) -> Self {
        match e {
            ForgeError::Lm(e) => e.into(),
            ForgeError::Exemplar { .. } | ForgeError::Setup(_) | ForgeError::Sampler(_) => {
                PipelineError::Validation(e.to_string())
            }
            other => PipelineError::Other(other.to_string()),
        }
    }
}

impl From<SimError> for PipelineError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Lm(e) => e.into(),
            SimError::Trial { trial, source } => {
                PipelineError::from(*source).context(&format!("trial {trial}"))
            }
            other => PipelineError::Other(other.to_string()),
        }
    }
}

impl From<UtilityError> for PipelineError {
    fn from(e: UtilityError) -> Self {
        match e {
            UtilityError::Simulation { condition, source } => {
                PipelineError::from(source).context(&condition)
            }
            other => PipelineError::Other(other.to_string()),
        }
    }
}

impl From<MetricError> for PipelineError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Lm(e) => e.into(),
            other => PipelineError::Other(other.to_string()),
        }
    }
}

impl From<FineTuneError> for PipelineError {
    fn from(e: FineTuneError) -> Self {
        match e {
            FineTuneError::Lm(e) => e.into(),
            FineTuneError::InvalidTheta(_) => PipelineError::Validation(e.to_string()),
            other => PipelineError::Other(other.to_string()),
        }
    }
}

/// Which curated chapters a stage works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitSelection {
    Train,
    Test,
    TrainTest,
    /// Every curated chapter, including unassigned ones.
    All,
}

impl SplitSelection {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitSelection::Train),
            "test" => Some(SplitSelection::Test),
            "train+test" | "train-test" => Some(SplitSelection::TrainTest),
            "all" => Some(SplitSelection::All),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SplitSelection::Train => "train",
            SplitSelection::Test => "test",
            SplitSelection::TrainTest => "train+test",
            SplitSelection::All => "all",
        }
    }

    fn admits(self, s: Split) -> bool {
        match self {
            SplitSelection::Train => s == Split::Train,
            SplitSelection::Test => s == Split::Test,
            SplitSelection::TrainTest => s != Split::Unassigned,
            SplitSelection::All => true,
        }
    }
}

/// Strategy plus the model for fine-tuned passthrough. The label names the
/// strategy's output directories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategyChoice {
    pub strategy: Strategy,
    pub model_id: Option<String>,
}

impl StrategyChoice {
    pub fn new(strategy: Strategy, model_id: Option<String>) -> Result<Self, PipelineError> {
        match (strategy, &model_id) {
            (Strategy::FineTuned, None) => Err(PipelineError::Validation(
                "the fine-tuned strategy needs --model-id".into(),
            )),
            (Strategy::FineTuned, Some(_)) | (_, None) => Ok(StrategyChoice { strategy, model_id }),
            (_, Some(_)) => Err(PipelineError::Validation(
                "--model-id only applies to the fine-tuned strategy".into(),
            )),
        }
    }

    pub fn label(&self) -> String {
        match &self.model_id {
            Some(m) => {
                let clean: String = m
                    .chars()
                    .map(|c| {
                        if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                            c
                        } else {
                            '_'
                        }
                    })
                    .collect();
                format!("{}-{clean}", self.strategy.label())
            }
            None => self.strategy.label().to_string(),
        }
    }
}

pub fn theta_label(theta: f64) -> String {
    format!("theta-{theta}")
}

/// What a stage did, for the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: String,
    pub outputs: usize,
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub notes: Vec<String>,
}

/// One line of `utilities.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub chapter_id: String,
    pub trial: u32,
    #[serde(flatten)]
    pub record: UtilityRecord,
}

/// Per-chapter exam scores of one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChapterScore {
    pub chapter_id: String,
    pub subject: String,
    pub no_study: TrialAggregate,
    pub study: TrialAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub strategy: String,
    pub chapters: Vec<ChapterScore>,
    pub subjects: Vec<ScoreRow>,
}

/// Collects a stage's files and their hashes. Existing files may only be
/// rewritten with identical content.
struct Outputs<'a> {
    run_dir: &'a Path,
    files: BTreeMap<String, String>,
}

impl<'a> Outputs<'a> {
    fn new(run_dir: &'a Path) -> Self {
        Outputs {
            run_dir,
            files: BTreeMap::new(),
        }
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.run_dir.join(rel);
        if path.exists() {
            let old = fs::read(&path).map_err(|e| io_err(&path, e))?;
            if old != bytes {
                return Err(PipelineError::Other(format!(
                    "{}: stage outputs are immutable and this file would change; start a new run",
                    path.display()
                )));
            }
        } else {
            write_atomic(&path, bytes).map_err(|e| io_err(&path, e))?;
        }
        self.files
            .insert(rel.to_string(), crate::domain::sha256_hex(bytes));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), PipelineError> {
        self.write(rel, to_pretty(value).as_bytes())
    }

    fn jsonl<T: Serialize>(&mut self, rel: &str, items: &[T]) -> Result<(), PipelineError> {
        self.write(rel, jsonl(items).as_bytes())
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for i in items {
        out.push_str(&serde_json::to_string(i).expect("item serializes"));
        out.push('\n');
    }
    out
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| io_err(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// Configuration as recorded in the manifest: execution-only settings
/// (paths and worker count) are left out since they do not affect outputs.
pub fn config_snapshot(config: &Config) -> Value {
    let mut v = serde_json::to_value(config).expect("config serializes");
    if let Value::Object(m) = &mut v {
        m.remove("paths");
        m.remove("workers");
    }
    v
}

pub fn compute_run_id(config: &Config, backend: &str, corpus_digest: &str) -> String {
    let snapshot = serde_json::to_string(&config_snapshot(config)).expect("json");
    content_hash(&[&snapshot, backend, &config.seed.to_string(), corpus_digest])[..16].to_string()
}

pub struct Pipeline {
    config: Config,
    gateway: Gateway,
    run_dir: PathBuf,
    manifest: RunManifest,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    fn build(
        config: Config,
        backend: Arc<dyn Backend>,
        run_dir: PathBuf,
        manifest: RunManifest,
    ) -> Result<Self, PipelineError> {
        let cache = ResponseCache::open(
            Some(&config.paths.cache_dir),
            Some(&run_dir.join(CACHE_LOG)),
        )?;
        let gateway = Gateway::new(backend, cache).with_retry(RetryPolicy {
            max_attempts: config.backend.max_retries.max(1),
            ..RetryPolicy::default()
        });
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| PipelineError::Other(format!("worker pool: {e}")))?;
        Ok(Pipeline {
            config,
            gateway,
            run_dir,
            manifest,
            pool,
        })
    }

    /// Starts (or resumes) the run for `corpus_dir` and points
    /// `<runs_dir>/latest` at it.
    pub fn create(
        config: Config,
        backend: Arc<dyn Backend>,
        corpus_dir: &Path,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        if !corpus_dir.is_dir() {
            return Err(PipelineError::Validation(format!(
                "corpus layout invalid:\n  {}: not a directory",
                corpus_dir.display()
            )));
        }
        let corpus_digest = tree_digest(corpus_dir).map_err(|e| io_err(corpus_dir, e))?;
        let identity = backend.identity();
        let run_id = compute_run_id(&config, &identity, &corpus_digest);
        let run_dir = config.paths.runs_dir.join(&run_id);
        let manifest = match RunManifest::load(&run_dir) {
            Ok(m) => m,
            Err(_) => RunManifest {
                run_id: run_id.clone(),
                backend: identity,
                seed: config.seed,
                corpus_digest,
                config: config_snapshot(&config),
                stages: BTreeMap::new(),
            },
        };
        fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
        let latest = config.paths.runs_dir.join(LATEST_FILE);
        write_atomic(&latest, format!("{run_id}\n").as_bytes()).map_err(|e| io_err(&latest, e))?;
        Pipeline::build(config, backend, run_dir, manifest)
    }

    /// Opens an existing run (`run_id`, or the latest one). The configuration
    /// and backend must match those the run was created with.
    pub fn open(
        config: Config,
        backend: Arc<dyn Backend>,
        run_id: Option<&str>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let id = match run_id {
            Some(id) => id.to_string(),
            None => {
                let latest = config.paths.runs_dir.join(LATEST_FILE);
                fs::read_to_string(&latest)
                    .map(|s| s.trim().to_string())
                    .map_err(|_| {
                        PipelineError::dependency(
                            "ingest",
                            format!("no run under {}", config.paths.runs_dir.display()),
                        )
                    })?
            }
        };
        let run_dir = config.paths.runs_dir.join(&id);
        let manifest = RunManifest::load(&run_dir).map_err(|e| {
            PipelineError::dependency("ingest", format!("{}: {e}", run_dir.display()))
        })?;
        if manifest.config != config_snapshot(&config) {
            return Err(PipelineError::Validation(format!(
                "run {id} was created with a different configuration or seed; use the same --config/--seed or start a new run"
            )));
        }
        let identity = backend.identity();
        if manifest.backend != identity {
            return Err(PipelineError::Validation(format!(
                "run {id} was created with backend {}, not {identity}",
                manifest.backend
            )));
        }
        Pipeline::build(config, backend, run_dir, manifest)
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    /// Verifies a stage is recorded and its outputs are unchanged on disk.
    fn require(&self, stage: &str) -> Result<&StageRecord, PipelineError> {
        let rec = self
            .manifest
            .stages
            .get(stage)
            .ok_or_else(|| PipelineError::dependency(stage, "not run yet"))?;
        for (rel, hash) in &rec.outputs {
            let path = self.run_dir.join(rel);
            match file_sha256(&path) {
                Ok(h) if &h == hash => {}
                Ok(_) => {
                    return Err(PipelineError::dependency(
                        stage,
                        format!("{rel} changed on disk"),
                    ))
                }
                Err(_) => {
                    return Err(PipelineError::dependency(
                        stage,
                        format!("{rel} is missing"),
                    ))
                }
            }
        }
        Ok(rec)
    }

    fn inputs(&self, stages: &[&str]) -> Result<BTreeMap<String, String>, PipelineError> {
        stages
            .iter()
            .map(|s| Ok((s.to_string(), self.require(s)?.digest())))
            .collect()
    }

    /// Runs `body` on the worker pool, then records the stage and its
    /// accounting.
    fn stage<F>(&mut self, name: &str, body: F) -> Result<StageSummary, PipelineError>
    where
        F: FnOnce(
                &Pipeline,
                &mut Outputs<'_>,
            )
                -> Result<(BTreeMap<String, String>, Value, Vec<String>), PipelineError>
            + Send,
    {
        let calls = self.gateway.backend_calls();
        let hits = self.gateway.cache_hits();
        let started = Instant::now();
        let run_dir = self.run_dir.clone();
        let mut outputs = Outputs::new(&run_dir);
        let this: &Pipeline = self;
        let (inputs, params, notes) = this.pool.install(|| body(this, &mut outputs))?;
        let record = StageRecord {
            inputs,
            outputs: outputs.files,
            params,
        };
        let n_outputs = record.outputs.len();
        self.manifest.stages.insert(name.to_string(), record);
        self.manifest
            .save(&self.run_dir)
            .map_err(|e| io_err(&self.run_dir, e))?;
        let summary = StageSummary {
            stage: name.to_string(),
            outputs: n_outputs,
            backend_calls: self.gateway.backend_calls() - calls,
            cache_hits: self.gateway.cache_hits() - hits,
            notes,
        };
        let mut acct = Accounting::load_or_default(&self.run_dir);
        acct.stages.insert(
            name.to_string(),
            StageAccounting {
                backend_calls: summary.backend_calls,
                cache_hits: summary.cache_hits,
                wall_ms: started.elapsed().as_millis(),
            },
        );
        acct.save(&self.run_dir)
            .map_err(|e| io_err(&self.run_dir, e))?;
        Ok(summary)
    }

    /// Curated chapters in (subject, ordinal) order.
    pub fn chapters(&self) -> Result<Vec<Chapter>, PipelineError> {
        let rec = self.require("ingest")?;
        let mut out: Vec<Chapter> = rec
            .outputs
            .keys()
            .filter(|k| k.starts_with("chapters/"))
            .map(|k| read_json(&self.run_dir.join(k)))
            .collect::<Result<_, _>>()?;
        out.sort_by(|a, b| {
            (a.subject.name(), a.ordinal, &a.id).cmp(&(b.subject.name(), b.ordinal, &b.id))
        });
        Ok(out)
    }

    fn selected(&self, selection: SplitSelection) -> Result<Vec<Chapter>, PipelineError> {
        let chosen: Vec<Chapter> = self
            .chapters()?
            .into_iter()
            .filter(|c| selection.admits(c.split))
            .collect();
        if chosen.is_empty() {
            return Err(PipelineError::Validation(format!(
                "no curated chapters in split selection {}",
                selection.label()
            )));
        }
        Ok(chosen)
    }

    pub fn generated_pairs(&self, label: &str) -> Result<Vec<GeneratedPair>, PipelineError> {
        self.require(&format!("generate/{label}"))?;
        read_jsonl(
            &self
                .run_dir
                .join(format!("generate/{label}/qa_pairs.jsonl")),
        )
    }

    pub fn utility_rows(&self, label: &str) -> Result<Vec<UtilityRow>, PipelineError> {
        self.require(&format!("utility/{label}"))?;
        read_jsonl(
            &self
                .run_dir
                .join(format!("utility/{label}/utilities.jsonl")),
        )
    }

    pub fn ingest(
        &mut self,
        corpus_dir: &Path,
        split: bool,
    ) -> Result<StageSummary, PipelineError> {
        let digest = tree_digest(corpus_dir).map_err(|e| io_err(corpus_dir, e))?;
        if digest != self.manifest.corpus_digest {
            return Err(PipelineError::Validation(format!(
                "{} does not match the corpus run {} was created from",
                corpus_dir.display(),
                self.manifest.run_id
            )));
        }
        let corpus_dir = corpus_dir.to_path_buf();
        self.stage("ingest", move |p, out| {
            let input = read_corpus(&corpus_dir)?;
            let c = &p.config.corpus;
            let outcome = corpus::ingest(
                &p.gateway,
                &p.config.curation(),
                &input,
                split.then_some((c.train_chapters, c.test_chapters)),
            )?;
            for ch in &outcome.chapters {
                out.json(&format!("chapters/{}.json", ch.id), ch)?;
            }
            let mut rejected = outcome.rejected.clone();
            rejected.sort_by(|a, b| a.chapter_id.cmp(&b.chapter_id));
            out.json("rejected.json", &rejected)?;
            let mut warnings = outcome.warnings.clone();
            warnings.sort_by(|a, b| {
                (&a.chapter_id, &a.question_id).cmp(&(&b.chapter_id, &b.question_id))
            });
            out.json("alignment_warnings.json", &warnings)?;
            out.json("corpus_stats.json", &outcome.stats)?;
            out.write("corpus_stats.csv", outcome.stats.to_csv().as_bytes())?;
            let train: Vec<Chapter> = outcome
                .chapters
                .iter()
                .filter(|c| c.split == Split::Train)
                .cloned()
                .collect();
            let sft = forge::build_sft_dataset(&train, p.config.budgets.generation_context);
            let lines: Vec<Value> = sft
                .pairs
                .iter()
                .map(|s| json!({ "messages": s.messages() }))
                .collect();
            out.write("sft_dataset.jsonl", jsonl(&lines).as_bytes())?;
            let notes = rejected
                .iter()
                .map(|r| {
                    format!(
                        "rejected {} ({} exam questions)",
                        r.chapter_id, r.exam_questions
                    )
                })
                .collect();
            let params = json!({
                "split": split,
                "chapters": outcome.chapters.len(),
                "rejected": rejected.len(),
                "alignment_warnings": warnings.len(),
                "sft_pairs": sft.pairs.len(),
                "sft_skipped": sft.skipped,
            });
            Ok(([("corpus".to_string(), digest)].into(), params, notes))
        })
    }

    pub fn generate(
        &mut self,
        choice: &StrategyChoice,
        selection: SplitSelection,
    ) -> Result<StageSummary, PipelineError> {
        let label = choice.label();
        let name = format!("generate/{label}");
        self.stage(&name, |p, out| {
            let inputs = p.inputs(&["ingest"])?;
            let all = p.chapters()?;
            let chapters = p.selected(selection)?;
            let cfg = &p.config;
            let trials = cfg.simulation.trials;
            let mut setups: BTreeMap<String, GeneratorSetup> = BTreeMap::new();
            let mut samplers: BTreeMap<String, BloomSampler> = BTreeMap::new();
            for ch in &chapters {
                let subject = ch.subject.name().to_string();
                if setups.contains_key(&subject) {
                    continue;
                }
                let exemplars = if choice.strategy == Strategy::FewShot {
                    forge::sample_exemplars(
                        &all,
                        &subject,
                        cfg.corpus.few_shot_exemplars,
                        derive_seed(cfg.seed, "few-shot"),
                    )?
                } else {
                    Vec::new()
                };
                if choice.strategy == Strategy::BloomBased {
                    let own: Vec<Chapter> = all
                        .iter()
                        .filter(|c| c.subject == ch.subject)
                        .cloned()
                        .collect();
                    let sampler = BloomSampler::from_chapters(
                        &own,
                        derive_seed(cfg.seed, &format!("bloom/{subject}")),
                    )
                    .map_err(|e| PipelineError::from(e).context(&subject))?;
                    samplers.insert(subject.clone(), sampler);
                }
                setups.insert(
                    subject,
                    GeneratorSetup {
                        strategy: choice.strategy,
                        settings: cfg.generator(choice.model_id.as_deref()),
                        exemplars,
                        context_budget: cfg.budgets.generation_context,
                    },
                );
            }
            // Level draws happen here, serially, so the stream does not depend
            // on scheduling.
            let mut jobs = Vec::new();
            for ch in &chapters {
                for trial in 0..trials {
                    let levels = match samplers.get_mut(ch.subject.name()) {
                        Some(s) => ch.sections.iter().map(|_| Some(s.sample())).collect(),
                        None => vec![None; ch.sections.len()],
                    };
                    jobs.push((ch, trial, levels));
                }
            }
            let answerer = cfg.answerer();
            let batches: Vec<Vec<GeneratedPair>> = jobs
                .par_iter()
                .map(|(ch, trial, levels)| {
                    let seed =
                        derive_seed(cfg.seed, &format!("generate/{label}/{}/{trial}", ch.id));
                    forge::generate_for_chapter(
                        &p.gateway,
                        &setups[ch.subject.name()],
                        &answerer,
                        ch,
                        *trial,
                        seed,
                        levels,
                    )
                })
                .collect::<Result<_, _>>()?;
            let pairs: Vec<GeneratedPair> = batches.into_iter().flatten().collect();
            out.jsonl(&format!("generate/{label}/qa_pairs.jsonl"), &pairs)?;
            let params = json!({
                "strategy": choice.strategy.label(),
                "model_id": choice.model_id,
                "split": selection.label(),
                "trials": trials,
                "chapters": chapters.len(),
                "pairs": pairs.len(),
            });
            Ok((
                inputs,
                params,
                vec![format!(
                    "{} pairs over {} chapters",
                    pairs.len(),
                    chapters.len()
                )],
            ))
        })
    }

    pub fn run_exams(
        &mut self,
        choice: &StrategyChoice,
        selection: SplitSelection,
    ) -> Result<StageSummary, PipelineError> {
        let label = choice.label();
        let gen_stage = format!("generate/{label}");
        self.stage(&format!("run/{label}"), |p, out| {
            let inputs = p.inputs(&["ingest", &gen_stage])?;
            let chapters = p.selected(selection)?;
            let by_chapter = group_pairs(p.generated_pairs(&label)?);
            let trials = p.config.simulation.trials;
            let sim = p.config.simulation_settings();
            for ch in &chapters {
                if !by_chapter.contains_key(&ch.id) {
                    return Err(PipelineError::dependency(
                        &gen_stage,
                        format!("no generated pairs for chapter {}; generate with a split that covers it", ch.id),
                    ));
                }
            }
            let results: Vec<(ChapterScore, Vec<(String, Value)>)> = chapters
                .par_iter()
                .map(|ch| {
                    let base = derive_seed(p.config.seed, &format!("run/{}", ch.id));
                    let no_study = simulate(&p.gateway, &sim, ch, &StudySet::empty(), trials, base)
                        .map_err(|e| PipelineError::from(e).context(&ch.id))?;
                    let mut files = Vec::new();
                    for (t, a) in no_study.attempts.iter().enumerate() {
                        files.push((format!("{}_t{t}.json", a.attempt.study_set_id), serde_json::to_value(a).expect("json")));
                    }
                    let mut scores = Vec::new();
                    for t in 0..trials {
                        let pairs = by_chapter[&ch.id].get(&t).cloned().unwrap_or_default();
                        let set = StudySet::new(pairs).map_err(|e| PipelineError::from(e).context(&ch.id))?;
                        let o = simulate(&p.gateway, &sim, ch, &set, 1, base.wrapping_add(u64::from(t)))
                            .map_err(|e| PipelineError::from(e).context(&ch.id))?;
                        let a = &o.attempts[0];
                        files.push((format!("{}_t{t}.json", set.id), serde_json::to_value(a).expect("json")));
                        scores.push(a.attempt.exam_score);
                    }
                    Ok((
                        ChapterScore {
                            chapter_id: ch.id.clone(),
                            subject: ch.subject.display_name().to_string(),
                            no_study: no_study.aggregate,
                            study: TrialAggregate::from_scores(scores),
                        },
                        files,
                    ))
                })
                .collect::<Result<_, PipelineError>>()?;
            let mut chapter_scores = Vec::new();
            for (score, files) in results {
                for (name, v) in files {
                    out.json(&format!("run/{label}/attempts/{}/{name}", score.chapter_id), &v)?;
                }
                chapter_scores.push(score);
            }
            let report = ScoreReport {
                strategy: label.clone(),
                subjects: subject_rows(&label, &chapter_scores),
                chapters: chapter_scores,
            };
            out.json(&format!("run/{label}/scores.json"), &report)?;
            out.write(&format!("run/{label}/exam_scores.md"), report::score_table(&report.subjects).as_bytes())?;
            let notes = report
                .subjects
                .iter()
                .map(|r| format!("{}: {}", r.subject, report::format_gain(r.score, r.baseline)))
                .collect();
            Ok((inputs, json!({"split": selection.label(), "trials": trials}), notes))
        })
    }

    pub fn utility(
        &mut self,
        choice: &StrategyChoice,
        selection: SplitSelection,
    ) -> Result<StageSummary, PipelineError> {
        let label = choice.label();
        let gen_stage = format!("generate/{label}");
        self.stage(&format!("utility/{label}"), |p, out| {
            let inputs = p.inputs(&["ingest", &gen_stage])?;
            let chapters = p.selected(selection)?;
            let by_chapter = group_pairs(p.generated_pairs(&label)?);
            let trials = p.config.simulation.utility_trials;
            let sim = p.config.simulation_settings();
            let mut jobs = Vec::new();
            for ch in &chapters {
                let per_trial = by_chapter.get(&ch.id).ok_or_else(|| {
                    PipelineError::dependency(&gen_stage, format!("no generated pairs for chapter {}", ch.id))
                })?;
                for (t, pairs) in per_trial {
                    jobs.push((ch, *t, pairs));
                }
            }
            let results: Vec<(Vec<UtilityRow>, Vec<Value>)> = jobs
                .par_iter()
                .map(|(ch, t, pairs)| {
                    let seed = derive_seed(p.config.seed, &format!("utility/{}/{t}", ch.id));
                    let run = chapter_utilities(&p.gateway, &sim, ch, pairs, trials, seed)
                        .map_err(|e| PipelineError::from(e).context(&format!("{} trial {t}", ch.id)))?;
                    let rows = run
                        .records
                        .into_iter()
                        .map(|record| UtilityRow {
                            chapter_id: ch.id.clone(),
                            trial: *t,
                            record,
                        })
                        .collect();
                    let conditions = run
                        .simulations
                        .iter()
                        .map(|(id, o)| {
                            json!({
                                "chapter_id": ch.id,
                                "trial": t,
                                "study_set_id": id,
                                "trial_scores": o.aggregate.trial_scores,
                                "mean": o.aggregate.mean,
                            })
                        })
                        .collect();
                    Ok((rows, conditions))
                })
                .collect::<Result<_, PipelineError>>()?;
            let (rows, conditions): (Vec<Vec<UtilityRow>>, Vec<Vec<Value>>) = results.into_iter().unzip();
            let rows: Vec<UtilityRow> = rows.into_iter().flatten().collect();
            let conditions: Vec<Value> = conditions.into_iter().flatten().collect();
            out.jsonl(&format!("utility/{label}/utilities.jsonl"), &rows)?;
            out.write(&format!("utility/{label}/utilities.csv"), utility_csv(&rows).as_bytes())?;
            out.jsonl(&format!("utility/{label}/conditions.jsonl"), &conditions)?;
            let params = json!({"split": selection.label(), "utility_trials": trials, "records": rows.len()});
            Ok((inputs, params, vec![format!("{} utility records", rows.len())]))
        })
    }

    pub fn metrics(&mut self, choice: &StrategyChoice) -> Result<StageSummary, PipelineError> {
        let label = choice.label();
        let gen_stage = format!("generate/{label}");
        let util_stage = format!("utility/{label}");
        self.stage(&format!("metrics/{label}"), |p, out| {
            let inputs = p.inputs(&["ingest", &gen_stage, &util_stage])?;
            let chapters: BTreeMap<String, Chapter> = p
                .chapters()?
                .into_iter()
                .map(|c| (c.id.clone(), c))
                .collect();
            let pairs: BTreeMap<String, GeneratedPair> = p
                .generated_pairs(&label)?
                .into_iter()
                .map(|g| (g.pair.id.clone(), g))
                .collect();
            let rows = p.utility_rows(&label)?;
            let judge = p.config.judge();
            let classifier = p.config.classifier();
            let budget = p.config.budgets.metrics_context;
            let embedding = p.config.models.embedding.clone();

            let mut groups: BTreeMap<(String, u32), Vec<String>> = BTreeMap::new();
            for r in &rows {
                groups
                    .entry((r.chapter_id.clone(), r.trial))
                    .or_default()
                    .push(r.record.qa_id.clone());
            }
            let groups: Vec<_> = groups.into_iter().collect();
            let depth: Vec<Vec<(String, Option<u8>)>> = groups
                .par_iter()
                .map(|(_, ids)| {
                    let texts: Vec<&str> = ids
                        .iter()
                        .map(|id| pairs[id].pair.question.as_str())
                        .collect();
                    match corpus::classify_texts(&p.gateway, &classifier, &texts) {
                        Ok(labels) => Ok(ids
                            .iter()
                            .cloned()
                            .zip(labels.into_iter().map(|b| Some(metrics::bloom_depth(b))))
                            .collect()),
                        Err(CorpusError::Lm(e)) => Err(PipelineError::from(e)),
                        Err(e) => {
                            log::warn!("bloom depth unavailable: {e}");
                            Ok(ids.iter().map(|id| (id.clone(), None)).collect())
                        }
                    }
                })
                .collect::<Result<_, PipelineError>>()?;
            let depth: BTreeMap<String, Option<u8>> = depth.into_iter().flatten().collect();

            let records: Vec<(MetricRecord, Vec<String>)> = rows
                .par_iter()
                .map(|r| {
                    let g = pairs.get(&r.record.qa_id).ok_or_else(|| {
                        PipelineError::dependency(
                            &gen_stage,
                            format!("utility record {} has no generated pair", r.record.qa_id),
                        )
                    })?;
                    let ch = chapters.get(&r.chapter_id).ok_or_else(|| {
                        PipelineError::dependency(
                            "ingest",
                            format!("unknown chapter {}", r.chapter_id),
                        )
                    })?;
                    let mut notes = Vec::new();
                    let article = forge::GenerationContext::new(ch, g.pair.anchor_section, budget)
                        .map(|c| c.through_anchor())
                        .unwrap_or_else(|| ch.full_text());
                    let salience = soften(
                        metrics::salience(&p.gateway, &judge, &article, &g.pair.question),
                        &mut notes,
                        &g.pair.id,
                    )?;
                    let eig = match metrics::first_token(&g.pair.answer) {
                        Some(tok) => soften(
                            metrics::eig(&p.gateway, &judge, &article, &g.pair.question, tok),
                            &mut notes,
                            &g.pair.id,
                        )?
                        .map(|e| e.eig),
                        None => None,
                    };
                    let sim = metrics::similarity_to_exam(
                        &p.gateway,
                        &embedding,
                        &g.pair.question,
                        &ch.exam,
                    )?;
                    Ok((
                        MetricRecord {
                            qa_id: g.pair.id.clone(),
                            chapter_id: ch.id.clone(),
                            utility: r.record.utility,
                            salience,
                            eig,
                            max_cosine: sim.max_cosine,
                            max_rouge_l: sim.max_rouge_l,
                            bloom_depth: depth.get(&g.pair.id).copied().flatten(),
                        },
                        notes,
                    ))
                })
                .collect::<Result<_, PipelineError>>()?;
            let (records, notes): (Vec<MetricRecord>, Vec<Vec<String>>) =
                records.into_iter().unzip();
            let notes: Vec<String> = notes.into_iter().flatten().collect();
            let main: Vec<_> = METRIC_PAIRS
                .iter()
                .map(|(a, b)| correlate(&records, a, b))
                .collect();
            let similarity: Vec<_> = SIMILARITY_PAIRS
                .iter()
                .map(|(a, b)| correlate(&records, a, b))
                .collect();
            out.jsonl(&format!("metrics/{label}/metrics.jsonl"), &records)?;
            out.json(&format!("metrics/{label}/correlations.json"), &main)?;
            out.json(
                &format!("metrics/{label}/similarity_correlations.json"),
                &similarity,
            )?;
            let mut md = report::correlation_table(&main);
            md.push('\n');
            md.push_str(&report::correlation_table(&similarity));
            out.write(&format!("metrics/{label}/correlations.md"), md.as_bytes())?;
            let params = json!({"records": records.len(), "unavailable": notes.len()});
            Ok((inputs, params, notes))
        })
    }

    pub fn filter(
        &mut self,
        choice: &StrategyChoice,
        theta: Option<f64>,
    ) -> Result<StageSummary, PipelineError> {
        let label = choice.label();
        let theta = theta.unwrap_or(self.config.filter.theta);
        if !theta.is_finite() {
            return Err(FineTuneError::InvalidTheta(theta).into());
        }
        let gen_stage = format!("generate/{label}");
        let util_stage = format!("utility/{label}");
        self.stage(&format!("filter/{label}/{}", theta_label(theta)), |p, out| {
            let inputs = p.inputs(&[&util_stage, &gen_stage])?;
            let records: Vec<UtilityRecord> = p.utility_rows(&label)?.into_iter().map(|r| r.record).collect();
            let pairs = p.generated_pairs(&label)?;
            let chosen = finetune::filter_by_utility(&records, theta)?;
            out.json(&format!("filter/{label}/{}/accepted.json", theta_label(theta)), &chosen)?;
            let sweep = finetune::threshold_sweep(&records, &p.config.filter.sweep)?;
            out.write(&format!("filter/{label}/threshold_sweep.csv"), finetune::sweep_csv(&sweep).as_bytes())?;
            let mut notes = vec![format!("theta {theta}: {} accepted, {} rejected", chosen.accepted.len(), chosen.rejected)];
            for o in &sweep {
                match finetune::build_examples(&pairs, &o.accepted).and_then(|ex| finetune::render_jsonl(&ex)) {
                    Ok(text) => out.write(&format!("filter/{label}/sweep/{}.jsonl", theta_label(o.theta)), text.as_bytes())?,
                    Err(FineTuneError::EmptyDataset) => notes.push(format!("theta {}: no accepted pairs, no dataset", o.theta)),
                    Err(e) => return Err(e.into()),
                }
            }
            let params = json!({"theta": theta, "accepted": chosen.accepted.len(), "rejected": chosen.rejected});
            Ok((inputs, params, notes))
        })
    }

    /// Writes the fine-tune files for the accepted pairs at `theta`, and
    /// submits them when `submit` is given.
    pub fn emit_finetune(
        &mut self,
        choice: &StrategyChoice,
        theta: Option<f64>,
        mode: ExportMode,
        submit: Option<&HttpTransport>,
    ) -> Result<StageSummary, PipelineError> {
        let label = choice.label();
        let theta = theta.unwrap_or(self.config.filter.theta);
        let filter_stage = format!("filter/{label}/{}", theta_label(theta));
        let gen_stage = format!("generate/{label}");
        let name = format!(
            "emit-finetune/{label}/{}/{}",
            theta_label(theta),
            mode.label()
        );
        self.stage(&name, |p, out| {
            let inputs = p.inputs(&["ingest", &gen_stage, &filter_stage])?;
            let chosen: FilterOutcome =
                read_json(&p.run_dir.join(format!("filter/{label}/{}/accepted.json", theta_label(theta))))?;
            if chosen.accepted.is_empty() {
                return Err(FineTuneError::EmptyDataset.into());
            }
            let subjects: BTreeMap<String, String> = p
                .chapters()?
                .into_iter()
                .map(|c| (c.id, c.subject.name().to_lowercase()))
                .collect();
            let accepted: std::collections::BTreeSet<&str> = chosen.accepted.iter().map(String::as_str).collect();
            let pairs: Vec<GeneratedPair> = p
                .generated_pairs(&label)?
                .into_iter()
                .filter(|g| accepted.contains(g.pair.id.as_str()))
                .collect();
            let groups = finetune::partition(mode, &pairs, |c| subjects.get(c).cloned().unwrap_or_else(|| "unknown".into()));
            let mut files = BTreeMap::new();
            let mut jobs = BTreeMap::new();
            for (group, members) in &groups {
                let ids: Vec<String> = members.iter().map(|g| g.pair.id.clone()).collect();
                let text = finetune::render_jsonl(&finetune::build_examples(members, &ids)?)?;
                let rel = format!("finetune/{label}/{}/{}/{group}.jsonl", theta_label(theta), mode.label());
                out.write(&rel, text.as_bytes())?;
                files.insert(rel.clone(), json!({"examples": ids.len(), "sha256": crate::domain::sha256_hex(text.as_bytes())}));
                if let Some(t) = submit {
                    let job = finetune::submit_finetune(t, &format!("{group}.jsonl"), text.as_bytes(), &p.config.finetune.base_model)?;
                    jobs.insert(rel, job.job_id);
                }
            }
            let mut params = json!({
                "theta": theta,
                "mode": mode.label(),
                "accepted": chosen.accepted.len(),
                "rejected": chosen.rejected,
                "files": files,
            });
            if !jobs.is_empty() {
                params["jobs"] = json!(jobs);
            }
            let notes = jobs.iter().map(|(f, j)| format!("{f}: job {j}")).collect();
            Ok((inputs, params, notes))
        })
    }

    /// Collects exam-score tables, corpus statistics and correlation tables
    /// from the stages run so far into `report.md`, and returns its text.
    pub fn report(&mut self) -> Result<(StageSummary, String), PipelineError> {
        let stages: Vec<String> = self.manifest.stages.keys().cloned().collect();
        let mut text = String::new();
        self.stage("report", |p, out| {
            let mut inputs = BTreeMap::new();
            let mut md = format!("# Run {}\n\n", p.manifest.run_id);
            if p.manifest.stages.contains_key("ingest") {
                inputs.extend(p.inputs(&["ingest"])?);
                let stats: CorpusStats = read_json(&p.run_dir.join("corpus_stats.json"))?;
                md.push_str("## Corpus\n\n```\n");
                md.push_str(&stats.to_csv());
                md.push_str("```\n\n");
            }
            for s in stages.iter().filter(|s| s.starts_with("run/")) {
                inputs.extend(p.inputs(&[s])?);
                let label = &s["run/".len()..];
                let scores: ScoreReport = read_json(&p.run_dir.join(format!("{s}/scores.json")))?;
                md.push_str(&format!("## Exam scores: {label}\n\n"));
                md.push_str(&report::score_table(&scores.subjects));
                md.push('\n');
            }
            for s in stages.iter().filter(|s| s.starts_with("metrics/")) {
                inputs.extend(p.inputs(&[s])?);
                let label = &s["metrics/".len()..];
                md.push_str(&format!("## Metric correlations: {label}\n\n"));
                md.push_str(
                    &fs::read_to_string(p.run_dir.join(format!("{s}/correlations.md")))
                        .map_err(|e| io_err(&p.run_dir, e))?,
                );
                md.push('\n');
            }
            for s in stages.iter().filter(|s| s.starts_with("filter/")) {
                inputs.extend(p.inputs(&[s])?);
            }
            for s in stages.iter().filter(|s| s.starts_with("utility/")) {
                let label = &s["utility/".len()..];
                let sweep = p
                    .run_dir
                    .join(format!("filter/{label}/threshold_sweep.csv"));
                if let Ok(csv) = fs::read_to_string(&sweep) {
                    md.push_str(&format!(
                        "## Dataset size by threshold: {label}\n\n```\n{csv}```\n\n"
                    ));
                }
            }
            out.write("report.md", md.as_bytes())?;
            text = md;
            Ok((inputs, Value::Null, Vec::new()))
        })
        .map(|s| (s, text))
    }
}

fn soften<T>(
    r: Result<T, MetricError>,
    notes: &mut Vec<String>,
    id: &str,
) -> Result<Option<T>, PipelineError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::Lm(e)) => Err(e.into()),
        Err(e) => {
            notes.push(format!("{id}: {e}"));
            Ok(None)
        }
    }
}

/// Pairs by chapter, then by generation trial, in file order.
fn group_pairs(
    pairs: Vec<GeneratedPair>,
) -> BTreeMap<String, BTreeMap<u32, Vec<crate::domain::QAPair>>> {
    let mut out: BTreeMap<String, BTreeMap<u32, Vec<crate::domain::QAPair>>> = BTreeMap::new();
    for g in pairs {
        out.entry(g.chapter_id)
            .or_default()
            .entry(g.pair.generator.trial)
            .or_default()
            .push(g.pair);
    }
    out
}

fn subject_rows(label: &str, chapters: &[ChapterScore]) -> Vec<ScoreRow> {
    let mut by: BTreeMap<&str, Vec<&ChapterScore>> = BTreeMap::new();
    for c in chapters {
        by.entry(c.subject.as_str()).or_default().push(c);
    }
    by.into_iter()
        .map(|(subject, cs)| {
            let n = cs.len() as f64;
            ScoreRow {
                subject: subject.to_string(),
                strategy: label.to_string(),
                score: cs.iter().map(|c| c.study.mean).sum::<f64>() / n,
                baseline: cs.iter().map(|c| c.no_study.mean).sum::<f64>() / n,
                chapters: cs.len(),
            }
        })
        .collect()
}

fn utility_csv(rows: &[UtilityRow]) -> String {
    let mut out =
        String::from("chapter_id,trial,qa_id,s_empty,s_full,s_single,s_all_but_one,utility\n");
    for r in rows {
        let u = &r.record;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.chapter_id,
            r.trial,
            u.qa_id,
            u.s_empty,
            u.s_full,
            u.s_single,
            u.s_all_but_one,
            u.utility
        ));
    }
    out
}

/// Timeout for the optional fine-tune submission.
pub fn submit_timeout(config: &Config) -> Duration {
    Duration::from_secs(config.backend.timeout_secs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(
            PipelineError::from(LmError::Fatal("x".into())).exit_code(),
            4
        );
        assert_eq!(
            PipelineError::from(LmError::Retryable("x".into())).exit_code(),
            4
        );
        assert_eq!(
            PipelineError::from(FineTuneError::InvalidTheta(f64::NAN)).exit_code(),
            2
        );
        assert_eq!(
            PipelineError::from(FineTuneError::EmptyDataset).exit_code(),
            1
        );
        assert_eq!(PipelineError::dependency("ingest", "x").exit_code(), 3);
        let nested = SimError::Trial {
            trial: 2,
            source: Box::new(SimError::Lm(LmError::Fatal("quota".into()))),
        };
        let e = PipelineError::from(nested);
        assert_eq!(e.exit_code(), 4);
        assert!(e.to_string().contains("trial 2"));
    }

    #[test]
    fn split_selection_and_labels() {
        assert_eq!(
            SplitSelection::parse("train+test"),
            Some(SplitSelection::TrainTest)
        );
        assert_eq!(SplitSelection::parse("dev"), None);
        assert!(SplitSelection::TrainTest.admits(Split::Test));
        assert!(!SplitSelection::TrainTest.admits(Split::Unassigned));
        assert!(SplitSelection::All.admits(Split::Unassigned));
        assert_eq!(theta_label(0.1), "theta-0.1");
        assert_eq!(theta_label(0.0), "theta-0");
        assert!(StrategyChoice::new(Strategy::CoT, Some("m".into())).is_err());
    }

    #[test]
    fn snapshot_ignores_execution_settings() {
        let a = Config::default();
        let mut b = a.clone();
        b.workers = 9;
        b.paths.runs_dir = "/elsewhere".into();
        assert_eq!(
            compute_run_id(&a, "mock:1", "c"),
            compute_run_id(&b, "mock:1", "c")
        );
        b.seed = 1;
        assert_ne!(
            compute_run_id(&a, "mock:1", "c"),
            compute_run_id(&b, "mock:1", "c")
        );
        assert_ne!(
            compute_run_id(&a, "mock:1", "c"),
            compute_run_id(&a, "mock:2", "c")
        );
    }

    #[test]
    fn outputs_refuse_to_change_existing_files() {
        let d = tempfile::tempdir().unwrap();
        let mut o = Outputs::new(d.path());
        o.write("a/x.txt", b"1").unwrap();
        o.write("a/x.txt", b"1").unwrap();
        assert!(o
            .write("a/x.txt", b"2")
            .unwrap_err()
            .to_string()
            .contains("immutable"));
    }
}
