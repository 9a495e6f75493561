use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use studysim_core::config::Config;
use studysim_core::domain::Strategy;
use studysim_core::finetune::ExportMode;
use studysim_core::lm::{Backend, HttpTransport, MockBackend, MockScript, OpenAiBackend};
use studysim_core::orchestrator::{
    submit_timeout, Pipeline, PipelineError, SplitSelection, StageSummary, StrategyChoice,
};

#[derive(Parser, Debug)]
#[command(
    name = "studysim",
    version,
    about = "Generate study questions, score them with a simulated learner, and build fine-tune sets"
)]
struct Cli {
    /// `openai` (OPENAI_API_KEY, OPENAI_BASE_URL) or `mock:<script.json>`.
    #[arg(long, global = true, default_value = "openai")]
    backend: String,
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run id under the runs directory. Defaults to the latest run.
    #[arg(long, global = true)]
    run: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct StrategyArgs {
    /// zero-shot, few-shot, cot, bloom-based or fine-tuned.
    #[arg(long, default_value = "zero-shot")]
    strategy: String,
    /// Model to sample from with the fine-tuned strategy.
    #[arg(long)]
    model_id: Option<String>,
}

impl StrategyArgs {
    fn choice(&self) -> Result<StrategyChoice, PipelineError> {
        let strategy = Strategy::parse(&self.strategy).ok_or_else(|| {
            PipelineError::Validation(format!("unknown strategy {:?}", self.strategy))
        })?;
        StrategyChoice::new(strategy, self.model_id.clone())
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Curate a corpus directory and start a run.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        /// Keep every curated chapter unassigned instead of splitting train/test.
        #[arg(long)]
        no_split: bool,
    },
    /// Generate QA sets with a strategy.
    Generate {
        #[command(flatten)]
        strategy: StrategyArgs,
        /// train, test, train+test or all.
        #[arg(long, default_value = "train+test")]
        split: String,
    },
    /// Simulate exams after studying the generated sets.
    Run {
        #[command(flatten)]
        strategy: StrategyArgs,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Estimate per-question utilities.
    Utility {
        #[command(flatten)]
        strategy: StrategyArgs,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Salience, EIG and exam-similarity metrics with their correlations.
    Metrics {
        #[command(flatten)]
        strategy: StrategyArgs,
    },
    /// Keep QA pairs with utility at or above a threshold.
    Filter {
        #[command(flatten)]
        strategy: StrategyArgs,
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Write chat-format fine-tune files for the accepted pairs.
    EmitFinetune {
        #[command(flatten)]
        strategy: StrategyArgs,
        #[arg(long)]
        theta: Option<f64>,
        /// subject (one file per subject) or cross (one file).
        #[arg(long)]
        mode: Option<String>,
        /// Upload the files and start fine-tune jobs.
        #[arg(long)]
        submit: bool,
    },
    /// Collect score and correlation tables into report.md.
    Report,
}

fn split(s: &str) -> Result<SplitSelection, PipelineError> {
    SplitSelection::parse(s)
        .ok_or_else(|| PipelineError::Validation(format!("unknown split {s:?}")))
}

fn load_config(cli: &Cli) -> Result<Config, PipelineError> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    config.apply_env();
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    config.validate()?;
    Ok(config)
}

fn backend(spec: &str, config: &Config) -> Result<Arc<dyn Backend>, PipelineError> {
    if let Some(path) = spec.strip_prefix("mock:") {
        let script = MockScript::load(path.as_ref())
            .map_err(|e| PipelineError::Validation(e.to_string()))?;
        let mock =
            MockBackend::new(script).map_err(|e| PipelineError::Validation(e.to_string()))?;
        return Ok(Arc::new(mock));
    }
    if spec != "openai" {
        return Err(PipelineError::Validation(format!(
            "unknown backend {spec:?}; use openai or mock:<path>"
        )));
    }
    let transport =
        HttpTransport::from_env(config.backend.base_url.as_deref(), submit_timeout(config))?;
    Ok(Arc::new(OpenAiBackend::new(
        transport,
        config.backend.requests_per_minute,
    )))
}

fn print(run_id: &str, s: &StageSummary) {
    println!(
        "{} [{run_id}]: {} outputs, {} backend calls, {} cache hits",
        s.stage, s.outputs, s.backend_calls, s.cache_hits
    );
    for n in &s.notes {
        println!("  {n}");
    }
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let config = load_config(&cli)?;
    let backend = backend(&cli.backend, &config)?;
    if let Command::Ingest { corpus, no_split } = &cli.command {
        let mut p = Pipeline::create(config, backend, corpus)?;
        let s = p.ingest(corpus, !no_split)?;
        print(p.run_id(), &s);
        return Ok(());
    }
    let mut p = Pipeline::open(config, backend, cli.run.as_deref())?;
    let summary = match &cli.command {
        Command::Ingest { .. } => unreachable!("handled above"),
        Command::Generate { strategy, split: s } => p.generate(&strategy.choice()?, split(s)?)?,
        Command::Run { strategy, split: s } => p.run_exams(&strategy.choice()?, split(s)?)?,
        Command::Utility { strategy, split: s } => p.utility(&strategy.choice()?, split(s)?)?,
        Command::Metrics { strategy } => p.metrics(&strategy.choice()?)?,
        Command::Filter { strategy, theta } => p.filter(&strategy.choice()?, *theta)?,
        Command::EmitFinetune {
            strategy,
            theta,
            mode,
            submit,
        } => {
            let mode = match mode {
                Some(m) => ExportMode::parse(m)
                    .ok_or_else(|| PipelineError::Validation(format!("unknown mode {m:?}")))?,
                None => p.config().finetune.mode,
            };
            let transport = if *submit || p.config().finetune.submit {
                Some(HttpTransport::from_env(
                    p.config().backend.base_url.as_deref(),
                    submit_timeout(p.config()),
                )?)
            } else {
                None
            };
            p.emit_finetune(&strategy.choice()?, *theta, mode, transport.as_ref())?
        }
        Command::Report => {
            let (s, text) = p.report()?;
            print!("{text}");
            s
        }
    };
    print(p.run_id(), &summary);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
