//! `flowmine`: run workflow extraction experiments stage by stage or end to end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use flowmine_core::corpus::load_corpus;
use flowmine_core::experiment::{
    render_report_value, run_experiment, texts_of, verify_fixtures, ExperimentConfig, ExperimentError, RunManifest, Session,
};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "flowmine", version, about = "Workflow extraction from support dialogs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// `key.path=value`, applied after the file is read. Repeatable.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Procedural elements for every selected conversation.
    ExtractElements(ConfigArgs),
    /// Conversation selection per intent.
    Retrieve(ConfigArgs),
    /// Workflow generation (runs retrieval first).
    Generate(ConfigArgs),
    /// Sub-flows and scenarios of the ground-truth workflows.
    Decompose(ConfigArgs),
    /// Dialog-simulation evaluation of freshly generated workflows.
    EvaluateE2e(ConfigArgs),
    /// Alternative evaluators over freshly generated workflows.
    EvaluateAlt(ConfigArgs),
    /// Compliance of conversations with the ground-truth workflows.
    CheckCompliance {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus to check instead of the configured one.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Synthetic conversations from the ground-truth workflows.
    Synthesize(ConfigArgs),
    /// Full pipeline.
    Run(ConfigArgs),
    /// Print a JSON report file as a table.
    Report { path: PathBuf },
    /// Fixture maintenance.
    Fixtures {
        #[command(subcommand)]
        action: FixtureAction,
    },
}

#[derive(Subcommand)]
enum FixtureAction {
    /// Check that every request in a run manifest has an intact fixture.
    Verify {
        manifest: PathBuf,
        #[arg(long)]
        fixtures: PathBuf,
    },
}

enum Failure {
    Experiment(ExperimentError),
    Other(anyhow::Error),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure::Experiment(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn open(args: &ConfigArgs) -> Result<Session, ExperimentError> {
    Session::open(ExperimentConfig::load(&args.config, &args.overrides)?, None)
}

/// Runs `body` in a fresh session, then writes the manifest (or the failure record).
fn staged(args: &ConfigArgs, body: impl FnOnce(&mut Session) -> Result<(), ExperimentError>) -> Result<(), Failure> {
    let mut s = open(args)?;
    match body(&mut s) {
        Ok(()) => {
            s.finish()?;
            println!("{}", s.writer.root().display());
            Ok(())
        }
        Err(e) => {
            s.record_failure(&e);
            Err(e.into())
        }
    }
}

fn generated(s: &mut Session) -> Result<std::collections::BTreeMap<String, Vec<(u64, String)>>, ExperimentError> {
    let intents = s.intents()?;
    let elements = match s.config.retrieval.strategy.source() {
        Some(flowmine_core::retrieval::EmbeddingSource::ProceduralElements) => s.extract_elements_stage(&intents)?,
        _ => Vec::new(),
    };
    let selections = s.retrieve_stage(&intents, &elements)?;
    Ok(texts_of(&s.generate_stage(&selections)?))
}

fn read_json(path: &Path) -> anyhow::Result<Value> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    serde_json::from_str(&text).with_context(|| path.display().to_string())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::ExtractElements(a) => staged(&a, |s| {
            let intents = s.intents()?;
            s.extract_elements_stage(&intents).map(drop)
        }),
        Command::Retrieve(a) => staged(&a, |s| {
            let intents = s.intents()?;
            let elements = match s.config.retrieval.strategy.source() {
                Some(flowmine_core::retrieval::EmbeddingSource::ProceduralElements) => s.extract_elements_stage(&intents)?,
                _ => Vec::new(),
            };
            s.retrieve_stage(&intents, &elements).map(drop)
        }),
        Command::Generate(a) => staged(&a, |s| generated(s).map(drop)),
        Command::Decompose(a) => staged(&a, |s| {
            let intents = s.intents()?;
            s.decompose_stage(&intents).map(drop)
        }),
        Command::EvaluateE2e(a) => staged(&a, |s| {
            let texts = generated(s)?;
            let intents = s.intents()?;
            let plans = s.decompose_stage(&intents)?;
            let (_, mean) = s.evaluate_e2e_stage(&plans, &texts)?;
            print!("{}", flowmine_core::e2e::render_table(&mean));
            Ok(())
        }),
        Command::EvaluateAlt(a) => staged(&a, |s| {
            let methods = s.config.evaluation.alt_methods().map_err(ExperimentError::Config)?;
            if methods.is_empty() {
                return Err(ExperimentError::Config("evaluation.evaluators names no alternative evaluator".into()));
            }
            let texts = generated(s)?;
            s.evaluate_alt_stage(&texts, &methods)
        }),
        Command::CheckCompliance { cfg, corpus } => staged(&cfg, |s| {
            let corpus = match corpus {
                Some(p) => load_corpus(&p).map_err(|e| ExperimentError::Config(format!("{}: {e}", p.display())))?,
                None => s.corpus()?.clone(),
            };
            let reports = s.compliance_stage(&corpus)?;
            let rows = serde_json::to_value(flowmine_core::alt_eval::rollup(&reports)).expect("rollup serializes");
            print!("{}", render_report_value(&rows).expect("rollup renders"));
            Ok(())
        }),
        Command::Synthesize(a) => staged(&a, |s| {
            let intents = s.intents()?;
            let convs = s.synthesize_stage(&intents)?;
            eprintln!("synthesized {} conversations", convs.len());
            Ok(())
        }),
        Command::Run(a) => {
            let out = run_experiment(ExperimentConfig::load(&a.config, &a.overrides)?)?;
            if let Some(r) = &out.report {
                print!("{}", flowmine_core::e2e::render_table(r));
            }
            println!("{}", out.run_dir.display());
            Ok(())
        }
        Command::Report { path } => {
            let v = read_json(&path)?;
            print!("{}", render_report_value(&v).map_err(|e| anyhow!("{}: {e}", path.display()))?);
            Ok(())
        }
        Command::Fixtures { action: FixtureAction::Verify { manifest, fixtures } } => {
            let m = RunManifest::load(&manifest)?;
            match verify_fixtures(&m, &fixtures) {
                Ok(n) => {
                    println!("{n} fixtures verified");
                    Ok(())
                }
                Err(errors) => {
                    for e in &errors {
                        eprintln!("{e}");
                    }
                    Err(anyhow!("{} of {} fixtures failed verification", errors.len(), m.fingerprints.len()).into())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Experiment(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
