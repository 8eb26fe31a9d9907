//! `convsel` — conversational query expansion pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (unreadable, malformed or missing input/artifact), 3 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use convsel::metrics::MetricSpec;
use convsel::pipeline::{self, Form, RetrieveArgs, RunConfig, Split};
use convsel::synth::SynthSpec;
use convsel::Error;

#[derive(Parser, Debug)]
#[command(name = "convsel", version, about = "Select useful history turns to expand conversational queries")]
struct Cli {
    /// Run configuration (TOML). Relative paths inside it resolve against its directory.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set k=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_key_value)]
    overrides: Vec<(String, String)>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the BM25 index and the pseudo-query-trained dense encoder.
    Index,
    /// Label every history turn as useful or not for each judged turn.
    Prl {
        /// Also write term-level labels.
        #[arg(long)]
        terms: bool,
    },
    /// Train the history-turn selector on the training split.
    SelectorTrain,
    /// Jointly train the dense query encoder and the selector head.
    JointTrain,
    /// Retrieve for every turn with one query form and write a run file.
    Retrieve {
        #[arg(long, default_value = "raw")]
        form: Form,
        #[arg(long, default_value = "all")]
        split: Split,
        /// Dense encoder to use instead of the indexed one (e.g. the joint encoder).
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Score a run file against the qrels.
    Evaluate {
        run: PathBuf,
        /// Metrics such as MRR, NDCG@3, Recall@10. Defaults to the standard set.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<MetricSpec>,
    },
    /// Switch-type, agreement and success/failure analysis.
    Analyze,
    /// Generate a synthetic corpus, sessions, qrels and run config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Generator spec (JSON). Defaults to the built-in spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sessions: Option<usize>,
    },
    /// Compare raw, all-history and gold-label expansion under both retrievers.
    Fig2,
}

fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn load_spec(path: Option<&Path>) -> Result<SynthSpec> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str(&text).map_err(Error::from)?)
        }
        None => Ok(SynthSpec::default()),
    }
}

fn run(cli: Cli) -> Result<String> {
    if let Command::Synth {
        out,
        spec,
        seed,
        sessions,
    } = &cli.command
    {
        let mut spec = load_spec(spec.as_deref())?;
        if let Some(seed) = seed {
            spec.seed = *seed;
        }
        if let Some(n) = sessions {
            spec.num_sessions = *n;
        }
        return Ok(pipeline::cmd_synth(&spec, out)?);
    }
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let msg = match &cli.command {
        Command::Index => pipeline::cmd_index(&config)?,
        Command::Prl { terms } => pipeline::cmd_prl_generate(&config, *terms)?,
        Command::SelectorTrain => pipeline::cmd_selector_train(&config)?,
        Command::JointTrain => pipeline::cmd_joint_train(&config)?,
        Command::Retrieve { form, split, encoder } => pipeline::cmd_retrieve(
            &config,
            &RetrieveArgs {
                form: *form,
                split: *split,
                encoder: encoder.as_deref(),
            },
        )?,
        Command::Evaluate { run, metrics } => pipeline::cmd_evaluate(&config, run, metrics)?.1,
        Command::Analyze => pipeline::cmd_analyze(&config)?.1,
        Command::Fig2 => pipeline::cmd_fig2(&config)?.1,
        Command::Synth { .. } => unreachable!("handled above"),
    };
    Ok(msg)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 1,
        Some(
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::DuplicateDocId(_)
            | Error::UnknownDocId(_)
            | Error::MissingArtifact { .. }
            | Error::VersionMismatch { .. }
            | Error::SingleClass { .. }
            | Error::Json(_),
        ) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(msg) => {
            print!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
