use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use forge_core::distractor::WindowSpec;
use forge_core::optimize::AdversaryKind;
use forge_core::pipeline::{Pipeline, PipelineConfig, PipelineError, Stage};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "forge", version, about = "Build and evaluate a sentence-completion benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Use deterministic offline embeddings.
    #[arg(long)]
    mock_embeddings: bool,
    /// Model answering items during optimize and eval.
    #[arg(long, value_enum)]
    adversary: Option<Adversary>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Adversary {
    Mock,
    Api,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    random_trials: Option<usize>,
    /// Candidates sampled from per item.
    #[arg(long)]
    window: Option<usize>,
    /// Top-ranked candidates passed over before the window.
    #[arg(long)]
    skip: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Read corpus files and sample paragraphs.
    Ingest(Common),
    /// Split paragraphs into prefix/completion pairs.
    Segment(Common),
    /// Filter pairs with the judge model.
    Validate(Common),
    /// Embed prefixes, joined texts and completions.
    Embed(Common),
    /// Search scoring weights against the adversary.
    Optimize(OptimizeArgs),
    /// Assemble the multiple-choice dataset.
    Build(Common),
    /// Evaluate a model on one split.
    Eval(Common),
    /// Dataset length statistics.
    Stats(Common),
    /// Every stage in order.
    All(Common),
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let (stages, common, opt): (Vec<Stage>, &Common, Option<&OptimizeArgs>) = match &cli.command {
        Command::Ingest(c) => (vec![Stage::Ingest], c, None),
        Command::Segment(c) => (vec![Stage::Segment], c, None),
        Command::Validate(c) => (vec![Stage::Validate], c, None),
        Command::Embed(c) => (vec![Stage::Embed], c, None),
        Command::Optimize(o) => (vec![Stage::Optimize], &o.common, Some(o)),
        Command::Build(c) => (vec![Stage::Build], c, None),
        Command::Eval(c) => (vec![Stage::Eval], c, None),
        Command::Stats(c) => (vec![Stage::Stats], c, None),
        Command::All(c) => (Stage::ALL.to_vec(), c, None),
    };

    let mut cfg = PipelineConfig::load(&common.config)?;
    if common.mock_embeddings {
        cfg.embeddings.mock_mode = true;
    }
    if let Some(a) = common.adversary {
        let kind = match a {
            Adversary::Mock => AdversaryKind::Mock,
            Adversary::Api => AdversaryKind::Api,
        };
        cfg.study.adversary = kind;
        cfg.eval.answerer = kind;
    }
    if let Some(o) = opt {
        if let Some(n) = o.trials {
            cfg.study.n_trials = n;
        }
        if let Some(n) = o.random_trials {
            cfg.study.n_random = n;
        }
        let w = cfg.study.window;
        cfg.study.window = WindowSpec::new(o.skip.unwrap_or(w.skip), o.window.unwrap_or(w.window));
    }
    cfg.validate()?;

    let pipeline = Pipeline::new(cfg, &common.config);
    for stage in stages {
        let m = pipeline.run(stage)?;
        let state = if m.skipped { "up to date" } else { "done" };
        println!("{}: {state} ({} outputs)", stage.name(), m.output_paths.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
