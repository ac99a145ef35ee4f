use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use todgen::llm::BackendKind;
use todgen::pipeline::{Pipeline, PipelineConfig, PipelineError, StageSummary};

#[derive(Parser)]
#[command(name = "todgen", version, about = "Generate task-oriented dialog datasets from service schemas")]
struct Cli {
    /// TOML pipeline config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of dialogs to plot.
    #[arg(long, global = true)]
    count: Option<usize>,
    /// Comma-separated service subset.
    #[arg(long, global = true, value_delimiter = ',')]
    services: Option<Vec<String>>,
    /// Override the kind of every backend.
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Mock,
    Http,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    Personas,
    Contexts,
    Plots,
    Realize,
    Qc,
    Stats,
    Split,
    RunAll,
}

fn configure(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.split.seed = s;
    }
    if let Some(n) = cli.count {
        cfg.dialogs = n;
    }
    if let Some(s) = &cli.services {
        cfg.services = s.clone();
    }
    if let Some(b) = cli.backend {
        let kind = match b {
            Backend::Mock => BackendKind::Mock,
            Backend::Http => BackendKind::Http,
        };
        for c in [
            &mut cfg.backends.generator,
            &mut cfg.backends.user,
            &mut cfg.backends.system,
            &mut cfg.backends.evaluator,
        ] {
            c.kind = kind;
        }
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Vec<StageSummary>, PipelineError> {
    let p = Pipeline::new(configure(cli)?)?;
    let one = |s: Result<StageSummary, PipelineError>| s.map(|s| vec![s]);
    match cli.command {
        Command::Personas => one(p.run_personas()),
        Command::Contexts => one(p.run_contexts()),
        Command::Plots => one(p.run_plots()),
        Command::Realize => one(p.run_realize()),
        Command::Qc => one(p.run_qc()),
        Command::Stats => one(p.run_stats()),
        Command::Split => one(p.run_split()),
        Command::RunAll => p.run_all(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(stages) => {
            let ok = stages.iter().all(StageSummary::ok);
            let summary: Vec<_> = stages
                .iter()
                .map(|s| json!({"stage": s.stage, "produced": s.produced, "errors": s.errors}))
                .collect();
            println!("{}", json!({"ok": ok, "stages": summary}));
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("{}", json!({"ok": false, "error": {"kind": e.kind(), "message": e.to_string()}}));
            ExitCode::from(2)
        }
    }
}
