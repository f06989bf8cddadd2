use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pbf_rag_core::config::parse_config;
use pbf_rag_core::workflow::{Options, Outcome, Workflow, WorkflowError};

/// Retrieval-augmented anomaly detection for powder bed fusion layer images.
#[derive(Debug, Parser)]
#[command(name = "pbf-rag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use this run directory name instead of the config-derived one.
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Detect without retrieved knowledge.
    #[arg(long, global = true)]
    ablate: bool,
    /// Fail on any mock request without a registered fixture.
    #[arg(long, global = true)]
    strict_fixtures: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Extract page text and page images from the corpus PDFs.
    Ingest,
    /// Embed chunks and pages into the vector index.
    Index,
    /// Build the per-anomaly knowledge packets.
    Knowledge,
    /// Classify every test sample.
    Detect,
    /// Score a detection run against the annotations.
    Evaluate,
    /// Detect with and without retrieval, then compare.
    Ablate,
    /// Re-render markdown reports from stored JSON.
    Report,
}

fn fail(kind: &str, message: String, hint: Option<&str>, code: u8) -> ExitCode {
    let v = serde_json::json!({"error": {"kind": kind, "message": message, "hint": hint}});
    eprintln!("{v}");
    ExitCode::from(code)
}

fn run(cli: &Cli, config: PathBuf) -> Result<Outcome, WorkflowError> {
    let cfg = parse_config(config)?;
    let wf = Workflow::new(
        cfg,
        Options {
            run_id: cli.run_id.clone(),
            ablate: cli.ablate,
            strict_fixtures: cli.strict_fixtures,
        },
    )?;
    match cli.command {
        Command::Ingest => wf.ingest(),
        Command::Index => wf.index(),
        Command::Knowledge => wf.knowledge(),
        Command::Detect => wf.detect(),
        Command::Evaluate => wf.evaluate(),
        Command::Ablate => wf.ablate(),
        Command::Report => wf.report(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail("usage", first.to_string(), Some("see `pbf-rag --help`"), 64);
        }
    };
    let Some(config) = cli.config.clone() else {
        return fail("usage", "--config <path> is required".into(), Some("see `pbf-rag --help`"), 64);
    };
    match run(&cli, config) {
        Ok(out) => {
            println!("{}", serde_json::to_string(&out).expect("outcome serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
