use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use typsgd_cli::{
    cmd_embed, cmd_gen, cmd_partition, cmd_report, cmd_train, cmd_verify, CliResult, RunConfig,
    EXIT_ASSERTION, EXIT_OK, EXIT_USAGE,
};

#[derive(Debug, Parser)]
#[command(name = "typsgd", version, about = "Typicality-sampling SGD experiments and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Replace the configured seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Concurrent training runs.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate or import the dataset.
    Gen,
    /// Embed the dataset with t-SNE.
    Embed,
    /// Embed, estimate densities and split into strata H and L.
    Partition,
    /// Paired SRS vs typicality training runs.
    Train,
    /// Run the oracle suite; exits 1 if any asserted check fails.
    Verify,
    /// Rebuild comparison tables and plots from existing traces.
    Report,
}

fn run(cli: Cli) -> CliResult<i32> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.seed, cli.out, cli.workers);
    match cli.command {
        Command::Gen => cmd_gen(&cfg).map(|_| EXIT_OK),
        Command::Embed => cmd_embed(&cfg).map(|_| EXIT_OK),
        Command::Partition => cmd_partition(&cfg).map(|_| EXIT_OK),
        Command::Train => cmd_train(&cfg).map(|_| EXIT_OK),
        Command::Report => cmd_report(&cfg).map(|_| EXIT_OK),
        Command::Verify => cmd_verify(&cfg).map(|(r, _)| if r.passed() { EXIT_OK } else { EXIT_ASSERTION }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
