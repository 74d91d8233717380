use std::path::PathBuf;
use std::process::ExitCode;

use asmmd_cli::{cmd_experiment, cmd_report, cmd_synth, cmd_train, load_config, CliError, Overrides};
use clap::{Parser, Subcommand};

/// Cross-domain ERP classification: synthetic data, training runs,
/// cross-validated experiments and their statistical reports.
#[derive(Parser)]
#[command(name = "asmmd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Default)]
struct RunFlags {
    /// `key = value` configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds (overrides `seeds`).
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Comma-separated methods (overrides `methods`).
    #[arg(long)]
    methods: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic source and target epoch files.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_source: PathBuf,
        #[arg(long)]
        out_target: PathBuf,
    },
    /// Train and evaluate a single (method, fold, seed) replicate.
    Train {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value = "asmmd")]
        method: String,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Save the trained model here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every (method, fold, seed) replicate and write results.csv.
    Experiment {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Summarize a results table: confidence intervals and paired tests.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        design: PathBuf,
        /// Also write the summary to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configured(run: &RunFlags) -> Result<asmmd_cli::config::ExperimentConfig, CliError> {
    let mut cfg = load_config(run.config.as_deref())?;
    Overrides {
        out: run.out.clone(),
        seeds: run.seed_list.clone(),
        methods: run.methods.clone(),
    }
    .apply(&mut cfg)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            config,
            out_source,
            out_target,
        } => {
            let cfg = load_config(config.as_deref())?;
            println!("config hash: {}", cfg.hash()?);
            print!("{}", cmd_synth(&cfg, &out_source, &out_target)?);
        }
        Command::Train {
            run,
            method,
            fold,
            seed,
            checkpoint,
        } => {
            let cfg = configured(&run)?;
            println!("config hash: {}", cfg.hash()?);
            print!("{}", cmd_train(&cfg, &method, fold, seed, checkpoint.as_deref())?);
        }
        Command::Experiment { run, workers } => {
            let cfg = configured(&run)?;
            let out = cmd_experiment(&cfg, workers)?;
            println!("config hash: {}", out.config_hash);
            println!("results: {}", out.results_path.display());
            if out.failures > 0 {
                return Err(CliError::ReplicateFailures(out.failures));
            }
        }
        Command::Report { results, design, out } => {
            let text = cmd_report(&results, &design)?;
            print!("{text}");
            if let Some(p) = out {
                std::fs::write(p, &text)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ASMMD_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
