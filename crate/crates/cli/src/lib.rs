//! Command implementations behind the `asmmd` binary.

pub mod config;
pub mod experiment;
pub mod report;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use asmmd_core::data::{synth_generate, write_epochs, EpochSet};
use asmmd_core::trainer::{save_checkpoint, Method};
use thiserror::Error;

use crate::config::{parse_methods, ExperimentConfig};
use crate::experiment::{
    design_text, load_datasets, paired_design, parse_design, prepare_seed, run_matrix, write_history,
    write_results,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0} replicate(s) failed")]
    ReplicateFailures(usize),
    #[error(transparent)]
    Core(#[from] asmmd_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 1 for failed replicates, 2 for usage, configuration and input errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ReplicateFailures(_) => 1,
            _ => 2,
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            ExperimentConfig::parse(&text)
        }
    }
}

/// Command-line overrides shared by the commands that run training.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub methods: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), CliError> {
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.split.seeds = s.clone();
        }
        if let Some(m) = &self.methods {
            cfg.methods = parse_methods(m)?;
        }
        cfg.validate()
    }
}

fn counts_table(name: &str, set: &EpochSet) -> String {
    let mut s = format!("{name}: {} trials\n  subject  standard  oddball\n", set.n_trials());
    for subj in set.subjects() {
        let (std, odd) = set.class_counts(subj);
        let _ = writeln!(s, "  {subj:>7}  {std:>8}  {odd:>7}");
    }
    s
}

/// Writes the configured synthetic source and target sets.
pub fn cmd_synth(cfg: &ExperimentConfig, out_source: &Path, out_target: &Path) -> Result<String, CliError> {
    let source = synth_generate(&cfg.source_synth)?;
    let target = synth_generate(&cfg.target_synth)?;
    write_epochs(out_source, &source)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", out_source.display())))?;
    write_epochs(out_target, &target)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", out_target.display())))?;
    Ok(format!("{}{}", counts_table("source", &source), counts_table("target", &target)))
}

/// One replicate, for debugging. Writes its epoch history (and optionally
/// the trained model) into the output directory.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    method: &str,
    fold: usize,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<String, CliError> {
    let method = Method::parse(method).map_err(|e| CliError::Usage(e.to_string()))?;
    let data = load_datasets(cfg)?;
    let sd = prepare_seed(&data, &cfg.split, seed)?;
    let outcome = experiment::run_replicate(cfg, &sd, fold, method)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let history = cfg
        .out_dir
        .join(format!("{}_fold{fold}_seed{seed}.csv", method.name()));
    write_history(&history, &outcome.record)?;
    if let Some(path) = checkpoint {
        save_checkpoint(path, &outcome.model)?;
    }
    Ok(format!(
        "{} fold {fold} seed {seed}: accuracy {} auc {} best epoch {} of {}\nhistory: {}\n",
        method.name(),
        experiment::sig6(outcome.score.accuracy),
        experiment::sig6(outcome.score.auc),
        outcome.record.best_epoch,
        outcome.record.history.len(),
        history.display()
    ))
}

pub struct ExperimentOutput {
    pub config_hash: String,
    pub results_path: PathBuf,
    pub failures: usize,
}

/// The full (method × fold × seed) matrix. Writes `results.csv`,
/// `design.txt`, `provenance.txt` and per-replicate histories under `logs/`.
pub fn cmd_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<ExperimentOutput, CliError> {
    let hash = cfg.hash()?;
    log::info!("config hash {hash}");
    let data = load_datasets(cfg)?;
    let design = paired_design(cfg, &data)?;
    std::fs::create_dir_all(cfg.out_dir.join("logs"))?;
    let rows = run_matrix(cfg, &data, workers)?;
    let results_path = cfg.out_dir.join("results.csv");
    write_results(&results_path, &rows)?;
    let mut failures = 0;
    for (method, fold, seed, outcome) in &rows {
        match outcome {
            Ok((_, record)) => {
                let p = cfg.out_dir.join("logs").join(format!("{method}_fold{fold}_seed{seed}.csv"));
                write_history(&p, record)?;
            }
            Err(e) => {
                failures += 1;
                log::error!("{method} fold {fold} seed {seed}: {e}");
            }
        }
    }
    std::fs::write(cfg.out_dir.join("design.txt"), design_text(&design))?;
    let seeds: Vec<String> = cfg.split.seeds.iter().map(u64::to_string).collect();
    let provenance = format!(
        "config_hash = {hash}\nseeds = {}\nversion = {}\n\n{}",
        seeds.join(","),
        env!("CARGO_PKG_VERSION"),
        cfg.canonical()
    );
    std::fs::write(cfg.out_dir.join("provenance.txt"), provenance)?;
    Ok(ExperimentOutput {
        config_hash: hash,
        results_path,
        failures,
    })
}

pub fn cmd_report(results: &Path, design: &Path) -> Result<String, CliError> {
    let rows = report::read_results(results)?;
    let design_text = std::fs::read_to_string(design)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", design.display())))?;
    let design = parse_design(&design_text)?;
    let rep = report::build_report(&rows, &design)?;
    // the provenance file sits next to results.csv when produced by `experiment`
    let hash = results
        .parent()
        .map(|d| d.join("provenance.txt"))
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|t| {
            t.lines()
                .find_map(|l| l.strip_prefix("config_hash = ").map(str::to_string))
        });
    Ok(report::render(&rep, &design, hash.as_deref()))
}
