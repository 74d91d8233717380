//! Replicate execution: sampling, splitting, standardization, training and
//! evaluation of one (method, fold, seed), and the full matrix over a
//! worker pool.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use asmmd_core::data::{
    cv_splits, read_epochs, stratified_budget_sample, synth_generate, zscore_apply, zscore_fit, EpochSet,
    SampleRole, Split, SplitSpec,
};
use asmmd_core::stats::{PairedDesign, ReplicateScore};
use asmmd_core::trainer::{evaluate, train_method, Method, RunRecord};
use asmmd_core::backbone::Model;
use asmmd_core::Domain;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::CliError;

pub struct Datasets {
    pub source: EpochSet,
    pub target: EpochSet,
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets, CliError> {
    let load = |path: &Option<std::path::PathBuf>, synth| -> Result<EpochSet, CliError> {
        match path {
            Some(p) => {
                if !p.exists() {
                    return Err(CliError::Usage(format!("data file {} does not exist", p.display())));
                }
                Ok(read_epochs(p)?)
            }
            None => Ok(synth_generate(synth)?),
        }
    };
    Ok(Datasets {
        source: load(&cfg.source_path, &cfg.source_synth)?.with_domain(Some(Domain::Source)),
        target: load(&cfg.target_path, &cfg.target_synth)?.with_domain(Some(Domain::Target)),
    })
}

/// Budget-sampled, split and standardized data for one seed.
pub struct SeedData {
    pub seed: u64,
    pub source: EpochSet,
    pub target: EpochSet,
    pub splits: Vec<Split>,
}

pub fn prepare_seed(data: &Datasets, split: &SplitSpec, seed: u64) -> Result<SeedData, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = stratified_budget_sample(&data.source, SampleRole::Source, &mut rng)?;
    let target = stratified_budget_sample(&data.target, SampleRole::Target, &mut rng)?;
    let spec = SplitSpec {
        seeds: vec![seed],
        ..split.clone()
    };
    let splits = cv_splits(target.labels(), &spec)?;
    Ok(SeedData {
        seed,
        source,
        target,
        splits,
    })
}

/// Per-fold seeds shared by every method so replicates are matched.
fn replicate_seeds(seed: u64, fold: usize) -> (u64, u64) {
    let base = seed.wrapping_mul(1_000_003).wrapping_add(fold as u64);
    (base, base ^ 0x5eed_0f_7a41)
}

pub struct ReplicateOutcome {
    pub score: ReplicateScore,
    /// Trained model at its best validation epoch.
    pub model: Model,
    pub record: RunRecord,
}

pub fn run_replicate(
    cfg: &ExperimentConfig,
    seed_data: &SeedData,
    fold: usize,
    method: Method,
) -> Result<ReplicateOutcome, CliError> {
    let split = seed_data
        .splits
        .iter()
        .find(|s| s.fold == fold)
        .ok_or_else(|| CliError::Usage(format!("fold {fold} outside 0..{}", cfg.split.k_folds)))?;
    // each domain standardized with statistics of its own training trials
    let source_stats = zscore_fit(&seed_data.source)?;
    let source = zscore_apply(&seed_data.source, &source_stats)?;
    let target_train_raw = seed_data.target.subset(&split.train);
    let target_stats = zscore_fit(&target_train_raw)?;
    let target_train = zscore_apply(&target_train_raw, &target_stats)?;
    let target_val = zscore_apply(&seed_data.target.subset(&split.val), &target_stats)?;
    let target_test = zscore_apply(&seed_data.target.subset(&split.test), &target_stats)?;

    let data = asmmd_core::trainer::TrainData {
        source: &source,
        target: &target_train,
        target_val: &target_val,
    };
    let (model_seed, train_seed) = replicate_seeds(seed_data.seed, fold);
    let (mut model, record) = train_method(method, &cfg.plan, &cfg.backbone, &data, model_seed, train_seed)?;
    let eval = evaluate(&mut model, &target_test, Domain::Target)?;
    Ok(ReplicateOutcome {
        score: ReplicateScore {
            method: method.name(),
            fold,
            seed: seed_data.seed,
            accuracy: eval.accuracy,
            auc: eval.auc()?,
        },
        record,
        model,
    })
}

/// Replicate key with its outcome; `Err` holds the failure message.
pub type RowResult = (String, usize, u64, Result<(ReplicateScore, RunRecord), String>);

/// Runs every (method, fold, seed) replicate on `workers` threads. Rows come
/// back sorted by (method, fold, seed), independent of the worker count.
pub fn run_matrix(cfg: &ExperimentConfig, data: &Datasets, workers: usize) -> Result<Vec<RowResult>, CliError> {
    let seeds: Vec<SeedData> = cfg
        .split
        .seeds
        .iter()
        .map(|&s| prepare_seed(data, &cfg.split, s))
        .collect::<Result<_, _>>()?;
    let mut jobs = VecDeque::new();
    for (si, _) in seeds.iter().enumerate() {
        for fold in 0..cfg.split.k_folds {
            for &m in &cfg.methods {
                jobs.push_back((si, fold, m));
            }
        }
    }
    let total = jobs.len();
    let queue = Mutex::new(jobs);
    let results = Mutex::new(Vec::with_capacity(total));
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1) {
            scope.spawn(|| loop {
                let Some((si, fold, method)) = queue.lock().expect("queue lock").pop_front() else {
                    break;
                };
                let sd = &seeds[si];
                let started = std::time::Instant::now();
                let outcome = run_replicate(cfg, sd, fold, method)
                    .map(|o| (o.score, o.record))
                    .map_err(|e| e.to_string());
                match &outcome {
                    Ok((s, r)) => log::info!(
                        "{} fold {} seed {}: acc {:.4} auc {:.4} (best epoch {}, {:.1}s)",
                        s.method,
                        fold,
                        sd.seed,
                        s.accuracy,
                        s.auc,
                        r.best_epoch,
                        started.elapsed().as_secs_f64()
                    ),
                    Err(e) => log::error!("{} fold {} seed {} failed: {e}", method.name(), fold, sd.seed),
                }
                results
                    .lock()
                    .expect("results lock")
                    .push((method.name(), fold, sd.seed, outcome));
            });
        }
    });
    let mut rows = results.into_inner().expect("results lock");
    rows.sort_by(|a, b| (&a.0, a.1, a.2).cmp(&(&b.0, b.1, b.2)));
    Ok(rows)
}

/// `v` with 6 significant digits, plain decimal notation.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return "nan".into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    // rounding can carry into a new digit (0.9999996 -> 1.000000)
    let reparsed: f64 = s.parse().expect("formatted float");
    if reparsed.abs().log10().floor() as i32 != magnitude && decimals > 0 {
        let decimals = decimals - 1;
        return format!("{v:.decimals$}");
    }
    s
}

pub const RESULTS_HEADER: [&str; 5] = ["method", "fold", "seed", "accuracy", "auc"];

pub fn write_results(path: &Path, rows: &[RowResult]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for (method, fold, seed, outcome) in rows {
        let (acc, auc) = match outcome {
            Ok((s, _)) => (sig6(s.accuracy), sig6(s.auc)),
            Err(_) => ("nan".into(), "nan".into()),
        };
        w.write_record([method.clone(), fold.to_string(), seed.to_string(), acc, auc])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_history(path: &Path, record: &RunRecord) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "loss",
        "ce_source",
        "ce_target",
        "alignment",
        "w_target",
        "lambda_mmd",
        "lr",
        "val_accuracy",
    ])?;
    for h in &record.history {
        w.write_record([
            h.epoch.to_string(),
            sig6(h.loss),
            sig6(h.ce_source),
            sig6(h.ce_target),
            sig6(h.alignment),
            sig6(h.w_target),
            sig6(h.lambda_mmd),
            sig6(h.lr),
            sig6(h.val_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-fold target sizes for the corrected t-test; validation trials count
/// as training trials.
pub fn paired_design(cfg: &ExperimentConfig, data: &Datasets) -> Result<PairedDesign, CliError> {
    let seed = cfg.split.seeds[0];
    let sd = prepare_seed(data, &cfg.split, seed)?;
    let first = &sd.splits[0];
    Ok(PairedDesign {
        k_folds: cfg.split.k_folds,
        r_seeds: cfg.split.seeds.len(),
        n_train: first.train.len() + first.val.len(),
        n_test: first.test.len(),
    })
}

pub fn design_text(d: &PairedDesign) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "k_folds = {}", d.k_folds);
    let _ = writeln!(s, "r_seeds = {}", d.r_seeds);
    let _ = writeln!(s, "n_train = {}", d.n_train);
    let _ = writeln!(s, "n_test = {}", d.n_test);
    s
}

pub fn parse_design(text: &str) -> Result<PairedDesign, CliError> {
    let mut vals = [None; 4];
    for line in text.lines().map(|l| l.split('#').next().unwrap_or("").trim()) {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("design: bad line '{line}'")))?;
        let slot = match k.trim() {
            "k_folds" => 0,
            "r_seeds" => 1,
            "n_train" => 2,
            "n_test" => 3,
            other => return Err(CliError::Usage(format!("design: unknown key '{other}'"))),
        };
        vals[slot] = Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("design: cannot parse '{v}'")))?,
        );
    }
    let get = |i: usize, name: &str| vals[i].ok_or_else(|| CliError::Usage(format!("design: missing {name}")));
    Ok(PairedDesign {
        k_folds: get(0, "k_folds")?,
        r_seeds: get(1, "r_seeds")?,
        n_train: get(2, "n_train")?,
        n_test: get(3, "n_test")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.75), "0.750000");
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(0.0123456789), "0.0123457");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(0.99999996), "1.00000");
        assert_eq!(sig6(-0.5), "-0.500000");
    }

    #[test]
    fn design_round_trip() {
        let d = PairedDesign {
            k_folds: 5,
            r_seeds: 5,
            n_train: 320,
            n_test: 80,
        };
        assert_eq!(parse_design(&design_text(&d)).unwrap(), d);
        assert!(parse_design("k_folds = 5").is_err());
    }
}
