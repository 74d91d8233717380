//! Summary of a results table: per-method means with 95% Student-t
//! intervals and corrected paired t-tests for every method pair.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use asmmd_core::stats::{corrected_paired_ttest, t_ci, Degenerate, Interval, PairedDesign, PairedTest, ReplicateScore};

use crate::experiment::{sig6, RESULTS_HEADER};
use crate::CliError;

pub fn read_results(path: &Path) -> Result<Vec<ReplicateScore>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(CliError::Usage(format!(
            "{}: header {:?}, expected {:?}",
            path.display(),
            header,
            RESULTS_HEADER
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let bad = |what: &str| CliError::Usage(format!("row {}: cannot parse {what}", i + 2));
        out.push(ReplicateScore {
            method: field(0).to_string(),
            fold: field(1).parse().map_err(|_| bad("fold"))?,
            seed: field(2).parse().map_err(|_| bad("seed"))?,
            accuracy: field(3).parse().map_err(|_| bad("accuracy"))?,
            auc: field(4).parse().map_err(|_| bad("auc"))?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MethodSummary {
    pub method: String,
    pub accuracy: Interval,
    pub auc: Interval,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub accuracy: PairedTest,
    pub auc: PairedTest,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub methods: Vec<MethodSummary>,
    pub comparisons: Vec<Comparison>,
}

/// Replicates whose scores are missing or non-finite count as absent; every
/// method must cover the same (fold, seed) pairs.
pub fn build_report(rows: &[ReplicateScore], design: &PairedDesign) -> Result<Report, CliError> {
    let mut by_method: BTreeMap<&str, BTreeMap<(usize, u64), &ReplicateScore>> = BTreeMap::new();
    for r in rows {
        let entry = by_method.entry(r.method.as_str()).or_default();
        if r.accuracy.is_finite() && r.auc.is_finite() && entry.insert((r.fold, r.seed), r).is_some() {
            return Err(CliError::Usage(format!(
                "duplicate replicate {} fold {} seed {}",
                r.method, r.fold, r.seed
            )));
        }
    }
    if by_method.is_empty() {
        return Err(CliError::Usage("results table is empty".into()));
    }
    let all: BTreeSet<(usize, u64)> = rows.iter().map(|r| (r.fold, r.seed)).collect();
    let mut missing = Vec::new();
    for (m, reps) in &by_method {
        for key in &all {
            if !reps.contains_key(key) {
                missing.push(format!("{m}: fold {} seed {}", key.0, key.1));
            }
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Usage(format!("unmatched replicates: {}", missing.join("; "))));
    }
    let metric = |reps: &BTreeMap<(usize, u64), &ReplicateScore>, f: fn(&ReplicateScore) -> f64| -> Vec<f64> {
        reps.values().map(|r| f(r)).collect()
    };
    let acc = |r: &ReplicateScore| r.accuracy;
    let auc = |r: &ReplicateScore| r.auc;

    let mut methods = Vec::new();
    for (m, reps) in &by_method {
        methods.push(MethodSummary {
            method: m.to_string(),
            accuracy: t_ci(&metric(reps, acc), 0.95)?,
            auc: t_ci(&metric(reps, auc), 0.95)?,
        });
    }
    let names: Vec<&str> = by_method.keys().copied().collect();
    let mut comparisons = Vec::new();
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let (a, b) = (&by_method[names[i]], &by_method[names[j]]);
            comparisons.push(Comparison {
                a: names[i].to_string(),
                b: names[j].to_string(),
                accuracy: corrected_paired_ttest(&metric(a, acc), &metric(b, acc), design)?,
                auc: corrected_paired_ttest(&metric(a, auc), &metric(b, auc), design)?,
            });
        }
    }
    Ok(Report { methods, comparisons })
}

fn flag(t: &PairedTest) -> &'static str {
    match t.degenerate {
        None => "",
        Some(Degenerate::Identical) => " (identical)",
        Some(Degenerate::ConstantDifference) => " (zero variance)",
    }
}

pub fn render(report: &Report, design: &PairedDesign, config_hash: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(h) = config_hash {
        let _ = writeln!(s, "config hash: {h}");
    }
    let _ = writeln!(
        s,
        "design: k = {}, r = {}, n_train = {}, n_test = {}, gamma = {}",
        design.k_folds,
        design.r_seeds,
        design.n_train,
        design.n_test,
        sig6(design.gamma())
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<32} {:>30} {:>30}", "method", "accuracy [95% CI]", "AUC [95% CI]");
    for m in &report.methods {
        let ci = |i: &Interval| format!("{} [{}, {}]", sig6(i.mean), sig6(i.lo), sig6(i.hi));
        let _ = writeln!(s, "{:<32} {:>30} {:>30}", m.method, ci(&m.accuracy), ci(&m.auc));
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<48} {:>8} {:>26} {:>26}", "comparison", "df", "accuracy t / p", "AUC t / p");
    for c in &report.comparisons {
        let tp = |t: &PairedTest| format!("{} / {}{}", sig6(t.t), sig6(t.p), flag(t));
        let _ = writeln!(
            s,
            "{:<48} {:>8} {:>26} {:>26}",
            format!("{} vs {}", c.a, c.b),
            c.accuracy.nu,
            tp(&c.accuracy),
            tp(&c.auc)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(m: &str, fold: usize, seed: u64, acc: f64) -> ReplicateScore {
        ReplicateScore {
            method: m.into(),
            fold,
            seed,
            accuracy: acc,
            auc: acc,
        }
    }

    fn design() -> PairedDesign {
        PairedDesign {
            k_folds: 2,
            r_seeds: 1,
            n_train: 8,
            n_test: 2,
        }
    }

    #[test]
    fn identical_methods_are_degenerate() {
        let rows = vec![row("a", 0, 1, 0.5), row("a", 1, 1, 0.7), row("b", 0, 1, 0.5), row("b", 1, 1, 0.7)];
        let r = build_report(&rows, &design()).unwrap();
        assert_eq!(r.comparisons.len(), 1);
        assert_eq!(r.comparisons[0].accuracy.p, 1.0);
        assert!(render(&r, &design(), None).contains("(identical)"));
    }

    #[test]
    fn missing_pairs_are_listed() {
        let rows = vec![row("a", 0, 1, 0.5), row("a", 1, 1, 0.7), row("b", 0, 1, 0.5), row("b", 1, 1, f64::NAN)];
        let err = build_report(&rows, &design()).unwrap_err().to_string();
        assert!(err.contains("b: fold 1 seed 1"), "{err}");
    }
}
