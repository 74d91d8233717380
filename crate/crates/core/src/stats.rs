//! AUC, Student-t intervals and the corrected resampled paired t-test.

use crate::error::{Error, Result};

/// Mann–Whitney AUC: `(#(pos > neg) + ½·#(pos = neg)) / (n_pos · n_neg)`,
/// with label 1 as the positive class.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    // walk tied groups in ascending order; every positive beats all negatives
    // strictly below its group and ties with the negatives inside it
    let mut wins2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let pos = idx[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        let neg = (j - i) as u128 - pos;
        wins2 += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(wins2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = C[0];
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Student-t CDF with `nu` degrees of freedom.
pub fn t_cdf(x: f64, nu: f64) -> f64 {
    if x.is_nan() || !(nu > 0.0) {
        return f64::NAN;
    }
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    let tail = 0.5 * inc_beta(nu / 2.0, 0.5, nu / (nu + x * x));
    if x >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Inverse of [`t_cdf`] by bisection.
pub fn t_quantile(p: f64, nu: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) || !(nu > 0.0) {
        return Err(Error::invalid("t_quantile", format!("p = {p}, nu = {nu}")));
    }
    let (mut lo, mut hi) = (-1.0, 1.0);
    while t_cdf(lo, nu) > p {
        lo *= 2.0;
    }
    while t_cdf(hi, nu) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, nu) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn mean_and_var(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, var)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Two-sided Student-t interval `mean ± t_{(1+level)/2, K−1} · s/√K`.
pub fn t_ci(values: &[f64], level: f64) -> Result<Interval> {
    if values.len() < 2 {
        return Err(Error::invalid("t_ci", format!("need at least 2 values, got {}", values.len())));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("t_ci", format!("level {level} outside (0, 1)")));
    }
    let k = values.len() as f64;
    let (mean, var) = mean_and_var(values);
    let q = t_quantile(0.5 + level / 2.0, k - 1.0)?;
    let half = q * var.sqrt() / k.sqrt();
    Ok(Interval {
        mean,
        lo: mean - half,
        hi: mean + half,
    })
}

/// Replicate layout of a repeated k-fold comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedDesign {
    pub k_folds: usize,
    pub r_seeds: usize,
    /// Per-fold target training size (validation trials included).
    pub n_train: usize,
    pub n_test: usize,
}

impl PairedDesign {
    pub fn replicates(&self) -> usize {
        self.k_folds * self.r_seeds
    }

    /// `1/(k·r) + n_test/n_train`.
    pub fn gamma(&self) -> f64 {
        1.0 / self.replicates() as f64 + self.n_test as f64 / self.n_train as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 1 || self.r_seeds < 1 || self.n_train < 1 || self.n_test < 1 {
            return Err(Error::invalid("PairedDesign", format!("{self:?} has a zero field")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degenerate {
    /// Zero variance, nonzero mean difference: p reported as 0.
    ConstantDifference,
    /// All differences zero: p reported as 1.
    Identical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTest {
    pub t: f64,
    pub nu: f64,
    pub p: f64,
    pub mean_diff: f64,
    pub var_diff: f64,
    pub degenerate: Option<Degenerate>,
}

const ZERO_TOL: f64 = 1e-12;

/// Variance-corrected paired t-test for scores matched per (fold, seed).
pub fn corrected_paired_ttest(a: &[f64], b: &[f64], design: &PairedDesign) -> Result<PairedTest> {
    design.validate()?;
    if a.len() != b.len() {
        return Err(Error::shape("corrected_paired_ttest", &[a.len()], &[b.len()]));
    }
    if a.len() != design.replicates() {
        return Err(Error::invalid(
            "corrected_paired_ttest",
            format!("{} pairs for a design of {} replicates", a.len(), design.replicates()),
        ));
    }
    if a.len() < 2 {
        return Err(Error::invalid("corrected_paired_ttest", "need at least 2 pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, var) = mean_and_var(&d);
    let nu = (d.len() - 1) as f64;
    // differences of rounded scores leave ~1e-16 noise where the exact
    // variance is zero
    let scale = a.iter().chain(b).fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
    if var.sqrt() <= ZERO_TOL * scale {
        let (t, p, flag) = if mean.abs() <= ZERO_TOL * scale {
            (0.0, 1.0, Degenerate::Identical)
        } else {
            (mean.signum() * f64::INFINITY, 0.0, Degenerate::ConstantDifference)
        };
        return Ok(PairedTest {
            t,
            nu,
            p,
            mean_diff: mean,
            var_diff: 0.0,
            degenerate: Some(flag),
        });
    }
    let t = mean / (design.gamma() * var).sqrt();
    let p = (2.0 * t_cdf(-t.abs(), nu)).min(1.0);
    Ok(PairedTest {
        t,
        nu,
        p,
        mean_diff: mean,
        var_diff: var,
        degenerate: None,
    })
}

/// One replicate's scores on the target test split.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateScore {
    pub method: String,
    pub fold: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub auc: f64,
}
