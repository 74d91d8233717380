//! Per-subject budget sampling and stratified repeated k-fold splits.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EpochSet, ODDBALL, STANDARD};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleRole {
    /// 40 oddball + 40 standard trials per subject.
    Source,
    /// 5 oddball + 5 standard trials per subject.
    Target,
}

impl SampleRole {
    pub fn per_class_budget(self) -> usize {
        match self {
            SampleRole::Source => 40,
            SampleRole::Target => 5,
        }
    }
}

/// Draws the role's fixed per-subject class budget uniformly without
/// replacement. Output trials keep their original relative order.
pub fn stratified_budget_sample<R: Rng + ?Sized>(set: &EpochSet, role: SampleRole, rng: &mut R) -> Result<EpochSet> {
    let need = role.per_class_budget();
    let mut keep = Vec::new();
    for subject in set.subjects() {
        let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (i, (&l, &s)) in set.labels().iter().zip(set.subject_ids()).enumerate() {
            if s == subject {
                by_class[l as usize].push(i);
            }
        }
        if by_class[ODDBALL as usize].len() < need || by_class[STANDARD as usize].len() < need {
            return Err(Error::InsufficientTrials {
                subject,
                need_odd: need,
                need_std: need,
                have_odd: by_class[ODDBALL as usize].len(),
                have_std: by_class[STANDARD as usize].len(),
            });
        }
        for class in [ODDBALL, STANDARD] {
            let pool = &by_class[class as usize];
            keep.extend(index::sample(rng, pool.len(), need).into_iter().map(|j| pool[j]));
        }
    }
    keep.sort_unstable();
    Ok(set.subset(&keep))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub k_folds: usize,
    pub seeds: Vec<u64>,
    /// Share of each fold's non-test trials held out for validation.
    pub val_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            k_folds: 5,
            seeds: vec![42, 123, 456, 789, 321],
            val_fraction: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(Error::Config(format!("k_folds = {} must be >= 2", self.k_folds)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

/// Sorted trial indices of one (fold, seed) replicate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub fold: usize,
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// For each seed, a label-stratified k-fold partition of the pooled trials;
/// each fold's remaining trials are split stratified into train / val.
/// Returned seed-major, fold-minor.
pub fn cv_splits(labels: &[u8], spec: &SplitSpec) -> Result<Vec<Split>> {
    spec.validate()?;
    let k = spec.k_folds;
    let mut classes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        match classes.get_mut(l as usize) {
            Some(c) => c.push(i),
            None => return Err(Error::InvalidLabel { label: l as usize, classes: 2 }),
        }
    }
    for (class, members) in classes.iter().enumerate() {
        if members.len() < k {
            return Err(Error::TooFewForFolds {
                class: class as u8,
                count: members.len(),
                folds: k,
            });
        }
    }

    let mut out = Vec::with_capacity(k * spec.seeds.len());
    for &seed in &spec.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // folds[f][class]: members of `class` assigned to fold f
        let mut folds: Vec<[Vec<usize>; 2]> = vec![[Vec::new(), Vec::new()]; k];
        for (class, members) in classes.iter().enumerate() {
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            for (j, idx) in shuffled.into_iter().enumerate() {
                folds[j % k][class].push(idx);
            }
        }
        for fold in 0..k {
            let mut test = Vec::new();
            let mut train = Vec::new();
            let mut val = Vec::new();
            for class in 0..2 {
                test.extend_from_slice(&folds[fold][class]);
                let mut rest: Vec<usize> = (0..k)
                    .filter(|&f| f != fold)
                    .flat_map(|f| folds[f][class].iter().copied())
                    .collect();
                rest.sort_unstable();
                rest.shuffle(&mut rng);
                let n_val = (rest.len() as f64 * spec.val_fraction).round() as usize;
                val.extend_from_slice(&rest[..n_val]);
                train.extend_from_slice(&rest[n_val..]);
            }
            test.sort_unstable();
            train.sort_unstable();
            val.sort_unstable();
            out.push(Split {
                fold,
                seed,
                train,
                val,
                test,
            });
        }
    }
    Ok(out)
}
