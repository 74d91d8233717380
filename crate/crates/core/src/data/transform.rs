//! Per-channel standardization and training-time augmentation.

use rand::Rng;
use rand_distr::StandardNormal;

use super::EpochSet;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ZScoreStats {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
}

/// Per-channel mean and standard deviation over all trials and samples.
pub fn zscore_fit(train: &EpochSet) -> Result<ZScoreStats> {
    if train.is_empty() || train.n_samples() == 0 {
        return Err(Error::Empty("zscore_fit training set"));
    }
    let (c, t) = (train.n_channels(), train.n_samples());
    let count = (train.n_trials() * t) as f64;
    let mut mean = vec![0.0; c];
    for trial in 0..train.n_trials() {
        for (ch, row) in train.trial(trial).chunks_exact(t).enumerate() {
            mean[ch] += row.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for trial in 0..train.n_trials() {
        for (ch, row) in train.trial(trial).chunks_exact(t).enumerate() {
            var[ch] += row.iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
    if let Some(ch) = std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::ZeroStd(ch));
    }
    Ok(ZScoreStats { mean, std })
}

pub fn zscore_apply(set: &EpochSet, stats: &ZScoreStats) -> Result<EpochSet> {
    if stats.mean.len() != set.n_channels() || stats.std.len() != set.n_channels() {
        return Err(Error::shape("zscore_apply", &[stats.mean.len()], &[set.n_channels()]));
    }
    let t = set.n_samples();
    let mut out = set.clone();
    if t == 0 {
        return Ok(out);
    }
    for (i, row) in out.data_mut().chunks_exact_mut(t).enumerate() {
        let ch = i % stats.mean.len();
        row.iter_mut().for_each(|x| *x = (*x - stats.mean[ch]) / stats.std[ch]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Largest absolute integer shift in samples.
    pub jitter_max: usize,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter_max: 5,
            noise_std: 0.005,
        }
    }
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig {
        jitter_max: 0,
        noise_std: 0.0,
    };
}

/// Shifts each trial of a `[B, C, T]` batch by a uniform integer offset in
/// `[-jitter_max, jitter_max]` (positive = later, vacated samples set to 0),
/// then adds i.i.d. Gaussian noise.
pub fn augment<R: Rng + ?Sized>(batch: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    let shape = batch.shape();
    if shape.len() != 3 {
        return Err(Error::shape("augment", shape, &[0, 0, 0]));
    }
    let (b, c, t) = (shape[0], shape[1], shape[2]);
    let mut out = batch.clone();
    if cfg.jitter_max > 0 {
        let j = cfg.jitter_max as i64;
        for trial in 0..b {
            let offset = rng.random_range(-j..=j);
            shift_trial(&mut out.data_mut()[trial * c * t..][..c * t], t, offset);
        }
    }
    if cfg.noise_std > 0.0 {
        for x in out.data_mut() {
            *x += cfg.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}

fn shift_trial(trial: &mut [f64], t: usize, offset: i64) {
    if offset == 0 {
        return;
    }
    let k = (offset.unsigned_abs() as usize).min(t);
    for row in trial.chunks_exact_mut(t) {
        if offset > 0 {
            row.copy_within(0..t - k, k);
            row[..k].fill(0.0);
        } else {
            row.copy_within(k..t, 0);
            row[t - k..].fill(0.0);
        }
    }
}
