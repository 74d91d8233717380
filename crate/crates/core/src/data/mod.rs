//! Epoched trials, their file format, the synthetic generator and the
//! sampling / cross-validation protocol.

mod format;
mod split;
mod synth;
mod transform;

pub use format::{decode, encode, read_epochs, write_epochs, MAGIC, VERSION};
pub use split::{cv_splits, stratified_budget_sample, SampleRole, Split, SplitSpec};
pub use synth::{synth_generate, DomainShift, SynthConfig};
pub use transform::{augment, zscore_apply, zscore_fit, AugmentConfig, ZScoreStats};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::Domain;

pub const DEFAULT_CHANNELS: [&str; 5] = ["Fz", "Pz", "P3", "P4", "Oz"];
pub const DEFAULT_SAMPLE_RATE_HZ: f32 = 128.0;

pub const STANDARD: u8 = 0;
pub const ODDBALL: u8 = 1;

/// Labeled trials `[n_trials, n_channels, n_samples]`, trial-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    data: Vec<f64>,
    n_trials: usize,
    n_channels: usize,
    n_samples: usize,
    labels: Vec<u8>,
    subject_ids: Vec<u16>,
    channel_names: Vec<String>,
    sample_rate_hz: f32,
    domain: Option<Domain>,
}

impl EpochSet {
    pub fn new(
        data: Vec<f64>,
        n_channels: usize,
        n_samples: usize,
        labels: Vec<u8>,
        subject_ids: Vec<u16>,
        channel_names: Vec<String>,
        sample_rate_hz: f32,
    ) -> Result<Self> {
        let n_trials = labels.len();
        if subject_ids.len() != n_trials {
            return Err(Error::invalid(
                "EpochSet",
                format!("{} labels but {} subject ids", n_trials, subject_ids.len()),
            ));
        }
        if channel_names.len() != n_channels {
            return Err(Error::invalid(
                "EpochSet",
                format!("{} channel names for {} channels", channel_names.len(), n_channels),
            ));
        }
        if data.len() != n_trials * n_channels * n_samples {
            return Err(Error::shape("EpochSet", &[data.len()], &[n_trials, n_channels, n_samples]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > ODDBALL) {
            return Err(Error::InvalidLabel {
                label: bad as usize,
                classes: 2,
            });
        }
        Ok(Self {
            data,
            n_trials,
            n_channels,
            n_samples,
            labels,
            subject_ids,
            channel_names,
            sample_rate_hz,
            domain: None,
        })
    }

    pub fn with_domain(mut self, d: Option<Domain>) -> Self {
        self.domain = d;
        self
    }

    pub fn domain(&self) -> Option<Domain> {
        self.domain
    }

    pub fn n_trials(&self) -> usize {
        self.n_trials
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn is_empty(&self) -> bool {
        self.n_trials == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn subject_ids(&self) -> &[u16] {
        &self.subject_ids
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn sample_rate_hz(&self) -> f32 {
        self.sample_rate_hz
    }

    fn trial_len(&self) -> usize {
        self.n_channels * self.n_samples
    }

    pub fn trial(&self, i: usize) -> &[f64] {
        &self.data[i * self.trial_len()..][..self.trial_len()]
    }

    /// Trials at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.trial_len());
        for &i in indices {
            data.extend_from_slice(self.trial(i));
        }
        Self {
            data,
            n_trials: indices.len(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            subject_ids: indices.iter().map(|&i| self.subject_ids[i]).collect(),
            ..self.empty_like()
        }
    }

    fn empty_like(&self) -> Self {
        Self {
            data: Vec::new(),
            n_trials: 0,
            n_channels: self.n_channels,
            n_samples: self.n_samples,
            labels: Vec::new(),
            subject_ids: Vec::new(),
            channel_names: self.channel_names.clone(),
            sample_rate_hz: self.sample_rate_hz,
            domain: self.domain,
        }
    }

    /// Appends the trials of `other`. The domain tag is cleared if they differ.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if other.n_channels != self.n_channels || other.n_samples != self.n_samples {
            return Err(Error::shape(
                "EpochSet::concat",
                &[self.n_channels, self.n_samples],
                &[other.n_channels, other.n_samples],
            ));
        }
        let mut out = self.clone();
        out.data.extend_from_slice(&other.data);
        out.labels.extend_from_slice(&other.labels);
        out.subject_ids.extend_from_slice(&other.subject_ids);
        out.n_trials += other.n_trials;
        if self.domain != other.domain {
            out.domain = None;
        }
        Ok(out)
    }

    /// Trials at `indices` as a `[len, n_channels, n_samples]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.trial_len());
        for &i in indices {
            data.extend_from_slice(self.trial(i));
        }
        Tensor::new(vec![indices.len(), self.n_channels, self.n_samples], data).expect("batch shape")
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<u16> {
        let mut s = self.subject_ids.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// `(standard, oddball)` trial counts for one subject.
    pub fn class_counts(&self, subject: u16) -> (usize, usize) {
        let mut counts = (0, 0);
        for (l, s) in self.labels.iter().zip(&self.subject_ids) {
            if *s == subject {
                if *l == ODDBALL {
                    counts.1 += 1;
                } else {
                    counts.0 += 1;
                }
            }
        }
        counts
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Labels for integer event codes whose tens digit names the attended
/// category and whose units digit names the presented stimulus (both 1..=5).
/// Matching digits (11, 22, 33, 44, 55) are oddballs; all others are standards.
pub fn labels_from_event_codes(codes: &[i32]) -> Result<Vec<u8>> {
    codes
        .iter()
        .map(|&c| {
            let (tens, units) = (c / 10, c % 10);
            if !(11..=55).contains(&c) || !(1..=5).contains(&tens) || !(1..=5).contains(&units) {
                return Err(Error::invalid("labels_from_event_codes", format!("unexpected event code {c}")));
            }
            Ok(if tens == units { ODDBALL } else { STANDARD })
        })
        .collect()
}
