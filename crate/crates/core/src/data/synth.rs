//! Synthetic ERP-like trials: a Gaussian-windowed positive deflection on
//! oddball trials over AR(1) background noise, with per-subject variability
//! and an optional domain shift.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{EpochSet, DEFAULT_CHANNELS, DEFAULT_SAMPLE_RATE_HZ, ODDBALL, STANDARD};
use crate::error::{Error, Result};

/// Distortions applied to a whole generated set.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    /// Per-channel multiplier on the recorded signal.
    pub channel_gain: Vec<f64>,
    /// Per-channel additive offset.
    pub channel_offset: Vec<f64>,
    /// Added to every trial's deflection latency.
    pub latency_shift_ms: f64,
    /// Multiplier on the background noise amplitude.
    pub noise_scale: f64,
}

impl DomainShift {
    pub fn identity(n_channels: usize) -> Self {
        Self {
            channel_gain: vec![1.0; n_channels],
            channel_offset: vec![0.0; n_channels],
            latency_shift_ms: 0.0,
            noise_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_subjects: usize,
    /// First subject id; lets two generated sets use disjoint ids.
    pub first_subject_id: u16,
    pub trials_per_subject: usize,
    /// Exact per-subject oddball share (rounded to whole trials).
    pub oddball_fraction: f64,
    pub channel_names: Vec<String>,
    pub n_samples: usize,
    pub sample_rate_hz: f32,
    /// Time of the first sample relative to stimulus onset.
    pub epoch_start_ms: f64,
    /// Peak deflection per channel.
    pub p300_amplitude: Vec<f64>,
    pub p300_latency_ms: f64,
    /// Standard deviation of the Gaussian window.
    pub width_ms: f64,
    pub noise_std: f64,
    /// AR(1) coefficient of the background noise (0 = white).
    pub noise_ar: f64,
    pub subject_latency_jitter_ms: f64,
    /// Relative standard deviation of the per-subject amplitude scale.
    pub subject_amplitude_jitter: f64,
    pub trial_latency_jitter_ms: f64,
    pub shift: DomainShift,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 40,
            first_subject_id: 0,
            trials_per_subject: 200,
            oddball_fraction: 0.25,
            channel_names: DEFAULT_CHANNELS.iter().map(|s| s.to_string()).collect(),
            n_samples: 141,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            epoch_start_ms: -100.0,
            p300_amplitude: vec![1.5, 4.0, 3.0, 3.0, 1.5],
            p300_latency_ms: 350.0,
            width_ms: 60.0,
            noise_std: 4.0,
            noise_ar: 0.8,
            subject_latency_jitter_ms: 20.0,
            subject_amplitude_jitter: 0.2,
            trial_latency_jitter_ms: 30.0,
            shift: DomainShift::identity(DEFAULT_CHANNELS.len()),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    /// Onset-relative time of sample `s` in milliseconds.
    pub fn time_ms(&self, s: usize) -> f64 {
        self.epoch_start_ms + s as f64 * 1000.0 / self.sample_rate_hz as f64
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_channels();
        let bad = |m: String| Err(Error::Config(m));
        if c == 0 || self.n_samples == 0 || self.sample_rate_hz <= 0.0 {
            return bad("synth: need channels, samples and a positive sample rate".into());
        }
        for (what, len) in [
            ("p300_amplitude", self.p300_amplitude.len()),
            ("channel_gain", self.shift.channel_gain.len()),
            ("channel_offset", self.shift.channel_offset.len()),
        ] {
            if len != c {
                return bad(format!("synth: {what} has {len} entries for {c} channels"));
            }
        }
        let finite = self
            .p300_amplitude
            .iter()
            .chain(&self.shift.channel_gain)
            .chain(&self.shift.channel_offset)
            .all(|v| v.is_finite());
        if !finite {
            return bad("synth: amplitudes, gains and offsets must be finite".into());
        }
        let (lo, hi) = (self.time_ms(0), self.time_ms(self.n_samples - 1));
        let lat = self.p300_latency_ms + self.shift.latency_shift_ms;
        if !(lo..=hi).contains(&lat) {
            return bad(format!("synth: latency {lat} ms outside epoch window [{lo}, {hi}] ms"));
        }
        if !(self.width_ms > 0.0) || !(self.noise_std >= 0.0) || !(self.shift.noise_scale >= 0.0) {
            return bad("synth: width must be positive, noise std and scale non-negative".into());
        }
        if !(0.0..1.0).contains(&self.noise_ar.abs()) {
            return bad("synth: |noise_ar| must be < 1".into());
        }
        if !(0.0..=1.0).contains(&self.oddball_fraction) {
            return bad("synth: oddball_fraction outside [0, 1]".into());
        }
        if self.first_subject_id as usize + self.n_subjects > u16::MAX as usize + 1 {
            return bad("synth: subject ids exceed u16".into());
        }
        Ok(())
    }

    pub fn oddballs_per_subject(&self) -> usize {
        (self.trials_per_subject as f64 * self.oddball_fraction).round() as usize
    }

    /// Noise-free deflection on channel `ch` at sample `s` for a trial whose
    /// peak sits at `latency_ms` with amplitude scale `scale`.
    pub fn deflection(&self, ch: usize, s: usize, latency_ms: f64, scale: f64) -> f64 {
        let dt = self.time_ms(s) - latency_ms;
        scale * self.p300_amplitude[ch] * (-0.5 * (dt / self.width_ms).powi(2)).exp()
    }
}

/// Deterministic in `cfg.seed`. Samples are rounded to `f32` precision so the
/// set survives a trip through the epoch file unchanged.
pub fn synth_generate(cfg: &SynthConfig) -> Result<EpochSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, t) = (cfg.n_channels(), cfg.n_samples);
    let total = cfg.n_subjects * cfg.trials_per_subject;
    let mut data = Vec::with_capacity(total * c * t);
    let mut labels = Vec::with_capacity(total);
    let mut ids = Vec::with_capacity(total);
    let n_odd = cfg.oddballs_per_subject();
    let noise_std = cfg.noise_std * cfg.shift.noise_scale;
    let innovation = (1.0 - cfg.noise_ar * cfg.noise_ar).sqrt();

    let mut noise = vec![0.0; t];
    for subj in 0..cfg.n_subjects {
        let id = cfg.first_subject_id + subj as u16;
        let subj_lat: f64 = cfg.subject_latency_jitter_ms * rng.sample::<f64, _>(StandardNormal);
        let subj_scale: f64 = (1.0 + cfg.subject_amplitude_jitter * rng.sample::<f64, _>(StandardNormal)).max(0.0);
        let mut order: Vec<u8> = (0..cfg.trials_per_subject)
            .map(|i| if i < n_odd { ODDBALL } else { STANDARD })
            .collect();
        order.shuffle(&mut rng);
        for &label in &order {
            let trial_lat: f64 = cfg.trial_latency_jitter_ms * rng.sample::<f64, _>(StandardNormal);
            let latency = cfg.p300_latency_ms + cfg.shift.latency_shift_ms + subj_lat + trial_lat;
            for ch in 0..c {
                let mut prev: f64 = rng.sample(StandardNormal);
                for v in noise.iter_mut() {
                    *v = prev;
                    let e: f64 = rng.sample(StandardNormal);
                    prev = cfg.noise_ar * prev + innovation * e;
                }
                for (s, n) in noise.iter().enumerate() {
                    let signal = if label == ODDBALL {
                        cfg.deflection(ch, s, latency, subj_scale)
                    } else {
                        0.0
                    };
                    let x = cfg.shift.channel_gain[ch] * (signal + noise_std * n) + cfg.shift.channel_offset[ch];
                    data.push(x as f32 as f64);
                }
            }
            labels.push(label);
            ids.push(id);
        }
    }
    EpochSet::new(data, c, t, labels, ids, cfg.channel_names.clone(), cfg.sample_rate_hz)
}
