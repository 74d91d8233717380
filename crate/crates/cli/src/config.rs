//! `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.
//! Lists are comma separated. Keys group by prefix:
//!
//! * `source.*`, `target.*`: synthetic generator settings per domain, used
//!   when `source_path` / `target_path` are not given;
//! * `model.*`: backbone settings;
//! * everything else: training plan, splits, methods and output.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use asmmd_core::backbone::BackboneConfig;
use asmmd_core::data::{DomainShift, SplitSpec, SynthConfig};
use asmmd_core::schedule::TrainPlan;
use asmmd_core::trainer::Method;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source_path: Option<PathBuf>,
    pub target_path: Option<PathBuf>,
    pub source_synth: SynthConfig,
    pub target_synth: SynthConfig,
    pub plan: TrainPlan,
    pub backbone: BackboneConfig,
    pub split: SplitSpec,
    pub methods: Vec<Method>,
    pub out_dir: PathBuf,
}

/// Built-in source domain: no shift.
pub fn default_source_synth() -> SynthConfig {
    SynthConfig {
        seed: 1,
        noise_std: 6.0,
        ..SynthConfig::default()
    }
}

/// Built-in target domain: roughly 2.5x amplifier gain with uneven channels,
/// DC offsets, and whiter, stronger noise.
pub fn default_target_synth() -> SynthConfig {
    SynthConfig {
        seed: 2,
        first_subject_id: 1000,
        noise_std: 6.0,
        noise_ar: 0.3,
        shift: DomainShift {
            channel_gain: vec![3.0, 2.0, 2.6, 2.2, 2.8],
            channel_offset: vec![2.0, -1.0, 0.5, -0.5, 1.0],
            latency_shift_ms: 0.0,
            noise_scale: 1.25,
        },
        ..SynthConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source_path: None,
            target_path: None,
            source_synth: default_source_synth(),
            target_synth: default_target_synth(),
            plan: TrainPlan::default(),
            backbone: BackboneConfig::default(),
            split: SplitSpec::default(),
            methods: vec![
                Method::parse("asmmd").expect("known"),
                Method::Pooled,
                Method::TargetOnly,
            ],
            out_dir: PathBuf::from("results"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn set_synth(cfg: &mut SynthConfig, key: &str, full: &str, v: &str) -> Result<(), CliError> {
    match key {
        "n_subjects" => cfg.n_subjects = parse(full, v)?,
        "first_subject_id" => cfg.first_subject_id = parse(full, v)?,
        "trials_per_subject" => cfg.trials_per_subject = parse(full, v)?,
        "oddball_fraction" => cfg.oddball_fraction = parse(full, v)?,
        "channel_names" => cfg.channel_names = v.split(',').map(|s| s.trim().to_string()).collect(),
        "n_samples" => cfg.n_samples = parse(full, v)?,
        "sample_rate_hz" => cfg.sample_rate_hz = parse(full, v)?,
        "epoch_start_ms" => cfg.epoch_start_ms = parse(full, v)?,
        "p300_amplitude" => cfg.p300_amplitude = parse_list(full, v)?,
        "p300_latency_ms" => cfg.p300_latency_ms = parse(full, v)?,
        "width_ms" => cfg.width_ms = parse(full, v)?,
        "noise_std" => cfg.noise_std = parse(full, v)?,
        "noise_ar" => cfg.noise_ar = parse(full, v)?,
        "subject_latency_jitter_ms" => cfg.subject_latency_jitter_ms = parse(full, v)?,
        "subject_amplitude_jitter" => cfg.subject_amplitude_jitter = parse(full, v)?,
        "trial_latency_jitter_ms" => cfg.trial_latency_jitter_ms = parse(full, v)?,
        "channel_gain" => cfg.shift.channel_gain = parse_list(full, v)?,
        "channel_offset" => cfg.shift.channel_offset = parse_list(full, v)?,
        "latency_shift_ms" => cfg.shift.latency_shift_ms = parse(full, v)?,
        "noise_scale" => cfg.shift.noise_scale = parse(full, v)?,
        "seed" => cfg.seed = parse(full, v)?,
        _ => return Err(CliError::Usage(format!("unknown config key '{full}'"))),
    }
    Ok(())
}

fn dump_synth(out: &mut String, prefix: &str, c: &SynthConfig) {
    let lines = [
        ("n_subjects", c.n_subjects.to_string()),
        ("first_subject_id", c.first_subject_id.to_string()),
        ("trials_per_subject", c.trials_per_subject.to_string()),
        ("oddball_fraction", format!("{:?}", c.oddball_fraction)),
        ("channel_names", c.channel_names.join(",")),
        ("n_samples", c.n_samples.to_string()),
        ("sample_rate_hz", format!("{:?}", c.sample_rate_hz)),
        ("epoch_start_ms", format!("{:?}", c.epoch_start_ms)),
        ("p300_amplitude", join(&c.p300_amplitude)),
        ("p300_latency_ms", format!("{:?}", c.p300_latency_ms)),
        ("width_ms", format!("{:?}", c.width_ms)),
        ("noise_std", format!("{:?}", c.noise_std)),
        ("noise_ar", format!("{:?}", c.noise_ar)),
        ("subject_latency_jitter_ms", format!("{:?}", c.subject_latency_jitter_ms)),
        ("subject_amplitude_jitter", format!("{:?}", c.subject_amplitude_jitter)),
        ("trial_latency_jitter_ms", format!("{:?}", c.trial_latency_jitter_ms)),
        ("channel_gain", join(&c.shift.channel_gain)),
        ("channel_offset", join(&c.shift.channel_offset)),
        ("latency_shift_ms", format!("{:?}", c.shift.latency_shift_ms)),
        ("noise_scale", format!("{:?}", c.shift.noise_scale)),
        ("seed", c.seed.to_string()),
    ];
    for (k, v) in lines {
        let _ = writeln!(out, "{prefix}.{k} = {v}");
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected 'key = value'", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        if let Some(rest) = key.strip_prefix("source.") {
            return set_synth(&mut self.source_synth, rest, key, v);
        }
        if let Some(rest) = key.strip_prefix("target.") {
            return set_synth(&mut self.target_synth, rest, key, v);
        }
        if let Some(rest) = key.strip_prefix("model.") {
            return self
                .backbone
                .set(rest, v)
                .map_err(|e| CliError::Usage(format!("{key}: {e}")));
        }
        let p = &mut self.plan;
        match key {
            "source_path" => self.source_path = Some(PathBuf::from(v)),
            "target_path" => self.target_path = Some(PathBuf::from(v)),
            "out" => self.out_dir = PathBuf::from(v),
            "methods" => self.methods = parse_methods(v)?,
            "k_folds" => self.split.k_folds = parse(key, v)?,
            "seeds" => self.split.seeds = parse_list(key, v)?,
            "val_fraction" => self.split.val_fraction = parse(key, v)?,
            "warmup_epochs" => p.warmup_epochs = parse(key, v)?,
            "max_epochs" => p.max_epochs = parse(key, v)?,
            "lambda0" => p.lambda0 = parse(key, v)?,
            "clip_lo" => p.clip_lo = parse(key, v)?,
            "clip_hi" => p.clip_hi = parse(key, v)?,
            "label_smoothing" => p.label_smoothing = parse(key, v)?,
            "clamp_mmd_at_zero" => p.clamp_mmd_at_zero = parse(key, v)?,
            "batch_size" => p.batch_size = parse(key, v)?,
            "patience" => p.patience = parse(key, v)?,
            "grad_accum" => p.grad_accum = parse(key, v)?,
            "lr" => p.optimizer.lr = parse(key, v)?,
            "lr_min" => p.lr_min = parse(key, v)?,
            "beta1" => p.optimizer.beta1 = parse(key, v)?,
            "beta2" => p.optimizer.beta2 = parse(key, v)?,
            "weight_decay" => p.optimizer.weight_decay = parse(key, v)?,
            "adam_eps" => p.optimizer.eps = parse(key, v)?,
            "jitter_max" => p.augment.jitter_max = parse(key, v)?,
            "noise_std" => p.augment.noise_std = parse(key, v)?,
            _ => return Err(CliError::Usage(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: asmmd_core::Error| CliError::Usage(e.to_string());
        self.backbone.validate().map_err(usage)?;
        self.split.validate().map_err(usage)?;
        self.source_synth.validate().map_err(usage)?;
        self.target_synth.validate().map_err(usage)?;
        let probe = TrainPlan {
            n_source: 1,
            n_target: 1,
            ..self.plan.clone()
        };
        probe.validate().map_err(usage)?;
        if self.methods.is_empty() {
            return Err(CliError::Usage("methods list is empty".into()));
        }
        Ok(())
    }

    /// Every resolved setting, one `key = value` per line, in a fixed order.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(out, "source_path = {}", path(&self.source_path));
        let _ = writeln!(out, "target_path = {}", path(&self.target_path));
        let names: Vec<String> = self.methods.iter().map(Method::name).collect();
        let _ = writeln!(out, "methods = {}", names.join(","));
        let _ = writeln!(out, "k_folds = {}", self.split.k_folds);
        let _ = writeln!(out, "seeds = {}", join(&self.split.seeds));
        let _ = writeln!(out, "val_fraction = {:?}", self.split.val_fraction);
        let p = &self.plan;
        for (k, v) in [
            ("warmup_epochs", p.warmup_epochs.to_string()),
            ("max_epochs", p.max_epochs.to_string()),
            ("lambda0", format!("{:?}", p.lambda0)),
            ("clip_lo", format!("{:?}", p.clip_lo)),
            ("clip_hi", format!("{:?}", p.clip_hi)),
            ("label_smoothing", format!("{:?}", p.label_smoothing)),
            ("clamp_mmd_at_zero", p.clamp_mmd_at_zero.to_string()),
            ("batch_size", p.batch_size.to_string()),
            ("patience", p.patience.to_string()),
            ("grad_accum", p.grad_accum.to_string()),
            ("lr", format!("{:?}", p.optimizer.lr)),
            ("lr_min", format!("{:?}", p.lr_min)),
            ("beta1", format!("{:?}", p.optimizer.beta1)),
            ("beta2", format!("{:?}", p.optimizer.beta2)),
            ("weight_decay", format!("{:?}", p.optimizer.weight_decay)),
            ("adam_eps", format!("{:?}", p.optimizer.eps)),
            ("jitter_max", p.augment.jitter_max.to_string()),
            ("noise_std", format!("{:?}", p.augment.noise_std)),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        for line in self.backbone.manifest().lines() {
            let _ = writeln!(out, "model.{line}");
        }
        dump_synth(&mut out, "source", &self.source_synth);
        dump_synth(&mut out, "target", &self.target_synth);
        out
    }

    /// SHA-256 over the canonical settings plus the bytes of any data files.
    pub fn hash(&self) -> Result<String, CliError> {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        for path in [&self.source_path, &self.target_path].into_iter().flatten() {
            let bytes = std::fs::read(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            h.update(Sha256::digest(&bytes));
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

pub fn parse_methods(v: &str) -> Result<Vec<Method>, CliError> {
    let methods = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| Method::parse(s).map_err(|e| CliError::Usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut names: Vec<String> = methods.iter().map(Method::name).collect();
    names.sort();
    names.dedup();
    if names.len() != methods.len() {
        return Err(CliError::Usage(format!("duplicate method in '{v}'")));
    }
    Ok(methods)
}
