//! Warm-up schedule, domain weights and the training objective.

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::mmd::{alignment_penalty_with, Bandwidth};
use crate::trainer::AdamaxConfig;

/// Component switches used by the ablation study. All `false` is the full recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    /// `w_T = 1` for every epoch.
    pub equal_weights: bool,
    /// `w_T = clip(sqrt(N_S/N_T), lo, hi)` from the first epoch (no warm-up on the weight).
    pub fixed_weights: bool,
    /// `λ_MMD = 0`.
    pub no_mmd: bool,
    /// One running-statistics buffer set shared by both domains.
    pub no_splitbn: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        equal_weights: false,
        fixed_weights: false,
        no_mmd: false,
        no_splitbn: false,
    };
}

/// Schedule and optimization hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub lambda0: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Effective per-epoch source trial count.
    pub n_source: usize,
    /// Effective per-epoch target trial count.
    pub n_target: usize,
    pub label_smoothing: f64,
    pub clamp_mmd_at_zero: bool,
    pub ablation: Ablation,
    pub batch_size: usize,
    pub patience: usize,
    pub grad_accum: usize,
    pub lr_min: f64,
    pub optimizer: AdamaxConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            warmup_epochs: 40,
            max_epochs: 300,
            lambda0: 0.4,
            clip_lo: 1.0,
            clip_hi: 6.0,
            n_source: 1,
            n_target: 1,
            label_smoothing: 0.1,
            clamp_mmd_at_zero: false,
            ablation: Ablation::FULL,
            batch_size: 32,
            patience: 50,
            grad_accum: 1,
            lr_min: 0.0,
            optimizer: AdamaxConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.warmup_epochs < 1 {
            return bad("warmup_epochs must be >= 1");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be >= 1");
        }
        if !(1.0 <= self.clip_lo && self.clip_lo <= self.clip_hi) {
            return bad("need 1 <= clip_lo <= clip_hi");
        }
        if self.n_source < 1 || self.n_target < 1 {
            return bad("n_source and n_target must be >= 1");
        }
        if !(self.lambda0 >= 0.0) {
            return bad("lambda0 must be >= 0");
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 0.5)");
        }
        if self.batch_size < 1 || self.grad_accum < 1 {
            return bad("batch_size and grad_accum must be >= 1");
        }
        Ok(())
    }

    /// `clip(sqrt(N_S / N_T), clip_lo, clip_hi)`.
    pub fn clipped_target_weight(&self) -> f64 {
        let raw = (self.n_source as f64 / self.n_target as f64).sqrt();
        raw.max(self.clip_lo).min(self.clip_hi)
    }
}

/// Loss coefficients for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochWeights {
    pub alpha: f64,
    pub w_source: f64,
    pub w_target: f64,
    pub lambda_mmd: f64,
}

/// Coefficients for epoch `e` (1-based).
pub fn weights_for_epoch(plan: &TrainPlan, e: usize) -> Result<EpochWeights> {
    if e < 1 || e > plan.max_epochs {
        return Err(Error::invalid(
            "weights_for_epoch",
            format!("epoch {e} outside 1..={}", plan.max_epochs),
        ));
    }
    let alpha = (e as f64 / plan.warmup_epochs as f64).min(1.0);
    let clipped = plan.clipped_target_weight();
    let ab = plan.ablation;
    let w_target = if ab.equal_weights {
        1.0
    } else if ab.fixed_weights {
        clipped
    } else {
        1.0 + alpha * (clipped - 1.0)
    };
    let lambda_mmd = if ab.no_mmd { 0.0 } else { alpha * plan.lambda0 };
    Ok(EpochWeights {
        alpha,
        w_source: 1.0,
        w_target,
        lambda_mmd,
    })
}

/// Label-smoothed cross-entropy, averaged over the batch.
///
/// Targets are `(1 − ε)·onehot + ε/C`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    if !(0.0..0.5).contains(&smoothing) {
        return Err(Error::invalid("cross_entropy", format!("smoothing {smoothing} outside [0, 0.5)")));
    }
    let (batch, classes) = (shape[0], shape[1]);
    let mut q = vec![smoothing / classes as f64; batch * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidLabel { label: y, classes });
        }
        q[i * classes + y] += 1.0 - smoothing;
    }
    let q = g.constant(Tensor::new(shape, q)?);
    let logp = g.log_softmax_lastdim(logits)?;
    let weighted = g.mul(logp, q)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / batch as f64))
}

/// Nodes of the assembled objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ce_source: Var,
    pub ce_target: Var,
    pub alignment: Var,
}

/// `w_S·CE(z_S) + w_T·CE(z_T) + λ_MMD·MMD²(z_S, z_T)`.
///
/// `bandwidth` overrides the median heuristic when set.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    z_source: Var,
    y_source: &[usize],
    z_target: Var,
    y_target: &[usize],
    weights: &EpochWeights,
    smoothing: f64,
    clamp_mmd_at_zero: bool,
    bandwidth: Option<Bandwidth>,
) -> Result<LossTerms> {
    let ce_source = cross_entropy(g, z_source, y_source, smoothing)?;
    let ce_target = cross_entropy(g, z_target, y_target, smoothing)?;
    let alignment = alignment_penalty_with(g, z_source, z_target, bandwidth, clamp_mmd_at_zero)?;
    let ls = g.scale(ce_source, weights.w_source);
    let lt = g.scale(ce_target, weights.w_target);
    let la = g.scale(alignment, weights.lambda_mmd);
    let sup = g.add(ls, lt)?;
    let total = g.add(sup, la)?;
    Ok(LossTerms {
        total,
        ce_source,
        ce_target,
        alignment,
    })
}
