//! Batch normalization with shared affine parameters and per-domain running
//! statistics.
//!
//! Each domain owns a distinct set of running buffers, so switching domains
//! with [`SplitBatchNorm::use_domain`] is the whole snapshot/restore step:
//! a forward pass on one domain can never touch the other domain's buffers.
//! In shared mode both domains map onto a single buffer set, which is the
//! plain batch-norm used by the pooled and target-only baselines.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::Domain;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitBatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: [Vec<f64>; 2],
    running_var: [Vec<f64>; 2],
    momentum: f64,
    eps: f64,
    active: Domain,
    shared: bool,
}

impl SplitBatchNorm {
    /// Two buffer sets (split mode) initialised to mean 0 / variance 1.
    pub fn new(features: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Tensor::full(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            running_mean: [vec![0.0; features], vec![0.0; features]],
            running_var: [vec![1.0; features], vec![1.0; features]],
            momentum,
            eps,
            active: Domain::Source,
            shared: false,
        }
    }

    /// One buffer set used by both domains.
    pub fn new_shared(features: usize, momentum: f64, eps: f64) -> Self {
        Self {
            shared: true,
            ..Self::new(features, momentum, eps)
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.numel()
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn use_domain(&mut self, d: Domain) {
        self.active = d;
    }

    pub fn active_domain(&self) -> Domain {
        self.active
    }

    fn slot(&self, d: Domain) -> usize {
        match (self.shared, d) {
            (true, _) | (false, Domain::Source) => 0,
            (false, Domain::Target) => 1,
        }
    }

    pub fn running_mean(&self, d: Domain) -> &[f64] {
        &self.running_mean[self.slot(d)]
    }

    pub fn running_var(&self, d: Domain) -> &[f64] {
        &self.running_var[self.slot(d)]
    }

    /// Overwrites the buffers of domain `d` (checkpoint restore).
    pub fn set_buffers(&mut self, d: Domain, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let f = self.features();
        if mean.len() != f || var.len() != f {
            return Err(Error::shape("set_buffers", &[f], &[mean.len(), var.len()]));
        }
        if var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("set_buffers", "running variance must be positive"));
        }
        let s = self.slot(d);
        self.running_mean[s] = mean;
        self.running_var[s] = var;
        Ok(())
    }

    /// Registers `gamma` and `beta` as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> (Var, Var) {
        (g.param(self.gamma.clone()), g.param(self.beta.clone()))
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() < 2 || s[1] != self.features() {
            return Err(Error::shape("split_batch_norm", s, &[self.features()]));
        }
        Ok(())
    }

    /// Normalizes with batch statistics and updates the active domain's buffers.
    ///
    /// Features live on axis 1; statistics pool the batch axis and all trailing axes.
    pub fn forward_train(&mut self, g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let (xhat, stats) = g.batch_normalize(x, self.eps)?;
        let unbiased = stats.var_unbiased();
        let s = self.slot(self.active);
        let m = self.momentum;
        for (r, b) in self.running_mean[s].iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var[s].iter_mut().zip(&unbiased) {
            *r = (1.0 - m) * *r + m * b;
        }
        let y = g.mul_broadcast(xhat, gamma, 1)?;
        g.add_broadcast(y, beta, 1)
    }

    /// Normalizes with the active domain's running statistics. Buffers are not modified.
    pub fn forward_eval(&self, g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let s = self.slot(self.active);
        let neg_mean = g.constant(Tensor::from_vec(self.running_mean[s].iter().map(|m| -m).collect()));
        let rstd = g.constant(Tensor::from_vec(
            self.running_var[s].iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect(),
        ));
        let centered = g.add_broadcast(x, neg_mean, 1)?;
        let xhat = g.mul_broadcast(centered, rstd, 1)?;
        let y = g.mul_broadcast(xhat, gamma, 1)?;
        g.add_broadcast(y, beta, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, shape: &[usize], shift: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0) + shift).collect()).unwrap()
    }

    fn train_pass(bn: &mut SplitBatchNorm, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let (gm, bt) = bn.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = bn.forward_train(&mut g, xv, gm, bt).unwrap();
        g.value(y).clone()
    }

    fn eval_pass(bn: &SplitBatchNorm, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let (gm, bt) = bn.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = bn.forward_eval(&mut g, xv, gm, bt).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn target_pass_leaves_source_buffers_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = SplitBatchNorm::new(4, 0.1, 1e-5);
        bn.use_domain(Domain::Source);
        train_pass(&mut bn, &random_batch(&mut rng, &[8, 4, 5], 0.0));
        let (m, v) = (bn.running_mean(Domain::Source).to_vec(), bn.running_var(Domain::Source).to_vec());
        bn.use_domain(Domain::Target);
        train_pass(&mut bn, &random_batch(&mut rng, &[8, 4, 5], 3.0));
        assert_eq!(bn.running_mean(Domain::Source), m.as_slice());
        assert_eq!(bn.running_var(Domain::Source), v.as_slice());
        bn.use_domain(Domain::Source);
        assert_eq!(bn.running_mean(Domain::Source), m.as_slice());
    }

    #[test]
    fn running_mean_update_rule() {
        let mut bn = SplitBatchNorm::new(1, 0.1, 1e-5);
        let x = Tensor::new(vec![4, 1], vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        train_pass(&mut bn, &x);
        assert!((bn.running_mean(Domain::Source)[0] - 0.1).abs() < 1e-15);
        // unbiased batch variance = 4/3
        let expected = 0.9 + 0.1 * (4.0 / 3.0);
        assert!((bn.running_var(Domain::Source)[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn standardized_input_passes_through() {
        let mut bn = SplitBatchNorm::new(1, 0.1, 1e-5);
        let x = Tensor::new(vec![4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let y = train_pass(&mut bn, &x);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn normalized_output_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut bn = SplitBatchNorm::new(3, 0.1, 1e-12);
        let y = train_pass(&mut bn, &random_batch(&mut rng, &[16, 3, 7], 1.5));
        for f in 0..3 {
            let vals: Vec<f64> = (0..16).flat_map(|b| (0..7).map(move |t| (b, t))).map(|(b, t)| y.data()[(b * 3 + f) * 7 + t]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn eval_uses_running_buffers_and_is_pure() {
        let mut bn = SplitBatchNorm::new(2, 0.1, 1e-5);
        bn.set_buffers(Domain::Source, vec![0.5, -1.0], vec![1.0, 1.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap();
        let y1 = eval_pass(&bn, &x);
        assert!(y1.data().iter().all(|v| v.abs() < 1e-15));
        let z = Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let (a, b) = (eval_pass(&bn, &z), eval_pass(&bn, &z));
        assert_eq!(a, b);
        assert_eq!(bn.running_mean(Domain::Source), &[0.5, -1.0]);
    }

    #[test]
    fn shifted_domains_give_different_eval_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bn = SplitBatchNorm::new(2, 0.1, 1e-5);
        for _ in 0..50 {
            bn.use_domain(Domain::Source);
            train_pass(&mut bn, &random_batch(&mut rng, &[16, 2], 0.0));
            bn.use_domain(Domain::Target);
            train_pass(&mut bn, &random_batch(&mut rng, &[16, 2], 1.0));
        }
        let x = random_batch(&mut rng, &[4, 2], 0.5);
        bn.use_domain(Domain::Source);
        let ys = eval_pass(&bn, &x);
        bn.use_domain(Domain::Target);
        let yt = eval_pass(&bn, &x);
        let diff: f64 = ys.data().iter().zip(yt.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 8.0;
        assert!(diff > 0.5, "mean output gap {diff}");
    }

    #[test]
    fn shared_mode_ignores_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut bn = SplitBatchNorm::new_shared(2, 0.1, 1e-5);
        bn.use_domain(Domain::Target);
        train_pass(&mut bn, &random_batch(&mut rng, &[6, 2], 2.0));
        assert_eq!(bn.running_mean(Domain::Source), bn.running_mean(Domain::Target));
        assert!(bn.running_mean(Domain::Source)[0] != 0.0);
    }

    #[test]
    fn degenerate_batch_errors() {
        let mut bn = SplitBatchNorm::new(2, 0.1, 1e-5);
        let mut g = Graph::new();
        let (gm, bt) = bn.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(bn.forward_train(&mut g, x, gm, bt), Err(Error::DegenerateBatch(1))));
        let bad = g.constant(Tensor::zeros(&[4, 3]));
        assert!(bn.forward_train(&mut g, bad, gm, bt).is_err());
    }
}
