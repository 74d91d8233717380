use asmmd_core::autodiff::Tensor;
use asmmd_core::trainer::{cosine_lr, AdamaxConfig, OptimizerState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scalar Adamax written out per coordinate, one state triple per entry.
struct Reference {
    m: Vec<f64>,
    u: Vec<f64>,
    t: i32,
}

impl Reference {
    fn step(&mut self, p: &mut [f64], g: &[f64], cfg: &AdamaxConfig, lr: f64) {
        self.t += 1;
        for j in 0..p.len() {
            let grad = g[j] + cfg.weight_decay * p[j];
            self.m[j] = cfg.beta1 * self.m[j] + (1.0 - cfg.beta1) * grad;
            self.u[j] = f64::max(cfg.beta2 * self.u[j], grad.abs());
            let corrected = self.m[j] / (1.0 - cfg.beta1.powi(self.t));
            p[j] -= lr * corrected / (self.u[j] + cfg.eps);
        }
    }
}

#[test]
fn follows_reference_over_random_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = AdamaxConfig::default();
    let mut ours = vec![
        Tensor::new(vec![3, 2], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        Tensor::new(vec![4], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
    ];
    let mut theirs: Vec<Vec<f64>> = ours.iter().map(|t| t.data().to_vec()).collect();
    let mut refs: Vec<Reference> = theirs
        .iter()
        .map(|p| Reference {
            m: vec![0.0; p.len()],
            u: vec![0.0; p.len()],
            t: 0,
        })
        .collect();
    let names = vec!["a".to_string(), "b".to_string()];
    let mut opt = OptimizerState::new(cfg);
    for step in 1..=200 {
        let lr = cosine_lr(step, 200, cfg.lr, 0.0);
        let grads: Vec<Tensor> = ours
            .iter()
            .map(|p| {
                let g: Vec<f64> = (0..p.numel()).map(|_| rng.random_range(-3.0..3.0)).collect();
                Tensor::new(p.shape().to_vec(), g).unwrap()
            })
            .collect();
        let mut refs_mut: Vec<&mut Tensor> = ours.iter_mut().collect();
        opt.step(&mut refs_mut, &grads, &names, lr).unwrap();
        for ((p, r), g) in theirs.iter_mut().zip(refs.iter_mut()).zip(&grads) {
            r.step(p, g.data(), &cfg, lr);
        }
        assert_eq!(opt.step_count(), step as u64);
    }
    for (i, (a, b)) in ours.iter().zip(&theirs).enumerate() {
        for (x, y) in a.data().iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        assert!(opt.infinity_norm(i).iter().all(|&u| u >= 0.0));
    }
}

#[test]
fn single_step_example() {
    let mut opt = OptimizerState::new(AdamaxConfig {
        weight_decay: 0.0,
        ..AdamaxConfig::default()
    });
    let mut p = Tensor::from_vec(vec![0.0]);
    opt.step(&mut [&mut p], &[Tensor::from_vec(vec![1.0])], &["w".into()], 0.01)
        .unwrap();
    assert!((opt.first_moment(0)[0] - 0.1).abs() < 1e-15);
    assert_eq!(opt.infinity_norm(0)[0], 1.0);
    assert!((p.data()[0] + 0.01).abs() < 1e-9);
}

#[test]
fn rejects_mismatched_shapes() {
    let mut opt = OptimizerState::new(AdamaxConfig::default());
    let mut p = Tensor::from_vec(vec![0.0, 1.0]);
    assert!(opt
        .step(&mut [&mut p], &[Tensor::from_vec(vec![1.0])], &["w".into()], 0.01)
        .is_err());
    assert_eq!(opt.step_count(), 0);
}

#[test]
fn cosine_midpoint_and_ends() {
    assert_eq!(cosine_lr(1, 101, 0.01, 0.0), 0.01);
    assert!((cosine_lr(51, 101, 0.01, 0.0) - 0.005).abs() < 1e-15);
    assert!((cosine_lr(101, 101, 0.01, 0.001) - 0.001).abs() < 1e-15);
    assert_eq!(cosine_lr(1, 1, 0.01, 0.0), 0.01);
}

proptest! {
    #[test]
    fn cosine_is_non_increasing(e in 1usize..300, max in 2usize..300) {
        let a = cosine_lr(e, max, 0.01, 1e-4);
        let b = cosine_lr(e + 1, max, 0.01, 1e-4);
        prop_assert!(b <= a + 1e-18);
        prop_assert!((1e-4..=0.01).contains(&a));
    }
}
