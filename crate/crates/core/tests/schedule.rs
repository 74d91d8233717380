use asmmd_core::schedule::{weights_for_epoch, Ablation, TrainPlan};
use proptest::prelude::*;

fn plan(n_source: usize, n_target: usize) -> TrainPlan {
    TrainPlan {
        n_source,
        n_target,
        ..TrainPlan::default()
    }
}

#[test]
fn canonical_budgets() {
    let p = plan(3200, 400);
    let w40 = weights_for_epoch(&p, 40).unwrap();
    assert_eq!(w40.alpha, 1.0);
    assert!((w40.w_target - 8f64.sqrt()).abs() < 1e-12);
    assert!((w40.lambda_mmd - 0.4).abs() < 1e-12);
    let w20 = weights_for_epoch(&p, 20).unwrap();
    assert!((w20.alpha - 0.5).abs() < 1e-12);
    assert!((w20.w_target - (1.0 + 0.5 * (8f64.sqrt() - 1.0))).abs() < 1e-12);
    assert!((w20.w_target - 1.914214).abs() < 1e-6);
    assert!((w20.lambda_mmd - 0.2).abs() < 1e-12);
    assert_eq!(w20.w_source, 1.0);
}

#[test]
fn ratio_one_hundred_hits_the_ceiling() {
    let w = weights_for_epoch(&plan(10_000, 100), 300).unwrap();
    assert!((w.w_target - 6.0).abs() < 1e-12);
    // more target than source is floored at one
    assert_eq!(weights_for_epoch(&plan(100, 400), 300).unwrap().w_target, 1.0);
}

#[test]
fn fixed_weights_skip_the_warmup() {
    let p = TrainPlan {
        ablation: Ablation {
            fixed_weights: true,
            ..Ablation::FULL
        },
        ..plan(3200, 400)
    };
    let w = weights_for_epoch(&p, 1).unwrap();
    assert!((w.w_target - 8f64.sqrt()).abs() < 1e-12);
    assert!((w.lambda_mmd - 0.4 / 40.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn weights_grow_through_warmup_and_stay_bounded(
        ns in 1usize..20_000, nt in 1usize..2_000, e in 1usize..299, warmup in 1usize..120
    ) {
        let p = TrainPlan { warmup_epochs: warmup, ..plan(ns, nt) };
        let (a, b) = (weights_for_epoch(&p, e).unwrap(), weights_for_epoch(&p, e + 1).unwrap());
        prop_assert!(b.alpha >= a.alpha && b.w_target >= a.w_target && b.lambda_mmd >= a.lambda_mmd);
        prop_assert!((0.0..=1.0).contains(&a.alpha));
        prop_assert!((1.0..=6.0).contains(&a.w_target));
        prop_assert!((a.lambda_mmd - a.alpha * 0.4).abs() < 1e-12);
        if e >= warmup {
            prop_assert_eq!(a, b);
        }
    }
}
