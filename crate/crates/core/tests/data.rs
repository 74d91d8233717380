use std::collections::BTreeSet;

use asmmd_core::autodiff::Tensor;
use asmmd_core::data::{
    augment, cv_splits, decode, encode, read_epochs, stratified_budget_sample, synth_generate, write_epochs, zscore_apply,
    zscore_fit, AugmentConfig, DomainShift, EpochSet, SampleRole, SplitSpec, SynthConfig, ODDBALL, STANDARD,
};
use asmmd_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

fn quiet(n_subjects: usize, amplitude: f64, noise_std: f64) -> SynthConfig {
    SynthConfig {
        n_subjects,
        p300_amplitude: vec![amplitude; 5],
        noise_std,
        subject_latency_jitter_ms: 0.0,
        subject_amplitude_jitter: 0.0,
        trial_latency_jitter_ms: 0.0,
        seed: 17,
        ..SynthConfig::default()
    }
}

/// Per-trial mean of channel `ch` over samples whose time lies in `[lo, hi]` ms.
fn window_means(set: &EpochSet, cfg: &SynthConfig, ch: usize, lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    let samples: Vec<usize> = (0..set.n_samples())
        .filter(|&s| (lo..=hi).contains(&cfg.time_ms(s)))
        .collect();
    let (mut odd, mut std) = (Vec::new(), Vec::new());
    for i in 0..set.n_trials() {
        let row = &set.trial(i)[ch * set.n_samples()..][..set.n_samples()];
        let m = samples.iter().map(|&s| row[s]).sum::<f64>() / samples.len() as f64;
        if set.labels()[i] == ODDBALL {
            odd.push(m);
        } else {
            std.push(m);
        }
    }
    (odd, std)
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Two-sided Welch test p-value, with statrs supplying the t distribution.
fn welch_p(a: &[f64], b: &[f64]) -> f64 {
    let ((ma, va), (mb, vb)) = (mean_var(a), mean_var(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t.abs()))
}

#[test]
fn zero_amplitude_classes_are_indistinguishable() {
    let cfg = quiet(5, 0.0, 4.0);
    let set = synth_generate(&cfg).unwrap();
    assert_eq!(set.n_trials(), 1000);
    let (odd, std) = window_means(&set, &cfg, 1, 250.0, 450.0);
    let p = welch_p(&odd, &std);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn pz_window_difference_matches_the_closed_form() {
    let cfg = quiet(5, 5.0, 1.0);
    let set = synth_generate(&cfg).unwrap();
    let (odd, std) = window_means(&set, &cfg, 1, 250.0, 450.0);
    // the expected window mean of the Gaussian bump, evaluated independently
    let times: Vec<f64> = (0..cfg.n_samples)
        .map(|s| -100.0 + s as f64 * 1000.0 / 128.0)
        .filter(|t| (250.0..=450.0).contains(t))
        .collect();
    let expected = times
        .iter()
        .map(|t| 5.0 * (-0.5 * ((t - 350.0) / 60.0).powi(2)).exp())
        .sum::<f64>()
        / times.len() as f64;
    let diff = mean_var(&odd).0 - mean_var(&std).0;
    assert!((diff - expected).abs() < 0.2, "difference {diff}, closed form {expected}");
}

#[test]
fn synthetic_sets_are_deterministic() {
    let cfg = SynthConfig {
        n_subjects: 3,
        ..SynthConfig::default()
    };
    let a = synth_generate(&cfg).unwrap();
    assert_eq!(a, synth_generate(&cfg).unwrap());
    let other = synth_generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.data(), other.data());
}

#[test]
fn shift_applies_gain_and_offset() {
    let base = quiet(2, 3.0, 1.0);
    let shifted = SynthConfig {
        shift: DomainShift {
            channel_gain: vec![2.0; 5],
            channel_offset: vec![1.0; 5],
            ..DomainShift::identity(5)
        },
        ..base.clone()
    };
    let (a, b) = (synth_generate(&base).unwrap(), synth_generate(&shifted).unwrap());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((y - (2.0 * x + 1.0)).abs() < 1e-5);
    }
}

#[test]
fn budget_sampling_at_protocol_scale() {
    let set = synth_generate(&SynthConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let source = stratified_budget_sample(&set, SampleRole::Source, &mut rng).unwrap();
    assert_eq!(source.n_trials(), 3200);
    let target = stratified_budget_sample(&set, SampleRole::Target, &mut rng).unwrap();
    assert_eq!(target.n_trials(), 400);
    for s in set.subjects() {
        assert_eq!(source.class_counts(s), (40, 40));
        assert_eq!(target.class_counts(s), (5, 5));
    }
}

#[test]
fn short_subject_is_named() {
    let cfg = SynthConfig {
        n_subjects: 2,
        first_subject_id: 7,
        trials_per_subject: 16,
        oddball_fraction: 0.25,
        ..SynthConfig::default()
    };
    let set = synth_generate(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    match stratified_budget_sample(&set, SampleRole::Target, &mut rng) {
        Err(Error::InsufficientTrials { subject, .. }) => assert_eq!(subject, 7),
        other => panic!("expected an insufficient-trials error, got {other:?}"),
    }
}

#[test]
fn canonical_folds() {
    let labels: Vec<u8> = (0..400).map(|i| (i % 2) as u8).collect();
    let splits = cv_splits(&labels, &SplitSpec::default()).unwrap();
    assert_eq!(splits.len(), 25);
    for s in &splits {
        assert_eq!(s.test.len(), 80);
        assert_eq!(s.test.iter().filter(|&&i| labels[i] == ODDBALL).count(), 40);
    }
    assert_eq!(splits, cv_splits(&labels, &SplitSpec::default()).unwrap());
}

#[test]
fn augment_noise_has_requested_spread() {
    let x = Tensor::zeros(&[1000, 5, 200]);
    let cfg = AugmentConfig {
        jitter_max: 0,
        noise_std: 0.005,
    };
    let y = augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (_, var) = mean_var(y.data());
    assert!((var.sqrt() / 0.005 - 1.0).abs() < 0.05, "std {}", var.sqrt());
}

#[test]
fn zscore_fit_and_shift() {
    let cfg = quiet(2, 3.0, 2.0);
    let set = synth_generate(&cfg).unwrap();
    let stats = zscore_fit(&set).unwrap();
    let z = zscore_apply(&set, &stats).unwrap();
    let t = z.n_samples();
    for ch in 0..z.n_channels() {
        let vals: Vec<f64> = (0..z.n_trials()).flat_map(|i| z.trial(i)[ch * t..][..t].to_vec()).collect();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 1e-10 && (sd - 1.0).abs() < 1e-8, "channel {ch}: {m} {sd}");
    }
    let shifted = synth_generate(&SynthConfig {
        shift: DomainShift {
            channel_offset: vec![3.0; 5],
            ..DomainShift::identity(5)
        },
        ..cfg
    })
    .unwrap();
    let zs = zscore_apply(&shifted, &stats).unwrap();
    let m = zs.data().iter().sum::<f64>() / zs.data().len() as f64;
    assert!(m > 0.5, "{m}");
}

#[test]
fn file_round_trip_and_bad_magic() {
    let set = synth_generate(&quiet(2, 3.0, 1.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.epochs");
    write_epochs(&path, &set).unwrap();
    assert_eq!(read_epochs(&path).unwrap(), set);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    assert!(matches!(decode(&bytes), Err(Error::BadMagic(_))));
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, c: usize, t: usize) -> EpochSet {
    let data = (0..n * c * t).map(|_| rng.random_range(-50.0f32..50.0) as f64).collect();
    let labels = (0..n).map(|_| if rng.random_bool(0.3) { ODDBALL } else { STANDARD }).collect();
    let subjects = (0..n).map(|_| rng.random_range(0..4u16)).collect();
    let names = (0..c).map(|i| format!("E{i}")).collect();
    EpochSet::new(data, c, t, labels, subjects, names, 128.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn format_round_trip_is_bitwise(n in 0usize..12, c in 1usize..6, t in 1usize..20, seed in any::<u64>()) {
        let set = random_set(&mut ChaCha8Rng::seed_from_u64(seed), n, c, t);
        let back = decode(&encode(&set).unwrap()).unwrap();
        prop_assert_eq!(back.data().len(), set.data().len());
        for (a, b) in back.data().iter().zip(set.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back, set);
    }

    #[test]
    fn truncation_is_reported(cut in 1usize..40, seed in any::<u64>()) {
        let set = random_set(&mut ChaCha8Rng::seed_from_u64(seed), 3, 2, 4);
        let bytes = encode(&set).unwrap();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(decode(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn splits_partition_the_trials(
        n_odd in 5usize..30, n_std in 5usize..60, k in 2usize..6, seed in any::<u64>(), frac in 0.0f64..0.5
    ) {
        prop_assume!(n_odd >= k && n_std >= k);
        let mut labels = vec![ODDBALL; n_odd];
        labels.extend(vec![STANDARD; n_std]);
        let spec = SplitSpec { k_folds: k, seeds: vec![seed, seed.wrapping_add(1)], val_fraction: frac };
        let splits = cv_splits(&labels, &spec).unwrap();
        prop_assert_eq!(splits.len(), 2 * k);
        for seed_splits in splits.chunks(k) {
            let mut tests = BTreeSet::new();
            for s in seed_splits {
                let (tr, va, te): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) = (
                    s.train.iter().copied().collect(),
                    s.val.iter().copied().collect(),
                    s.test.iter().copied().collect(),
                );
                prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
                prop_assert_eq!(tr.len() + va.len() + te.len(), labels.len());
                prop_assert!(tests.is_disjoint(&te));
                tests.extend(te);
                // stratified: each class lands in every test fold in floor/ceil share
                let odd = s.test.iter().filter(|&&i| labels[i] == ODDBALL).count();
                prop_assert!(odd == n_odd / k || odd == n_odd.div_ceil(k));
            }
            prop_assert_eq!(tests.len(), labels.len());
        }
        prop_assert_eq!(splits, cv_splits(&labels, &spec).unwrap());
    }

    #[test]
    fn budget_sampling_keeps_per_subject_budget(extra in 0usize..30, seed in any::<u64>()) {
        let cfg = SynthConfig {
            n_subjects: 3,
            trials_per_subject: 40 + extra,
            oddball_fraction: 0.5,
            seed,
            ..SynthConfig::default()
        };
        let set = synth_generate(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = stratified_budget_sample(&set, SampleRole::Target, &mut rng).unwrap();
        for s in set.subjects() {
            prop_assert_eq!(out.class_counts(s), (5, 5));
        }
    }

    #[test]
    fn augment_keeps_shape(b in 1usize..5, t in 6usize..30, jitter in 0usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![b, 2, t], (0..b * 2 * t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let cfg = AugmentConfig { jitter_max: jitter, noise_std: 0.01 };
        let y = augment(&x, &cfg, &mut rng).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.is_finite());
    }
}
