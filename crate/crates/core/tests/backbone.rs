use asmmd_core::autodiff::{grad_check, grad_check_at, Graph, Mode, Tensor, Var};
use asmmd_core::backbone::{BackboneConfig, BoundParams, HeadKind, Model, TokenLayout};
use asmmd_core::mmd::{median_bandwidth, Bandwidth, LogitBatchPair};
use asmmd_core::schedule::{total_loss, weights_for_epoch, TrainPlan};
use asmmd_core::trainer::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use asmmd_core::{Domain, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> BackboneConfig {
    BackboneConfig {
        n_samples: 40,
        temporal_kernel: 5,
        n_temporal_filters: 4,
        pool_window: 10,
        pool_stride: 5,
        d_model: 8,
        n_heads: 2,
        head_dim: 4,
        n_layers: 1,
        ..BackboneConfig::default()
    }
}

fn trials(rng: &mut ChaCha8Rng, cfg: &BackboneConfig, n: usize, shift: f64) -> Tensor {
    let len = n * cfg.n_channels * cfg.n_samples;
    Tensor::new(
        vec![n, cfg.n_channels, cfg.n_samples],
        (0..len).map(|_| shift + rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// Weighted objective on a source and a target batch of four, with the
/// bandwidth fixed and dropout masks replayed from a fixed seed.
fn objective(
    model: &Model,
    g: &mut Graph,
    vars: &[Var],
    xs: &Tensor,
    xt: &Tensor,
    bw: Option<Bandwidth>,
) -> Result<(Var, Var, Var)> {
    let mut m = model.clone();
    let p = BoundParams::from_vars(&m, vars.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    m.use_domain(Domain::Source);
    let xsv = g.constant(xs.clone());
    let zs = m.forward(g, &p, xsv, Mode::Train, &mut rng)?;
    m.use_domain(Domain::Target);
    let xtv = g.constant(xt.clone());
    let zt = m.forward(g, &p, xtv, Mode::Train, &mut rng)?;
    let plan = TrainPlan {
        n_source: 3200,
        n_target: 400,
        ..TrainPlan::default()
    };
    let w = weights_for_epoch(&plan, 20)?;
    let terms = total_loss(g, zs, &[0, 1, 1, 0], zt, &[1, 0, 0, 1], &w, 0.1, false, bw)?;
    Ok((terms.total, zs, zt))
}

fn frozen_bandwidth(model: &Model, params: &[Tensor], xs: &Tensor, xt: &Tensor) -> Bandwidth {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let (_, zs, zt) = objective(model, &mut g, &vars, xs, xt, None).unwrap();
    median_bandwidth(&LogitBatchPair::from_tensors(g.value(zs), g.value(zt)).unwrap()).unwrap()
}

fn params_of(model: &Model) -> Vec<Tensor> {
    model.named_parameters().into_iter().map(|(_, t)| t.clone()).collect()
}

#[test]
fn small_model_every_parameter_matches_differences() {
    let cfg = small_config();
    let model = Model::build(cfg.clone(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (xs, xt) = (trials(&mut rng, &cfg, 4, 0.0), trials(&mut rng, &cfg, 4, 0.3));
    let params = params_of(&model);
    let bw = frozen_bandwidth(&model, &params, &xs, &xt);
    let err = grad_check(|g, v| Ok(objective(&model, g, v, &xs, &xt, Some(bw))?.0), &params, 1e-4).unwrap();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn default_model_sampled_parameters_match_differences() {
    let cfg = BackboneConfig::default();
    let model = Model::build(cfg.clone(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (xs, xt) = (trials(&mut rng, &cfg, 4, 0.0), trials(&mut rng, &cfg, 4, 0.3));
    let params = params_of(&model);
    let bw = frozen_bandwidth(&model, &params, &xs, &xt);
    // three entries of every tensor
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let n = t.numel();
            [0, n / 2, n - 1].into_iter().map(move |j| (i, j))
        })
        .collect();
    let err = grad_check_at(|g, v| Ok(objective(&model, g, v, &xs, &xt, Some(bw))?.0), &params, 1e-4, &coords).unwrap();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn loss_gradient_with_respect_to_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let zs = Tensor::new(vec![5, 2], (0..10).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let zt = Tensor::new(vec![4, 2], (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let bw = median_bandwidth(&LogitBatchPair::from_tensors(&zs, &zt).unwrap()).unwrap();
    let plan = TrainPlan {
        n_source: 100,
        n_target: 10,
        ..TrainPlan::default()
    };
    let w = weights_for_epoch(&plan, 10).unwrap();
    let err = grad_check(
        |g, v| Ok(total_loss(g, v[0], &[0, 1, 1, 0, 1], v[1], &[1, 1, 0, 0], &w, 0.1, false, Some(bw))?.total),
        &[zs, zt],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn default_parameter_budget_and_tokens() {
    let cfg = BackboneConfig::default();
    assert_eq!(cfg.conv_len(), Some(117));
    assert_eq!(cfg.token_count(), Some(3));
    let count = Model::build(cfg, 0).unwrap().parameter_count();
    assert!((150_000..=250_000).contains(&count), "{count}");
}

#[test]
fn builds_are_deterministic() {
    let a = Model::build(small_config(), 12).unwrap();
    let b = Model::build(small_config(), 12).unwrap();
    let c = Model::build(small_config(), 13).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn zero_input_gives_finite_probabilities() {
    let cfg = BackboneConfig::default();
    let mut model = Model::build(cfg.clone(), 1).unwrap();
    let logits = model.predict(&Tensor::zeros(&[2, cfg.n_channels, cfg.n_samples]), Domain::Target).unwrap();
    assert_eq!(logits.shape(), &[2, 2]);
    assert!(logits.is_finite());
}

#[test]
fn train_mode_replays_with_same_rng() {
    let cfg = small_config();
    let model = Model::build(cfg.clone(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = trials(&mut rng, &cfg, 3, 0.0);
    let run = || {
        let mut m = model.clone();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let xv = g.constant(x.clone());
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let z = m.forward(&mut g, &p, xv, Mode::Train, &mut r).unwrap();
        g.value(z).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn eval_permutation_equivariance_and_domain_buffers() {
    let cfg = small_config();
    let mut model = Model::build(cfg.clone(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = trials(&mut rng, &cfg, 4, 0.0);
    let z = model.predict(&x, Domain::Target).unwrap();
    let order = [2usize, 0, 3, 1];
    let per = cfg.n_channels * cfg.n_samples;
    let permuted: Vec<f64> = order.iter().flat_map(|&i| x.data()[i * per..][..per].to_vec()).collect();
    let zp = model
        .predict(&Tensor::new(x.shape().to_vec(), permuted).unwrap(), Domain::Target)
        .unwrap();
    for (k, &i) in order.iter().enumerate() {
        assert_eq!(&zp.data()[k * 2..k * 2 + 2], &z.data()[i * 2..i * 2 + 2]);
    }
    // fresh buffers are identical for both domains
    assert_eq!(model.predict(&x, Domain::Source).unwrap(), z);
    // and differ once the source buffers move
    let f = cfg.n_temporal_filters;
    model.bn_temporal.set_buffers(Domain::Source, vec![0.5; f], vec![2.0; f]).unwrap();
    assert_ne!(model.predict(&x, Domain::Source).unwrap(), z);
    assert_eq!(model.predict(&x, Domain::Target).unwrap(), z);
}

#[test]
fn positional_encoding_reaches_the_logits() {
    let cfg = small_config();
    let mut with = Model::build(cfg.clone(), 2).unwrap();
    let mut without = Model::build(
        BackboneConfig {
            positional_encoding: false,
            ..cfg.clone()
        },
        2,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = trials(&mut rng, &cfg, 2, 0.0);
    assert_ne!(with.predict(&x, Domain::Target).unwrap(), without.predict(&x, Domain::Target).unwrap());
}

#[test]
fn alternative_layouts_run() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (layout, head) in [
        (TokenLayout::Single, HeadKind::Linear),
        (TokenLayout::PerTimeStep, HeadKind::TwoLayer(16)),
    ] {
        let cfg = BackboneConfig {
            token_layout: layout,
            head,
            ..small_config()
        };
        let mut m = Model::build(cfg.clone(), 1).unwrap();
        let z = m.predict(&trials(&mut rng, &cfg, 3, 0.0), Domain::Source).unwrap();
        assert_eq!(z.shape(), &[3, 2]);
        assert!(z.is_finite());
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let mut model = Model::build(small_config(), 3).unwrap();
    model.bn_spatial.set_buffers(Domain::Target, vec![0.25; 4], vec![3.0; 4]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &model).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), model);
    let bytes = encode_checkpoint(&model);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
}
