use asmmd_core::autodiff::{grad_check, Graph, Mode, Tensor, Var};
use asmmd_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces `y` to a scalar through fixed pseudo-random weights so every
/// output entry contributes a distinct amount to the gradient.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 101) as f64 / 50.0) - 1.0).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn check(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let err = grad_check(
        |g, v| {
            let y = f(g, v)?;
            project(g, y)
        },
        &inputs,
        H,
    )
    .unwrap();
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut r = |shape: &[usize]| uniform(&mut rng, shape, -2.0, 2.0);

    check("add", vec![r(&[3, 4]), r(&[3, 4])], |g, v| g.add(v[0], v[1]));
    check("sub", vec![r(&[3, 4]), r(&[3, 4])], |g, v| g.sub(v[0], v[1]));
    check("mul", vec![r(&[3, 4]), r(&[3, 4])], |g, v| g.mul(v[0], v[1]));
    check("scale", vec![r(&[5])], |g, v| Ok(g.scale(v[0], -1.7)));
    check("add_scalar", vec![r(&[5])], |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check("add_broadcast", vec![r(&[2, 3, 4]), r(&[3])], |g, v| g.add_broadcast(v[0], v[1], 1));
    check("mul_broadcast", vec![r(&[2, 3, 4]), r(&[4])], |g, v| g.mul_broadcast(v[0], v[1], 2));
    check("matmul 2d", vec![r(&[3, 4]), r(&[4, 2])], |g, v| g.matmul(v[0], v[1]));
    check("matmul batched", vec![r(&[2, 3, 4]), r(&[2, 4, 5])], |g, v| g.matmul(v[0], v[1]));
    check("matmul broadcast rhs", vec![r(&[2, 3, 4]), r(&[4, 2])], |g, v| g.matmul(v[0], v[1]));
    check("conv1d stride 1", vec![r(&[2, 3, 9]), r(&[4, 3, 3])], |g, v| g.conv1d_valid(v[0], v[1], 1));
    check("conv1d stride 2", vec![r(&[2, 2, 10]), r(&[3, 2, 4])], |g, v| g.conv1d_valid(v[0], v[1], 2));
    check("sum", vec![r(&[3, 4])], |g, v| Ok(g.sum(v[0])));
    check("mean", vec![r(&[3, 4])], |g, v| Ok(g.mean(v[0])));
    check("mean_axis", vec![r(&[2, 3, 4])], |g, v| g.mean_axis(v[0], 1));
    check("var_biased", vec![r(&[7])], |g, v| Ok(g.var_biased(v[0])));
    check("gelu_exact", vec![r(&[10])], |g, v| Ok(g.gelu_exact(v[0])));
    check("softmax_lastdim", vec![r(&[3, 5])], |g, v| g.softmax_lastdim(v[0]));
    check("log_softmax_lastdim", vec![r(&[3, 5])], |g, v| g.log_softmax_lastdim(v[0]));
    check("layer_norm", vec![r(&[3, 6]), r(&[6]), r(&[6])], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    check("batch_normalize", vec![r(&[4, 3, 5])], |g, v| Ok(g.batch_normalize(v[0], 1e-5)?.0));
    check("avg_pool1d", vec![r(&[2, 3, 12])], |g, v| g.avg_pool1d(v[0], 4, 3));
    check("dropout train", vec![r(&[4, 6])], |g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        g.dropout(v[0], 0.3, &mut rng, Mode::Train)
    });
    check("concat", vec![r(&[2, 3]), r(&[2, 4])], |g, v| g.concat(&[v[0], v[1]], 1));
    check("slice", vec![r(&[3, 6])], |g, v| g.slice(v[0], 1, 2, 5));
    check("transpose", vec![r(&[2, 3, 4])], |g, v| g.transpose(v[0], 0, 2));
    check("reshape", vec![r(&[2, 6])], |g, v| g.reshape(v[0], &[3, 4]));
}

/// Maclaurin series of erf, adequate for |x| < 2.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..60 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn primitive_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![0.0, 1.0]));
    let y = g.gelu_exact(x);
    assert_eq!(g.value(y).data()[0], 0.0);
    let phi1 = 0.5 + 0.5 * erf_series(1.0 / 2f64.sqrt());
    assert!((g.value(y).data()[1] - phi1).abs() < 1e-14, "{} vs {phi1}", g.value(y).data()[1]);
    assert!((g.value(y).data()[1] - 0.841345).abs() < 5e-7);

    let s = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let p = g.softmax_lastdim(s).unwrap();
    assert_eq!(g.value(p).data(), &[0.5, 0.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = uniform(&mut rng, &[3, 3], -2.0, 2.0);
    let i3 = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let prod = g.matmul(i3, av).unwrap();
    assert_eq!(g.value(prod), &a);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data(), &[2.0, 4.0, 6.0]);
    // a second backward without reset accumulates
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data(), &[4.0, 8.0, 12.0]);
    // non-scalar output is rejected
    assert!(g.backward(sq).is_err());

    let err = grad_check(
        |g, v| {
            let y = g.gelu_exact(v[0]);
            Ok(g.mean(y))
        },
        &[Tensor::from_vec(vec![0.3, -0.7])],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");

    let err = grad_check(|g, _| Ok(g.constant(Tensor::scalar(3.0))), &[Tensor::from_vec(vec![1.0])], 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn linear_layer_check_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![
        uniform(&mut rng, &[4, 3], -2.0, 2.0),
        uniform(&mut rng, &[3, 2], -2.0, 2.0),
        uniform(&mut rng, &[2], -2.0, 2.0),
    ];
    let err = grad_check(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.add_broadcast(y, v[2], 1)?;
            project(g, y)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn non_finite_forward_names_the_node() {
    let err = grad_check(
        |g, v| {
            let y = g.scale(v[0], f64::INFINITY);
            Ok(g.sum(y))
        },
        &[Tensor::from_vec(vec![1.0])],
        1e-5,
    )
    .unwrap_err();
    assert!(err.to_string().contains("scale"), "{err}");
}

fn leaf_grads(x: &Tensor, build: impl Fn(&mut Graph, Var) -> Var) -> Tensor {
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = build(&mut g, v);
    g.backward(out).unwrap();
    g.grad(v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_accumulation_is_linear(xs in prop::collection::vec(-2.0f64..2.0, 1..12)) {
        let x = Tensor::from_vec(xs);
        let f1 = |g: &mut Graph, v: Var| { let y = g.gelu_exact(v); g.sum(y) };
        let f2 = |g: &mut Graph, v: Var| { let y = g.mul(v, v).unwrap(); g.mean(y) };
        let both = leaf_grads(&x, |g, v| {
            let a = f1(g, v);
            let b = f2(g, v);
            g.add(a, b).unwrap()
        });
        let a = leaf_grads(&x, f1);
        let b = leaf_grads(&x, f2);
        for i in 0..x.numel() {
            prop_assert!((both.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(uniform(&mut rng, &[rows, cols], -30.0, 30.0));
        let p = g.softmax_lastdim(x).unwrap();
        for row in g.value(p).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(rows in 1usize..5, cols in 2usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(uniform(&mut rng, &[rows, cols], -5.0, 5.0));
        let gamma = g.constant(Tensor::full(&[cols], 1.0));
        let beta = g.constant(Tensor::zeros(&[cols]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        for row in g.value(y).data().chunks(cols) {
            let m = row.iter().sum::<f64>() / cols as f64;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / cols as f64;
            prop_assert!(m.abs() < 1e-10);
            prop_assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_inputs_give_finite_forward(xs in prop::collection::vec(-1e3f64..1e3, 2..16)) {
        let n = xs.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, n], xs).unwrap());
        let a = g.gelu_exact(x);
        let b = g.softmax_lastdim(a).unwrap();
        let c = g.log_softmax_lastdim(x).unwrap();
        let gamma = g.constant(Tensor::full(&[n], 1.0));
        let beta = g.constant(Tensor::zeros(&[n]));
        let d = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for v in [a, b, c, d] {
            prop_assert!(g.value(v).is_finite());
        }
    }
}
