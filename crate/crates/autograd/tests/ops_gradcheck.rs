use metaisp_autograd::check::{check_gradients, DEFAULT_STEP};
use metaisp_autograd::{Graph, Result, Tensor, Unary, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Projects an arbitrary output to a scalar with fixed random weights so
/// every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn assert_grad<F>(name: &str, build: F, inputs: &[Tensor<f64>], tol: f64)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let report = check_gradients(build, inputs, None, DEFAULT_STEP).unwrap();
    assert!(
        report.max_rel_err < tol,
        "{name}: max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn elementwise_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[3, 1]);
    let b_pos = b.map(|v| v.abs() + 0.5);
    assert_grad("add", |g, v| { let y = g.add(v[0], v[1])?; weighted_sum(g, y, 9) }, &[a.clone(), b.clone()], 1e-8);
    assert_grad("sub", |g, v| { let y = g.sub(v[1], v[0])?; weighted_sum(g, y, 9) }, &[a.clone(), b.clone()], 1e-8);
    assert_grad("mul", |g, v| { let y = g.mul(v[0], v[1])?; weighted_sum(g, y, 9) }, &[a.clone(), b.clone()], 1e-8);
    assert_grad("div", |g, v| { let y = g.div(v[0], v[1])?; weighted_sum(g, y, 9) }, &[a.clone(), b_pos], 1e-7);
    assert_grad(
        "scale+offset",
        |g, v| {
            let y = g.scale(v[0], -1.7);
            let y = g.add_scalar(y, 0.3);
            weighted_sum(g, y, 2)
        },
        &[a],
        1e-8,
    );
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[5, 7]);
    let pos = x.map(|v| v.abs() + 0.2);
    for kind in [Unary::Gelu, Unary::Sigmoid, Unary::Softplus, Unary::Tanh, Unary::Exp, Unary::Square, Unary::Relu, Unary::Abs] {
        assert_grad(&format!("{kind:?}"), |g, v| { let y = g.unary(v[0], kind); weighted_sum(g, y, 3) }, &[x.clone()], 1e-6);
    }
    for kind in [Unary::Log, Unary::Sqrt] {
        assert_grad(&format!("{kind:?}"), |g, v| { let y = g.unary(v[0], kind); weighted_sum(g, y, 3) }, &[pos.clone()], 1e-6);
    }
}

#[test]
fn matmul_all_transpose_combinations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = rand_tensor(&mut rng, if ta { &[2, 4, 3] } else { &[2, 3, 4] });
        let b_shared = rand_tensor(&mut rng, if tb { &[5, 4] } else { &[4, 5] });
        let b_batched = rand_tensor(&mut rng, if tb { &[2, 5, 4] } else { &[2, 4, 5] });
        for b in [b_shared, b_batched] {
            assert_grad(
                "matmul",
                |g, v| {
                    let y = g.matmul_t(v[0], v[1], ta, tb)?;
                    weighted_sum(g, y, 4)
                },
                &[a.clone(), b],
                1e-8,
            );
        }
    }
}

#[test]
fn linear_layer_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 3, 6]);
    let w = rand_tensor(&mut rng, &[6, 4]);
    let b = rand_tensor(&mut rng, &[4]);
    assert_grad(
        "linear",
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, 5)
        },
        &[x, w, b],
        1e-8,
    );
}

#[test]
fn convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
        let x = rand_tensor(&mut rng, &[2, 3, 6, 6]);
        let w = rand_tensor(&mut rng, &[4, 3, k, k]);
        let b = rand_tensor(&mut rng, &[4]);
        assert_grad(
            "conv2d",
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                weighted_sum(g, y, 6)
            },
            &[x, w, b],
            1e-7,
        );
    }
    let x = rand_tensor(&mut rng, &[2, 3, 5, 5]);
    let w = rand_tensor(&mut rng, &[3, 1, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    assert_grad(
        "depthwise",
        |g, v| {
            let y = g.depthwise_conv2d(v[0], v[1], Some(v[2]), 1)?;
            weighted_sum(g, y, 7)
        },
        &[x, w, b],
        1e-7,
    );
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 2, 4]);
    assert_grad(
        "permute+concat+slice",
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let p = g.permute(c, &[2, 0, 1])?;
            let s = g.slice(p, 2, 1, 3)?;
            let r = g.reshape(s, &[4, 6])?;
            weighted_sum(g, r, 8)
        },
        &[a.clone(), b],
        1e-8,
    );
    assert_grad(
        "sum/mean axes",
        |g, v| {
            let s = g.sum_axes(v[0], &[0, 2])?;
            let m = g.mean_axes(v[0], &[1])?;
            let a = weighted_sum(g, s, 1)?;
            let b = weighted_sum(g, m, 2)?;
            g.add(a, b)
        },
        &[a],
        1e-8,
    );
    let x = rand_tensor(&mut rng, &[1, 2, 4, 6]);
    assert_grad("avg_pool2", |g, v| { let y = g.avg_pool2(v[0])?; weighted_sum(g, y, 3) }, &[x], 1e-8);
}

#[test]
fn normalizations_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[3, 4, 5]);
    assert_grad("softmax", |g, v| { let y = g.softmax(v[0]); weighted_sum(g, y, 1) }, &[x.clone()], 1e-6);
    assert_grad("layer_norm", |g, v| { let y = g.layer_norm(v[0], 1e-5); weighted_sum(g, y, 2) }, &[x.clone()], 1e-5);
    assert_grad("l2_normalize", |g, v| { let y = g.l2_normalize(v[0], 1e-12); weighted_sum(g, y, 3) }, &[x.clone()], 1e-6);
    for axis in [0, 1, 2] {
        assert_grad(
            "batch_norm",
            |g, v| {
                let (y, _) = g.batch_norm(v[0], axis, 1e-5)?;
                weighted_sum(g, y, 4)
            },
            &[x.clone()],
            1e-5,
        );
    }
}

#[test]
fn batch_norm_statistics() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[4, 2], &[1., 10., 2., 20., 3., 30., 4., 40.]).unwrap());
    let (y, stats) = g.batch_norm(x, 1, 0.0).unwrap();
    assert_eq!(stats.mean, vec![2.5, 25.0]);
    assert!((stats.var_unbiased[0] - 5.0 / 3.0).abs() < 1e-12);
    let col0: Vec<f64> = g.value(y).data().iter().step_by(2).copied().collect();
    let mean: f64 = col0.iter().sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[2, 3], vec![1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0]).unwrap());
    let y = g.softmax(x);
    for row in g.value(y).data().chunks(3) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    assert!(g.matmul(a, b).is_err());
    assert!(g.add(a, b).is_err());
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[3, 5, 3, 3]));
    assert!(g.conv2d(x, w, None, 1, 1).is_err());
}

#[test]
fn gradients_accumulate_over_reuse() {
    // y = x*x + x  => dy/dx = 2x + 1
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[2], &[3.0, -1.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let y = g.add(sq, x).unwrap();
    let s = g.sum_all(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[7.0, -1.0]);
}
