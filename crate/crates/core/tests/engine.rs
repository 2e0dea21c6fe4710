mod common;

use brainage::engine::ops::{batchnorm_forward, conv_forward, maxpool_forward, weighted_mae_loss, NormMode, RunningStats, BN_EPS};
use brainage::engine::{EngineError, Graph, Tensor};
use brainage::model::{Network, NetworkSpec};
use common::*;
use proptest::prelude::*;

#[test]
fn conv_of_ones_sums_window() {
    let x = Tensor::<f64>::filled(vec![1, 1, 3, 3, 3], 1.0);
    let k = Tensor::<f64>::filled(vec![1, 1, 3, 3, 3], 1.0);
    let out = conv_forward(&x, &k, None, 1, 0).unwrap();
    assert_eq!(out.shape(), &[1, 1, 1, 1, 1]);
    assert_eq!(out.data(), &[27.0]);
    let b = Tensor::new(vec![1], vec![0.5]).unwrap();
    assert_eq!(conv_forward(&x, &k, Some(&b), 1, 0).unwrap().data(), &[27.5]);
}

#[test]
fn conv_matches_direct_summation_on_5_cube() {
    let mut r = rng(5);
    let x = uniform(&mut r, 125, -1.0, 1.0);
    let k = uniform(&mut r, 27, -1.0, 1.0);
    let out = conv_forward(&tensor(&[1, 1, 5, 5, 5], x.clone()), &tensor(&[1, 1, 3, 3, 3], k.clone()), None, 1, 1).unwrap();
    let (expected, shape) = conv_oracle(&x, &[1, 1, 5, 5, 5], &k, &[1, 1, 3, 3, 3], None, 1, 1);
    assert_eq!(out.shape(), shape.as_slice());
    assert_eq!(shape, vec![1, 1, 5, 5, 5]);
    for (a, e) in out.data().iter().zip(&expected) {
        assert!((a - e).abs() <= 1e-6);
    }
}

#[test]
fn conv_channel_mismatch_is_shape_error() {
    let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4, 4]);
    let k = Tensor::<f32>::zeros(vec![1, 3, 3, 3, 3]);
    assert!(matches!(conv_forward(&x, &k, None, 1, 1), Err(EngineError::Shape(_))));
}

#[test]
fn pool_examples() {
    let x = tensor(&[1, 1, 2, 2, 2], (1..=8).map(f64::from).collect());
    assert_eq!(maxpool_forward(&x, 2, 2).unwrap().data(), &[8.0]);
    let c = Tensor::<f64>::filled(vec![1, 2, 4, 4, 4], 3.5);
    let out = maxpool_forward(&c, 2, 2).unwrap();
    assert_eq!(out.shape(), &[1, 2, 2, 2, 2]);
    assert!(out.data().iter().all(|&v| v == 3.5));
    let small = Tensor::<f64>::zeros(vec![1, 1, 1, 4, 4]);
    assert!(matches!(maxpool_forward(&small, 2, 2), Err(EngineError::Shape(_))));
}

#[test]
fn pool_matches_exhaustive_max_on_4_cube() {
    let x = uniform(&mut rng(4), 64, -2.0, 2.0);
    let out = maxpool_forward(&tensor(&[1, 1, 4, 4, 4], x.clone()), 2, 2).unwrap();
    let (expected, _) = maxpool_oracle(&x, &[1, 1, 4, 4, 4], 2, 2);
    assert_eq!(out.data(), expected.as_slice());
}

#[test]
fn pool_ties_route_gradient_to_first_index() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(tensor(&[1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]));
    let p = g.max_pool(x, 2, 2).unwrap();
    let grads = g.backward_seeded(p, vec![1.0]).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

fn bn_train(x: Tensor<f64>, gamma: f64, beta: f64) -> Tensor<f64> {
    let c = x.shape()[1];
    let mut running = RunningStats::new(c);
    let g = Tensor::filled(vec![c], gamma);
    let b = Tensor::filled(vec![c], beta);
    batchnorm_forward(&x, &g, &b, &mut running, NormMode::Training, BN_EPS).unwrap()
}

#[test]
fn batchnorm_examples() {
    let out = bn_train(Tensor::filled(vec![2, 1, 2, 2, 2], 4.0), 1.0, 0.0);
    assert!(out.data().iter().all(|&v| v == 0.0));
    let x = tensor(&[1, 2, 2, 1, 1], vec![1.0, -3.0, 7.0, 0.5]);
    let out = bn_train(x, 0.0, 0.25);
    assert!(out.data().iter().all(|&v| v == 0.25));
    let out = bn_train(tensor(&[1, 1, 1, 1, 2], vec![0.0, 2.0]), 1.0, 0.0);
    assert!((out.data()[0] + 1.0).abs() < 1e-5);
    assert!((out.data()[1] - 1.0).abs() < 1e-5);
}

#[test]
fn batchnorm_updates_running_stats_and_inference_uses_them() {
    let x = tensor(&[1, 1, 1, 1, 2], vec![0.0, 2.0]);
    let mut running = RunningStats::new(1);
    let one = Tensor::filled(vec![1], 1.0);
    let zero = Tensor::filled(vec![1], 0.0);
    batchnorm_forward(&x, &one, &zero, &mut running, NormMode::Training, BN_EPS).unwrap();
    assert!((running.mean[0] - 0.1).abs() < 1e-12);
    assert!((running.variance[0] - 1.0).abs() < 1e-12);
    let out = batchnorm_forward(&x, &one, &zero, &mut running, NormMode::Inference, BN_EPS).unwrap();
    let expect = |v: f64| (v - 0.1) / (1.0 + BN_EPS).sqrt();
    assert!((out.data()[0] - expect(0.0)).abs() < 1e-12);
    assert!((out.data()[1] - expect(2.0)).abs() < 1e-12);
}

#[test]
fn mae_examples() {
    assert_eq!(weighted_mae_loss(&[1.0, 2.0], &[1.0, 4.0], None).unwrap(), 1.0f64);
    assert_eq!(weighted_mae_loss(&[3.0, 2.0], &[3.0, 2.0], None).unwrap(), 0.0f64);
    assert_eq!(weighted_mae_loss(&[0.0, 0.0], &[1.0, 3.0], Some(&[3.0, 1.0])).unwrap(), 1.5f64);
    assert!(matches!(
        weighted_mae_loss(&[0.0, 0.0], &[1.0, 3.0], Some(&[0.0, 0.0])),
        Err(EngineError::DegenerateWeights(_))
    ));
}

#[test]
fn mae_gradient_is_sign_over_n_and_zero_at_zero_error() {
    let mut g = Graph::<f64>::new();
    let p = g.variable(tensor(&[4], vec![5.0, 1.0, 2.0, 9.0]));
    let loss = g.weighted_mae(p, &[1.0, 3.0, 2.0, 0.0], None).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(p).unwrap(), &[0.25, -0.25, 0.0, 0.25]);
}

#[test]
fn single_voxel_kernel_gradient_is_input() {
    let mut g = Graph::<f64>::new();
    let x = g.input(tensor(&[1, 1, 1, 1, 1], vec![0.7]));
    let k = g.variable(tensor(&[1, 1, 1, 1, 1], vec![-2.0]));
    let out = g.conv(x, k, None, 1, 0).unwrap();
    let grads = g.backward(out).unwrap();
    assert_eq!(grads.get(k).unwrap(), &[0.7]);
}

#[test]
fn backward_usage_errors() {
    let g = Graph::<f64>::new();
    let mut other = Graph::<f64>::new();
    let node = other.variable(tensor(&[1], vec![1.0]));
    assert!(matches!(g.backward(node), Err(EngineError::Usage(_))));
    let v = other.variable(tensor(&[2], vec![1.0, 2.0]));
    assert!(matches!(other.backward(v), Err(EngineError::Usage(_))));
}

#[test]
fn gradcheck_conv_3d_and_2d() {
    let mut r = rng(11);
    let leaves = vec![
        (vec![2, 2, 4, 3, 5], uniform(&mut r, 240, -1.0, 1.0)),
        (vec![3, 2, 3, 3, 3], uniform(&mut r, 162, -1.0, 1.0)),
        (vec![3], uniform(&mut r, 3, -1.0, 1.0)),
    ];
    for (stride, pad) in [(1, 1), (2, 0), (2, 1)] {
        let err = check_op(&leaves, 1, |g, ids| g.conv(ids[0], ids[1], Some(ids[2]), stride, pad).unwrap());
        assert!(err <= 1e-4, "3d stride {stride} pad {pad}: {err}");
    }
    let leaves = vec![
        (vec![2, 3, 5, 4], uniform(&mut r, 120, -1.0, 1.0)),
        (vec![2, 3, 3, 3], uniform(&mut r, 54, -1.0, 1.0)),
        (vec![2], uniform(&mut r, 2, -1.0, 1.0)),
    ];
    let err = check_op(&leaves, 2, |g, ids| g.conv(ids[0], ids[1], Some(ids[2]), 1, 1).unwrap());
    assert!(err <= 1e-4, "2d: {err}");
}

#[test]
fn gradcheck_relu_pool_reshape_linear_add() {
    let mut r = rng(12);
    let away_from_zero: Vec<f64> = uniform(&mut r, 32, 0.05, 1.0)
        .into_iter()
        .enumerate()
        .map(|(i, v)| if i % 2 == 0 { v } else { -v })
        .collect();
    let err = check_op(&[(vec![2, 2, 2, 2, 2], away_from_zero)], 3, |g, ids| g.relu(ids[0]).unwrap());
    assert!(err <= 1e-4, "relu: {err}");

    let err = check_op(&[(vec![1, 2, 4, 4, 4], distinct(&mut r, 128))], 4, |g, ids| g.max_pool(ids[0], 2, 2).unwrap());
    assert!(err <= 1e-4, "pool: {err}");

    let leaves = vec![
        (vec![3, 2, 2, 2, 1], uniform(&mut r, 24, -1.0, 1.0)),
        (vec![2, 8], uniform(&mut r, 16, -1.0, 1.0)),
        (vec![2], uniform(&mut r, 2, -1.0, 1.0)),
    ];
    let err = check_op(&leaves, 5, |g, ids| {
        let flat = g.reshape(ids[0], vec![3, 8]).unwrap();
        g.linear(flat, ids[1], ids[2]).unwrap()
    });
    assert!(err <= 1e-4, "reshape+linear: {err}");

    let leaves = vec![(vec![5], uniform(&mut r, 5, -1.0, 1.0)), (vec![5], uniform(&mut r, 5, -1.0, 1.0))];
    let err = check_op(&leaves, 6, |g, ids| g.add(ids[0], ids[1]).unwrap());
    assert!(err <= 1e-4, "add: {err}");
}

#[test]
fn gradcheck_batchnorm_both_modes() {
    let mut r = rng(13);
    let leaves = vec![
        (vec![2, 3, 2, 2, 2], uniform(&mut r, 48, -2.0, 2.0)),
        (vec![3], uniform(&mut r, 3, 0.5, 1.5)),
        (vec![3], uniform(&mut r, 3, -0.5, 0.5)),
    ];
    let err = check_op(&leaves, 7, |g, ids| g.batch_norm_train(ids[0], ids[1], ids[2], BN_EPS).unwrap().0);
    assert!(err <= 1e-4, "train: {err}");
    let err = check_op(&leaves, 8, |g, ids| {
        g.batch_norm_infer(ids[0], ids[1], ids[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], BN_EPS).unwrap()
    });
    assert!(err <= 1e-4, "infer: {err}");
}

#[test]
fn gradcheck_losses() {
    let mut r = rng(14);
    let pred = uniform(&mut r, 6, -1.0, 1.0);
    let target: Vec<f64> = pred.iter().enumerate().map(|(i, p)| p + if i % 2 == 0 { 0.3 } else { -0.4 }).collect();
    let weights = uniform(&mut r, 6, 0.5, 2.0);
    let err = check_op(&[(vec![6], pred)], 9, |g, ids| g.weighted_mae(ids[0], &target, Some(&weights)).unwrap());
    assert!(err <= 1e-4, "mae: {err}");
    let leaves = vec![(vec![2, 3], uniform(&mut r, 6, -1.0, 1.0)), (vec![4], uniform(&mut r, 4, -1.0, 1.0))];
    let err = check_op(&leaves, 10, |g, ids| g.sum_squares(ids, 0.7).unwrap());
    assert!(err <= 1e-4, "sum of squares: {err}");
}

fn two_stage_loss(net: &Network<f64>, input: &Tensor<f64>, target: &[f64], l2: f64) -> (Graph<f64>, brainage::model::Forward, brainage::engine::NodeId) {
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, input.clone(), NormMode::Training).unwrap();
    let mae = g.weighted_mae(fwd.output, target, None).unwrap();
    let reg = g.sum_squares(&net.regularized_nodes(&fwd), l2).unwrap();
    let loss = g.add(mae, reg).unwrap();
    (g, fwd, loss)
}

/// At 1e-3 the central difference straddles ReLU and pooling kinks of the
/// composed network; a smaller step keeps both sides on one linear piece.
const NETWORK_STEP: f64 = 1e-5;

#[test]
fn gradcheck_two_stage_network() {
    let spec = NetworkSpec { num_stages: 2, base_features: 2, input_extents: vec![4, 4, 4], seed: 3, ..NetworkSpec::desk() };
    let net: Network<f64> = Network::<f32>::build(spec).unwrap().cast();
    let mut r = rng(15);
    let input = tensor(&[3, 1, 4, 4, 4], uniform(&mut r, 192, 0.0, 1.0));
    let target = [5.0, -4.0, 6.0];
    let (g, fwd, loss) = two_stage_loss(&net, &input, &target, 0.01);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, node) in fwd.params.iter().enumerate() {
        let base = net.params[pi].tensor.data().to_vec();
        let analytic = grads.get(*node).unwrap().to_vec();
        let err = max_fd_error(&base, &analytic, NETWORK_STEP, |p| {
            let mut n = net.clone();
            n.params[pi].tensor.data_mut().copy_from_slice(p);
            let (g, _, loss) = two_stage_loss(&n, &input, &target, 0.01);
            g.value(loss).data()[0]
        });
        assert!(err <= 1e-4, "{}: {err}", net.params[pi].name);
        worst = worst.max(err);
    }
    println!("two-stage network worst relative error {worst:.2e}");
}

#[test]
fn forward_is_bit_deterministic() {
    let spec = NetworkSpec { num_stages: 2, base_features: 4, input_extents: vec![8, 8, 8], seed: 9, ..NetworkSpec::desk() };
    let a = Network::<f32>::build(spec.clone()).unwrap();
    let b = Network::<f32>::build(spec).unwrap();
    let x: Vec<f32> = uniform(&mut rng(16), 1024, 0.0, 1.0).into_iter().map(|v| v as f32).collect();
    let input = Tensor::new(vec![2, 1, 8, 8, 8], x).unwrap();
    let pa = a.predict_batch(input.clone()).unwrap();
    let pb = b.predict_batch(input).unwrap();
    assert_eq!(pa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), pb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn conv_matches_oracle_across_shapes(
        two_d in any::<bool>(),
        extents in prop::array::uniform3(3usize..7),
        cin in 1usize..3,
        cout in 1usize..3,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        pad in 0usize..2,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let mut xs = vec![2, cin];
        let mut ks = vec![cout, cin];
        if two_d {
            xs.extend(&extents[1..]);
            ks.extend([k, k]);
        } else {
            xs.extend(extents);
            ks.extend([k, k, k]);
        }
        let x = uniform(&mut r, xs.iter().product(), -1.0, 1.0);
        let kv = uniform(&mut r, ks.iter().product(), -1.0, 1.0);
        let b = uniform(&mut r, cout, -1.0, 1.0);
        let out = conv_forward(&tensor(&xs, x.clone()), &tensor(&ks, kv.clone()), Some(&tensor(&[cout], b.clone())), stride, pad).unwrap();
        let (expected, shape) = conv_oracle(&x, &xs, &kv, &ks, Some(&b), stride, pad);
        prop_assert_eq!(out.shape(), shape.as_slice());
        for (a, e) in out.data().iter().zip(&expected) {
            prop_assert!((a - e).abs() <= 1e-6);
        }
    }

    #[test]
    fn pool_matches_oracle_across_shapes(
        two_d in any::<bool>(),
        extents in prop::array::uniform3(2usize..8),
        window in 1usize..3,
        stride in 1usize..3,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let xs: Vec<usize> = if two_d { vec![1, 2, extents[1], extents[2]] } else { vec![1, 2, extents[0], extents[1], extents[2]] };
        let x = uniform(&mut r, xs.iter().product(), -1.0, 1.0);
        let out = maxpool_forward(&tensor(&xs, x.clone()), window, stride).unwrap();
        let (expected, shape) = maxpool_oracle(&x, &xs, window, stride);
        prop_assert_eq!(out.shape(), shape.as_slice());
        prop_assert_eq!(out.data(), expected.as_slice());
    }

    #[test]
    fn batchnorm_training_output_is_standardized(seed in any::<u64>(), scale in 1.0f64..10.0, shift in -5.0f64..5.0) {
        let x: Vec<f64> = uniform(&mut rng(seed), 2 * 3 * 27, -1.0, 1.0).into_iter().map(|v| v * scale + shift).collect();
        let out = bn_train(tensor(&[2, 3, 3, 3, 3], x), 1.0, 0.0);
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|b| out.data()[(b * 3 + c) * 27..(b * 3 + c + 1) * 27].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            prop_assert!(m.abs() <= 1e-6);
            prop_assert!((v - 1.0).abs() <= 1e-4);
        }
    }
}
