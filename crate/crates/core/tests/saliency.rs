mod common;

use brainage::cohort::AgeBins;
use brainage::engine::ops::NormMode;
use brainage::engine::{Graph, Tensor};
use brainage::model::{Network, NetworkSpec};
use brainage::saliency::*;
use common::{rng, uniform};

/// Gradient of the output with respect to the last block's activation for a
/// one-stage network: the FC weight of the pooled cell, routed to the first
/// maximal voxel of each 2x2x2 window.
fn hand_gradient(act: &[f32], channels: usize, e: usize, fc: &[f32]) -> Vec<f64> {
    let h = e / 2;
    let mut g = vec![0.0; act.len()];
    for k in 0..channels {
        for pz in 0..h {
            for py in 0..h {
                for px in 0..h {
                    let mut best = None;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((k * e + 2 * pz + dz) * e + 2 * py + dy) * e + 2 * px + dx;
                                match best {
                                    Some(b) if act[i] <= act[b] => {}
                                    _ => best = Some(i),
                                }
                            }
                        }
                    }
                    let cell = ((k * h + pz) * h + py) * h + px;
                    g[best.unwrap()] = f64::from(fc[cell]);
                }
            }
        }
    }
    g
}

#[test]
fn raw_map_with_positive_gradients_matches_hand_evaluation() {
    let e = 4;
    let spec = NetworkSpec { num_stages: 1, base_features: 3, input_extents: vec![e; 3], seed: 8, ..NetworkSpec::desk() };
    let mut net = Network::<f32>::build(spec).unwrap();
    let fc = net.param_mut("fc.weight").unwrap();
    fc.tensor.data_mut().iter_mut().for_each(|w| *w = w.abs() + 0.01);
    let fc_w = fc.tensor.data().to_vec();
    let x: Vec<f32> = uniform(&mut rng(2), e * e * e, 0.0, 1.0).into_iter().map(|v| v as f32).collect();
    let input = Tensor::new(vec![1, e, e, e], x).unwrap();

    let mut g = Graph::new();
    let fwd = net.forward(&mut g, input.clone().reshape(vec![1, 1, e, e, e]).unwrap(), NormMode::Inference).unwrap();
    let act = g.value(fwd.layer("stage1.conv2").unwrap()).data().to_vec();
    let grad = hand_gradient(&act, 3, e, &fc_w);
    assert!(grad.iter().all(|&v| v >= 0.0));

    let n = e * e * e;
    let mut expected = vec![0.0f64; n];
    for k in 0..3 {
        let alpha = grad[k * n..(k + 1) * n].iter().sum::<f64>() / n as f64;
        for v in 0..n {
            expected[v] += alpha * f64::from(act[k * n + v]);
        }
    }
    let expected: Vec<f64> = expected.into_iter().map(|v| v.max(0.0)).collect();
    let lo = expected.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = expected.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let map = activation_map(&net, &input, Some("stage1.conv2"), GradientModifier::Raw).unwrap();
    assert!(!map.degenerate);
    for (m, x) in map.volume.values().iter().zip(&expected) {
        assert!((f64::from(*m) - (x - lo) / (hi - lo)).abs() < 1e-5);
    }
}

#[test]
fn maps_of_a_deeper_network_keep_contract() {
    let spec = NetworkSpec { num_stages: 3, base_features: 2, input_extents: vec![16, 16, 16], ..NetworkSpec::desk() };
    let net = Network::<f32>::build(spec).unwrap();
    let x: Vec<f32> = uniform(&mut rng(3), 4096, 0.0, 1.0).into_iter().map(|v| v as f32).collect();
    let input = Tensor::new(vec![1, 16, 16, 16], x).unwrap();
    for m in [GradientModifier::Raw, GradientModifier::Absolute, GradientModifier::SmallValues] {
        let map = activation_map(&net, &input, None, m).unwrap();
        assert_eq!(map.volume.extents(), [16, 16, 16]);
        assert_eq!(map.layer, "stage3.pool");
        assert!(map.volume.values().iter().all(|v| (0.0..=1.0).contains(v)));
        let max = map.volume.values().iter().cloned().fold(0.0f32, f32::max);
        assert!(map.degenerate || max == 1.0);
    }
    let early = activation_map(&net, &input, Some("stage1.conv1"), GradientModifier::Absolute).unwrap();
    assert_eq!(early.layer, "stage1.conv1");
}

#[test]
fn slice_network_maps_are_planar() {
    let spec = NetworkSpec::slices([8, 8], 2, 2, 0);
    let net = Network::<f32>::build(spec).unwrap();
    let x: Vec<f32> = uniform(&mut rng(4), 192, 0.0, 1.0).into_iter().map(|v| v as f32).collect();
    let map = activation_map(&net, &Tensor::new(vec![3, 8, 8], x).unwrap(), None, GradientModifier::Absolute).unwrap();
    assert_eq!(map.volume.extents(), [8, 8, 1]);
}

#[test]
fn group_threshold_default() {
    assert_eq!(DEFAULT_THRESHOLD, 0.8);
    let bins = AgeBins::default();
    let g = group_average(&[], &[], &bins, DEFAULT_THRESHOLD).unwrap();
    assert!(g.groups.is_empty());
    assert_eq!(g.warnings.len(), bins.len());
}

#[test]
fn pooling_gates_pre_pool_gradients() {
    let spec = NetworkSpec { num_stages: 1, base_features: 2, input_extents: vec![4, 4, 4], seed: 5, ..NetworkSpec::desk() };
    let net = Network::<f32>::build(spec).unwrap();
    let x: Vec<f32> = uniform(&mut rng(6), 64, 0.0, 1.0).into_iter().map(|v| v as f32).collect();
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, Tensor::new(vec![1, 1, 4, 4, 4], x).unwrap(), NormMode::Inference).unwrap();
    let grads = g.backward(fwd.output).unwrap();
    let zeros = |layer: &str| grads.get(fwd.layer(layer).unwrap()).unwrap().iter().filter(|&&v| v == 0.0).count();
    // One survivor per 2x2x2 window at most.
    assert!(zeros("stage1.conv2") >= 2 * 64 * 7 / 8);
    assert_eq!(zeros("stage1.pool"), 0);
    assert_eq!(net.spec.last_feature_layer(), "stage1.pool");
}
