use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::engine::ops::{NormMode, RunningStats, BN_EPS, BN_MOMENTUM};
use crate::engine::{BatchStats, Graph, NodeId, Parameter, Real, Tensor};

/// Architecture of the staged VGG-style regressor.
///
/// Each stage is conv+ReLU, conv+BN+ReLU, then 2x max pooling; the final
/// feature map is flattened into one linear output unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// 2 for slice models, 3 for volume models.
    pub spatial_rank: usize,
    pub num_stages: usize,
    pub base_features: usize,
    pub feature_growth: usize,
    /// Kernel extent per spatial axis.
    pub kernel: usize,
    pub input_channels: usize,
    /// Spatial extents in tensor axis order (slowest first).
    pub input_extents: Vec<usize>,
    pub seed: u64,
}

impl NetworkSpec {
    /// Five stages, 16 base features, 182x218x182 inputs.
    pub fn full_size() -> Self {
        Self {
            spatial_rank: 3,
            num_stages: 5,
            base_features: 16,
            feature_growth: 2,
            kernel: 3,
            input_channels: 1,
            input_extents: vec![182, 218, 182],
            seed: 0,
        }
    }

    /// Desk-scale default: three stages on 32^3 inputs.
    pub fn desk() -> Self {
        Self { num_stages: 3, input_extents: vec![32, 32, 32], ..Self::full_size() }
    }

    /// 2D variant taking three adjacent slices as channels.
    pub fn slices(extents: [usize; 2], num_stages: usize, base_features: usize, seed: u64) -> Self {
        Self {
            spatial_rank: 2,
            num_stages,
            base_features,
            feature_growth: 2,
            kernel: 3,
            input_channels: 3,
            input_extents: extents.to_vec(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if !(self.spatial_rank == 2 || self.spatial_rank == 3) {
            return bad(format!("spatial_rank must be 2 or 3, got {}", self.spatial_rank));
        }
        if self.input_extents.len() != self.spatial_rank {
            return bad(format!(
                "input_extents {:?} must have {} entries",
                self.input_extents, self.spatial_rank
            ));
        }
        if self.num_stages == 0 || self.base_features == 0 || self.feature_growth == 0 || self.input_channels == 0 {
            return bad("num_stages, base_features, feature_growth and input_channels must be positive".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel extent must be odd, got {}", self.kernel));
        }
        for (axis, &e) in self.input_extents.iter().enumerate() {
            let mut extent = e;
            for stage in 1..=self.num_stages {
                if extent < 2 {
                    return bad(format!(
                        "axis {axis} collapses to extent {extent} before pooling in stage {stage} (input {e})"
                    ));
                }
                extent /= 2;
            }
        }
        Ok(())
    }

    /// Feature count of stage `s` (1-based): `base * growth^(s-1)`.
    pub fn stage_features(&self) -> Vec<usize> {
        (0..self.num_stages).map(|s| self.base_features * self.feature_growth.pow(s as u32)).collect()
    }

    /// Spatial extents entering stage `s` (0-based), and after the last pool at index `num_stages`.
    pub fn stage_extents(&self) -> Vec<Vec<usize>> {
        let mut out = vec![self.input_extents.clone()];
        for s in 0..self.num_stages {
            out.push(out[s].iter().map(|&e| e / 2).collect());
        }
        out
    }

    pub fn flat_features(&self) -> usize {
        let last = self.stage_extents().pop().expect("at least the input entry");
        last.iter().product::<usize>() * self.stage_features().last().copied().unwrap_or(0)
    }

    /// Parameter shapes in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>, bool)> {
        let k = vec![self.kernel; self.spatial_rank];
        let mut shapes = Vec::new();
        let mut cin = self.input_channels;
        for (s, &f) in self.stage_features().iter().enumerate() {
            let name = |part: &str| format!("stage{}.{part}", s + 1);
            let kshape = |ci: usize| [vec![f, ci], k.clone()].concat();
            shapes.push((name("conv1.weight"), kshape(cin), true));
            shapes.push((name("conv1.bias"), vec![f], false));
            shapes.push((name("conv2.weight"), kshape(f), true));
            shapes.push((name("conv2.bias"), vec![f], false));
            shapes.push((name("bn.gamma"), vec![f], false));
            shapes.push((name("bn.beta"), vec![f], false));
            cin = f;
        }
        shapes.push(("fc.weight".into(), vec![1, self.flat_features()], true));
        shapes.push(("fc.bias".into(), vec![1], false));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    /// Output shape of every named layer for a batch of `batch` inputs.
    pub fn layer_shapes(&self, batch: usize) -> Vec<(String, Vec<usize>)> {
        let extents = self.stage_extents();
        let mut out = Vec::new();
        for (s, &f) in self.stage_features().iter().enumerate() {
            let at = |e: &Vec<usize>| [vec![batch, f], e.clone()].concat();
            out.push((format!("stage{}.conv1", s + 1), at(&extents[s])));
            out.push((format!("stage{}.conv2", s + 1), at(&extents[s])));
            out.push((format!("stage{}.pool", s + 1), at(&extents[s + 1])));
        }
        out.push(("fc".into(), vec![batch, 1]));
        out
    }

    /// Name of the last convolutional feature map.
    pub fn last_conv_layer(&self) -> String {
        format!("stage{}.conv2", self.num_stages)
    }

    /// Name of the last pooled feature map, the input of the linear head and
    /// the default activation-map layer.
    pub fn last_feature_layer(&self) -> String {
        format!("stage{}.pool", self.num_stages)
    }
}

/// Named node recorded during a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerTap {
    pub name: String,
    pub node: NodeId,
}

/// Nodes produced by [`Network::forward`].
#[derive(Debug)]
pub struct Forward {
    /// `[batch, 1]` age predictions.
    pub output: NodeId,
    pub layers: Vec<LayerTap>,
    pub params: Vec<NodeId>,
    /// Batch statistics per stage, empty in inference mode.
    pub batch_stats: Vec<BatchStats>,
}

impl Forward {
    pub fn layer(&self, name: &str) -> Option<NodeId> {
        self.layers.iter().find(|t| t.name == name).map(|t| t.node)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real = f32> {
    pub spec: NetworkSpec,
    pub params: Vec<Parameter<T>>,
    /// Batch-norm running statistics, one entry per stage.
    pub running: Vec<RunningStats>,
}

const PARAMS_PER_STAGE: usize = 6;

impl<T: Real> Network<T> {
    /// Builds the network with fan-in scaled uniform weights drawn from `spec.seed`.
    pub fn build(spec: NetworkSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let params = spec
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape, regularized)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if name.ends_with("weight") {
                    let fan_in = (n / shape[0]) as f64;
                    let gain = if name.starts_with("fc") { 3.0 } else { 6.0 };
                    let bound = (gain / fan_in).sqrt();
                    (0..n).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect()
                } else if name.ends_with("gamma") {
                    vec![T::one(); n]
                } else {
                    vec![T::zero(); n]
                };
                let tensor = Tensor::new(shape, data).expect("shape derived from spec");
                Parameter::new(name, tensor, regularized)
            })
            .collect();
        let running = spec.stage_features().iter().map(|&f| RunningStats::new(f)).collect();
        Ok(Self { spec, params, running })
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.iter().map(Parameter::cast).collect(),
            running: self.running.clone(),
        }
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Expected shape of one (unbatched) input: `[channels, spatial..]`.
    pub fn input_shape(&self) -> Vec<usize> {
        [vec![self.spec.input_channels], self.spec.input_extents.clone()].concat()
    }

    /// Records a forward pass of a `[batch, channels, spatial..]` input.
    pub fn forward(&self, graph: &mut Graph<T>, input: Tensor<T>, mode: NormMode) -> Result<Forward, ModelError> {
        let expected = self.input_shape();
        if input.rank() != expected.len() + 1 || input.shape()[1..] != expected[..] {
            return Err(ModelError::Structural(format!(
                "input shape {:?} does not match network input [batch, {:?}]",
                input.shape(),
                expected
            )));
        }
        let batch = input.shape()[0];
        let pad = self.spec.kernel / 2;
        let params = (0..self.params.len())
            .map(|i| graph.param(&self.params, i))
            .collect::<Result<Vec<_>, _>>()?;
        let mut layers = Vec::new();
        let mut batch_stats = Vec::new();
        let mut x = graph.input(input);
        for s in 0..self.spec.num_stages {
            let p = &params[s * PARAMS_PER_STAGE..(s + 1) * PARAMS_PER_STAGE];
            let c1 = graph.conv(x, p[0], Some(p[1]), 1, pad)?;
            let a1 = graph.relu(c1)?;
            layers.push(LayerTap { name: format!("stage{}.conv1", s + 1), node: a1 });
            let c2 = graph.conv(a1, p[2], Some(p[3]), 1, pad)?;
            let n2 = match mode {
                NormMode::Training => {
                    let (n, stats) = graph.batch_norm_train(c2, p[4], p[5], BN_EPS)?;
                    batch_stats.push(stats);
                    n
                }
                NormMode::Inference => {
                    let r = &self.running[s];
                    graph.batch_norm_infer(c2, p[4], p[5], &r.mean, &r.variance, BN_EPS)?
                }
            };
            let a2 = graph.relu(n2)?;
            layers.push(LayerTap { name: format!("stage{}.conv2", s + 1), node: a2 });
            x = graph.max_pool(a2, 2, 2)?;
            layers.push(LayerTap { name: format!("stage{}.pool", s + 1), node: x });
        }
        let fc = PARAMS_PER_STAGE * self.spec.num_stages;
        let flat = graph.reshape(x, vec![batch, self.spec.flat_features()])?;
        let output = graph.linear(flat, params[fc], params[fc + 1])?;
        layers.push(LayerTap { name: "fc".into(), node: output });
        Ok(Forward { output, layers, params, batch_stats })
    }

    /// Folds the batch statistics of a training-mode pass into the running statistics.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s, BN_MOMENTUM);
        }
    }

    /// Regularized weight nodes of a forward pass.
    pub fn regularized_nodes(&self, fwd: &Forward) -> Vec<NodeId> {
        self.params.iter().zip(&fwd.params).filter(|(p, _)| p.regularized).map(|(_, &n)| n).collect()
    }

    /// Inference-mode predictions for a `[batch, channels, spatial..]` input.
    pub fn predict_batch(&self, input: Tensor<T>) -> Result<Vec<T>, ModelError> {
        let mut graph = Graph::new();
        let fwd = self.forward(&mut graph, input, NormMode::Inference)?;
        Ok(graph.value(fwd.output).data().to_vec())
    }
}
