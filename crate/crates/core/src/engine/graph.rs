//! Reverse-mode tape. Every op appends a node holding its forward value and
//! whatever it needs for the backward sweep.

use super::conv::{self, ConvGeometry, PoolGeometry};
use super::{EngineError, Parameter, Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one batch-norm forward pass in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Population variance (denominator = element count).
    pub variance: Vec<f64>,
}

#[derive(Debug)]
enum Op<T> {
    Input { tracked: bool },
    Param(usize),
    Conv { input: NodeId, kernel: NodeId, bias: Option<NodeId>, geom: ConvGeometry },
    Relu { input: NodeId },
    MaxPool { input: NodeId, argmax: Vec<usize> },
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Reshape { input: NodeId },
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    Mae { pred: NodeId, residual_sign: Vec<T>, norm_weights: Vec<T> },
    SumSquares { inputs: Vec<NodeId>, scale: T },
    Add { a: NodeId, b: NodeId },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, NodeId)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a node, `None` when the loss does not depend on it.
    pub fn get(&self, node: NodeId) -> Option<&[T]> {
        self.grads.get(node.0).and_then(|g| g.as_deref())
    }

    /// Writes gradients into the `grad` slot of each parameter registered on the
    /// graph. Parameters that did not influence the loss receive zeros.
    pub fn apply_to(&self, params: &mut [Parameter<T>]) -> Result<(), EngineError> {
        for p in params.iter_mut() {
            let n = p.tensor.numel();
            p.tensor.set_grad(vec![T::zero(); n])?;
        }
        for &(index, node) in &self.params {
            let param = params.get_mut(index).ok_or_else(|| {
                EngineError::Usage(format!("gradient refers to parameter {index} which does not exist"))
            })?;
            if let Some(g) = self.get(node) {
                if g.len() != param.tensor.numel() {
                    return Err(EngineError::Shape(format!(
                        "gradient for `{}` has {} values, parameter has {}",
                        param.name,
                        g.len(),
                        param.tensor.numel()
                    )));
                }
                let slot = param.tensor.grad().map(|s| s.to_vec()).unwrap_or_default();
                let summed = slot.iter().zip(g).map(|(&a, &b)| a + b).collect();
                param.tensor.set_grad(summed)?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e = *e + d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Tensor<T> {
        &self.nodes[node.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, node: NodeId) -> Result<&Tensor<T>, EngineError> {
        self.nodes
            .get(node.0)
            .map(|n| &n.value)
            .ok_or_else(|| EngineError::Usage(format!("node {} is not recorded on this graph", node.0)))
    }

    /// Constant leaf; no gradient is computed for it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input { tracked: false })
    }

    /// Leaf whose gradient is computed and available from [`Gradients::get`].
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input { tracked: true })
    }

    fn wants_grad(&self, node: NodeId) -> bool {
        !matches!(self.nodes[node.0].op, Op::Input { tracked: false })
    }

    /// Registers parameter `index` of a parameter list as a leaf.
    pub fn param(&mut self, params: &[Parameter<T>], index: usize) -> Result<NodeId, EngineError> {
        let p = params
            .get(index)
            .ok_or_else(|| EngineError::Usage(format!("no parameter at index {index}")))?;
        let mut value = p.tensor.clone();
        value.clear_grad();
        Ok(self.push(value, Op::Param(index)))
    }

    pub fn conv(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, EngineError> {
        let x = self.check(input)?;
        let k = self.check(kernel)?;
        let geom = ConvGeometry::new(x.shape(), k.shape(), stride, padding)?;
        let bias_data = match bias {
            Some(b) => {
                let b = self.check(b)?;
                if b.numel() != geom.out_channels {
                    return Err(EngineError::Shape(format!(
                        "bias has {} values for {} output channels",
                        b.numel(),
                        geom.out_channels
                    )));
                }
                Some(b.data())
            }
            None => None,
        };
        let out = conv::conv_forward(&geom, x.data(), k.data(), bias_data);
        let value = Tensor::new(geom.output_shape(), out)?;
        Ok(self.push(value, Op::Conv { input, kernel, bias, geom }))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, EngineError> {
        let x = self.check(input)?;
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Relu { input }))
    }

    pub fn max_pool(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId, EngineError> {
        let x = self.check(input)?;
        let geom = PoolGeometry::new(x.shape(), window, stride)?;
        let (values, argmax) = conv::maxpool_forward(&geom, x.data());
        let value = Tensor::new(geom.output_shape(), values)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }))
    }

    /// Batch normalization over axis 1 using the statistics of this batch.
    pub fn batch_norm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats), EngineError> {
        let x = self.check(input)?;
        let (channels, inner, outer) = channel_layout(x.shape())?;
        let count = inner * outer;
        if count < 2 {
            return Err(EngineError::Shape(format!(
                "training-mode batch norm needs at least 2 values per channel, shape {:?} has {count}",
                x.shape()
            )));
        }
        let mut mean = vec![0.0f64; channels];
        let mut variance = vec![0.0f64; channels];
        for c in 0..channels {
            let mut sum = 0.0;
            for_channel(x.data(), c, channels, inner, outer, |v| sum += v.to_f64_lossy());
            let m = sum / count as f64;
            let mut sq = 0.0;
            for_channel(x.data(), c, channels, inner, outer, |v| {
                let d = v.to_f64_lossy() - m;
                sq += d * d;
            });
            mean[c] = m;
            variance[c] = sq / count as f64;
        }
        let inv_std: Vec<T> = variance.iter().map(|&v| T::from_f64_lossy(1.0 / (v + eps).sqrt())).collect();
        let means: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
        let stats = BatchStats { mean, variance };
        let id = self.normalize(input, gamma, beta, &means, inv_std, true)?;
        Ok((id, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId, EngineError> {
        let means: Vec<T> = running_mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
        let inv_std = running_var.iter().map(|&v| T::from_f64_lossy(1.0 / (v + eps).sqrt())).collect();
        self.normalize(input, gamma, beta, &means, inv_std, false)
    }

    fn normalize(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Result<NodeId, EngineError> {
        let x = self.check(input)?;
        let (channels, inner, outer) = channel_layout(x.shape())?;
        let g = self.check(gamma)?.data();
        let b = self.check(beta)?.data();
        if g.len() != channels || b.len() != channels || mean.len() != channels || inv_std.len() != channels {
            return Err(EngineError::Shape(format!(
                "batch norm over {channels} channels got gamma {}, beta {}, statistics {}",
                g.len(),
                b.len(),
                mean.len()
            )));
        }
        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        for o in 0..outer {
            for c in 0..channels {
                let start = (o * channels + c) * inner;
                for i in start..start + inner {
                    let h = (x.data()[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + b[c];
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats }))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId, EngineError> {
        let value = self.check(input)?.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input }))
    }

    /// `out[n, j] = sum_i in[n, i] * weight[j, i] + bias[j]`; the input is
    /// flattened to `[shape[0], rest]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, EngineError> {
        let x = self.check(input)?;
        let w = self.check(weight)?;
        let b = self.check(bias)?;
        let n = x.shape()[0];
        let features = x.numel() / n;
        if w.rank() != 2 || w.shape()[1] != features || b.numel() != w.shape()[0] {
            return Err(EngineError::Shape(format!(
                "linear layer weight {:?} / bias {:?} incompatible with {features} input features",
                w.shape(),
                b.shape()
            )));
        }
        let outs = w.shape()[0];
        let mut out = Vec::with_capacity(n * outs);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        T::gemm(
            n,
            features,
            outs,
            T::one(),
            x.data(),
            (features as isize, 1),
            w.data(),
            (1, features as isize),
            T::one(),
            &mut out,
            (outs as isize, 1),
        );
        let value = Tensor::new(vec![n, outs], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }))
    }

    /// `sum_i w_i |pred_i - target_i| / sum_i w_i`, unit weights when omitted.
    pub fn weighted_mae(
        &mut self,
        pred: NodeId,
        target: &[T],
        weights: Option<&[T]>,
    ) -> Result<NodeId, EngineError> {
        let p = self.check(pred)?;
        if p.numel() != target.len() {
            return Err(EngineError::Shape(format!(
                "{} predictions for {} targets",
                p.numel(),
                target.len()
            )));
        }
        let n = target.len();
        let raw: Vec<T> = match weights {
            Some(w) if w.len() != n => {
                return Err(EngineError::Shape(format!("{} weights for {n} targets", w.len())));
            }
            Some(w) => {
                if w.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
                    return Err(EngineError::DegenerateWeights("weights must be finite and nonnegative".into()));
                }
                w.to_vec()
            }
            None => vec![T::one(); n],
        };
        let total: T = raw.iter().copied().sum();
        if !(total > T::zero()) {
            return Err(EngineError::DegenerateWeights("weights sum to zero".into()));
        }
        let norm_weights: Vec<T> = raw.iter().map(|&w| w / total).collect();
        let mut loss = T::zero();
        let mut residual_sign = Vec::with_capacity(n);
        for i in 0..n {
            let r = p.data()[i] - target[i];
            loss = loss + norm_weights[i] * r.abs();
            residual_sign.push(if r > T::zero() {
                T::one()
            } else if r < T::zero() {
                -T::one()
            } else {
                T::zero()
            });
        }
        Ok(self.push(Tensor::scalar(loss), Op::Mae { pred, residual_sign, norm_weights }))
    }

    /// `scale * sum of squares` over all values of the given nodes.
    pub fn sum_squares(&mut self, inputs: &[NodeId], scale: T) -> Result<NodeId, EngineError> {
        let mut total = T::zero();
        for &id in inputs {
            total = total + self.check(id)?.data().iter().map(|&v| v * v).sum::<T>();
        }
        Ok(self.push(Tensor::scalar(scale * total), Op::SumSquares { inputs: inputs.to_vec(), scale }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let x = self.check(a)?;
        let y = self.check(b)?;
        if x.shape() != y.shape() {
            return Err(EngineError::Shape(format!("cannot add {:?} and {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&u, &v)| u + v).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, EngineError> {
        if self.nodes.is_empty() {
            return Err(EngineError::Usage("backward called before any forward pass was recorded".into()));
        }
        let root = self.check(loss)?;
        if root.numel() != 1 {
            return Err(EngineError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        self.backward_seeded(loss, vec![T::one()])
    }

    /// Reverse sweep from an arbitrary node with an explicit upstream gradient.
    pub fn backward_seeded(&self, root: NodeId, seed: Vec<T>) -> Result<Gradients<T>, EngineError> {
        let value = self.check(root)?;
        if seed.len() != value.numel() {
            return Err(EngineError::Shape(format!(
                "seed of length {} for node of shape {:?}",
                seed.len(),
                value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        let mut params = Vec::new();
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(p) = node.op {
                params.push((p, NodeId(idx)));
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Input { .. } | Op::Param(_) => {}
            Op::Conv { input, kernel, bias, geom } => {
                let need_input = self.wants_grad(*input);
                let g = conv::conv_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    gout,
                    need_input,
                );
                if need_input {
                    accumulate(&mut grads[input.0], g.input);
                }
                accumulate(&mut grads[kernel.0], g.kernel);
                if let Some(b) = bias {
                    accumulate(&mut grads[b.0], g.bias);
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let d = x.iter().zip(gout).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
                accumulate(&mut grads[input.0], d);
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).numel()];
                for (&src, &g) in argmax.iter().zip(gout) {
                    d[src] = d[src] + g;
                }
                accumulate(&mut grads[input.0], d);
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
                let x = self.value(*input);
                let gam = self.value(*gamma).data();
                let (channels, inner, outer) = channel_layout(x.shape()).expect("validated in forward");
                let count = T::from_usize(inner * outer).expect("count fits");
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for o in 0..outer {
                    for c in 0..channels {
                        let start = (o * channels + c) * inner;
                        for i in start..start + inner {
                            dgamma[c] = dgamma[c] + gout[i] * xhat[i];
                            dbeta[c] = dbeta[c] + gout[i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); x.numel()];
                for o in 0..outer {
                    for c in 0..channels {
                        let start = (o * channels + c) * inner;
                        let scale = gam[c] * inv_std[c];
                        for i in start..start + inner {
                            dx[i] = if *batch_stats {
                                scale * (gout[i] - dbeta[c] / count - xhat[i] * dgamma[c] / count)
                            } else {
                                scale * gout[i]
                            };
                        }
                    }
                }
                accumulate(&mut grads[input.0], dx);
                accumulate(&mut grads[gamma.0], dgamma);
                accumulate(&mut grads[beta.0], dbeta);
            }
            Op::Reshape { input } => accumulate(&mut grads[input.0], gout.to_vec()),
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let n = x.shape()[0];
                let features = x.numel() / n;
                let outs = w.shape()[0];
                let mut dw = vec![T::zero(); w.numel()];
                // dW[outs, features] = gout^T[outs, n] * x[n, features]
                T::gemm(
                    outs,
                    n,
                    features,
                    T::one(),
                    gout,
                    (1, outs as isize),
                    x.data(),
                    (features as isize, 1),
                    T::zero(),
                    &mut dw,
                    (features as isize, 1),
                );
                let mut db = vec![T::zero(); outs];
                for row in gout.chunks(outs) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d = *d + g;
                    }
                }
                if self.wants_grad(*input) {
                    let mut dx = vec![T::zero(); x.numel()];
                    T::gemm(
                        n,
                        outs,
                        features,
                        T::one(),
                        gout,
                        (outs as isize, 1),
                        w.data(),
                        (features as isize, 1),
                        T::zero(),
                        &mut dx,
                        (features as isize, 1),
                    );
                    accumulate(&mut grads[input.0], dx);
                }
                accumulate(&mut grads[weight.0], dw);
                accumulate(&mut grads[bias.0], db);
            }
            Op::Mae { pred, residual_sign, norm_weights } => {
                let g = gout[0];
                let d = residual_sign.iter().zip(norm_weights).map(|(&s, &w)| g * s * w).collect();
                accumulate(&mut grads[pred.0], d);
            }
            Op::SumSquares { inputs, scale } => {
                let two = T::one() + T::one();
                for id in inputs {
                    let d = self.value(*id).data().iter().map(|&v| gout[0] * two * *scale * v).collect();
                    accumulate(&mut grads[id.0], d);
                }
            }
            Op::Add { a, b } => {
                accumulate(&mut grads[a.0], gout.to_vec());
                accumulate(&mut grads[b.0], gout.to_vec());
            }
        }
    }
}

/// (channels, values per channel per outer index, outer count) for axis-1 channels.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize), EngineError> {
    if shape.len() < 2 {
        return Err(EngineError::Shape(format!("batch norm needs a channel axis, got shape {shape:?}")));
    }
    let channels = shape[1];
    let inner: usize = shape[2..].iter().product();
    Ok((channels, inner, shape[0]))
}

fn for_channel<T: Real>(data: &[T], c: usize, channels: usize, inner: usize, outer: usize, mut f: impl FnMut(T)) {
    for o in 0..outer {
        let start = (o * channels + c) * inner;
        for &v in &data[start..start + inner] {
            f(v);
        }
    }
}
