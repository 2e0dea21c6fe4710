//! Single-op forward helpers over tensors, for callers that do not need a tape.

use super::{BatchStats, EngineError, Graph, Real, Tensor};

pub fn conv_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, EngineError> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let k = g.input(kernel.clone());
    let b = bias.map(|b| g.input(b.clone()));
    let out = g.conv(x, k, b, stride, padding)?;
    Ok(g.value(out).clone())
}

pub fn maxpool_forward<T: Real>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>, EngineError> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let out = g.max_pool(x, window, stride)?;
    Ok(g.value(out).clone())
}

/// Statistics used for inference-mode normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], variance: vec![1.0; channels] }
    }

    /// Exponential update keeping `momentum` of the previous value.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, &b) in self.variance.iter_mut().zip(&batch.variance) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Training,
    Inference,
}

/// Batch normalization over axis 1. In training mode the running statistics
/// are updated in place.
pub fn batchnorm_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats,
    mode: NormMode,
    eps: f64,
) -> Result<Tensor<T>, EngineError> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let ga = g.input(gamma.clone());
    let be = g.input(beta.clone());
    let out = match mode {
        NormMode::Training => {
            let (out, stats) = g.batch_norm_train(x, ga, be, eps)?;
            running.update(&stats, BN_MOMENTUM);
            out
        }
        NormMode::Inference => g.batch_norm_infer(x, ga, be, &running.mean, &running.variance, eps)?,
    };
    Ok(g.value(out).clone())
}

pub fn weighted_mae_loss<T: Real>(pred: &[T], target: &[T], weights: Option<&[T]>) -> Result<T, EngineError> {
    let mut g = Graph::new();
    let p = g.input(Tensor::new(vec![pred.len().max(1)], pred.to_vec())?);
    let loss = g.weighted_mae(p, target, weights)?;
    Ok(g.value(loss).data()[0])
}
