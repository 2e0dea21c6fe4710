use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, ModelError, Network, TrainingMeta};
use crate::engine::ops::NormMode;
use crate::engine::{adam_step, AdamConfig, AdamState, Graph, Tensor};

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[channels, spatial..]`
    pub input: Tensor<f32>,
    pub age: f32,
    /// Loss weight (1 for unweighted training).
    pub weight: f32,
    pub subject_id: String,
}

impl Sample {
    pub fn new(input: Tensor<f32>, age: f32, subject_id: impl Into<String>) -> Self {
        Self { input, age, weight: 1.0, subject_id: subject_id.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Coefficient of `l2 * sum(w^2)` over convolution and fully-connected weights.
    pub l2: f64,
    /// Use per-sample weights in the loss.
    pub weighted: bool,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Start the output bias at the mean training age.
    pub init_output_bias: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Hyperparameters reported for the full-size model.
    pub fn full_size() -> Self {
        Self {
            lr: 2e-5,
            batch_size: 5,
            epochs: 100,
            l2: 1.0,
            weighted: false,
            patience: None,
            init_output_bias: true,
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self { lr: 1e-3, epochs: 20, ..Self::full_size() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(ModelError::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.l2.is_finite() || self.l2 < 0.0 {
            return Err(ModelError::Config(format!("invalid lr {} / l2 {}", self.lr, self.l2)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mae: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn val_mae(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_mae).collect()
    }
}

/// Index of the smallest value; the earliest index wins ties.
pub fn best_epoch(val_mae: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in val_mae.iter().enumerate() {
        match best {
            Some(b) if !(v < val_mae[b]) => {}
            _ if v.is_nan() => {}
            _ => best = Some(i),
        }
    }
    best
}

fn stack_inputs(samples: &[&Sample]) -> Result<Tensor<f32>, ModelError> {
    let inputs: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.input).collect();
    Ok(Tensor::stack(&inputs)?)
}

/// Inference-mode predictions for a list of samples, evaluated in chunks.
pub fn predict_samples(network: &Network<f32>, samples: &[Sample], chunk: usize) -> Result<Vec<f32>, ModelError> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&Sample> = part.iter().collect();
        out.extend(network.predict_batch(stack_inputs(&refs)?)?);
    }
    Ok(out)
}

pub fn mean_absolute_error(pred: &[f32], samples: &[Sample]) -> f64 {
    let total: f64 = pred.iter().zip(samples).map(|(&p, s)| (p as f64 - s.age as f64).abs()).sum();
    total / samples.len().max(1) as f64
}

/// Trains with Adam on weighted MAE and returns the checkpoint of the epoch
/// with the lowest validation MAE, plus the per-epoch history.
pub fn train(
    mut network: Network<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<(Checkpoint, History), ModelError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(ModelError::Config(format!(
            "empty split: {} training and {} validation samples",
            train_set.len(),
            val_set.len()
        )));
    }
    let train_subjects: HashSet<&str> = train_set.iter().map(|s| s.subject_id.as_str()).collect();
    if let Some(s) = val_set.iter().find(|s| train_subjects.contains(s.subject_id.as_str())) {
        return Err(ModelError::Config(format!(
            "subject `{}` appears in both training and validation sets",
            s.subject_id
        )));
    }
    if cfg.l2 >= 0.1 {
        log::warn!(
            "l2 coefficient {} is applied as l2 * sum(w^2); large values dominate the MAE term",
            cfg.l2
        );
    }
    if cfg.init_output_bias {
        let mean = train_set.iter().map(|s| s.age as f64).sum::<f64>() / train_set.len() as f64;
        if let Some(b) = network.param_mut("fc.bias") {
            b.tensor.data_mut()[0] = mean as f32;
        }
    }

    let mut adam = AdamState::new(&network.params, AdamConfig::with_lr(cfg.lr));
    let mut history = History::default();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut abs_sum) = (0.0f64, 0.0f64);
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &train_set[i]).collect();
            let targets: Vec<f32> = samples.iter().map(|s| s.age).collect();
            let weights: Vec<f32> = samples.iter().map(|s| s.weight).collect();
            let mut graph = Graph::new();
            let fwd = network.forward(&mut graph, stack_inputs(&samples)?, NormMode::Training)?;
            let mae = graph.weighted_mae(fwd.output, &targets, cfg.weighted.then_some(&weights[..]))?;
            let loss = if cfg.l2 > 0.0 {
                let reg = graph.sum_squares(&network.regularized_nodes(&fwd), cfg.l2 as f32)?;
                graph.add(mae, reg)?
            } else {
                mae
            };
            let loss_value = graph.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(ModelError::NonFinite { epoch, what: "training loss".into() });
            }
            let preds = graph.value(fwd.output).data();
            abs_sum += preds.iter().zip(&targets).map(|(&p, &t)| (p as f64 - t as f64).abs()).sum::<f64>();
            loss_sum += loss_value * samples.len() as f64;

            let grads = graph.backward(loss)?;
            grads.apply_to(&mut network.params)?;
            adam_step(&mut network.params, &mut adam).map_err(|e| match e {
                crate::engine::EngineError::NonFinite { name } => {
                    ModelError::NonFinite { epoch, what: format!("gradient of `{name}`") }
                }
                other => other.into(),
            })?;
            network.update_running(&fwd.batch_stats);
        }
        for p in network.params.iter_mut() {
            p.tensor.clear_grad();
        }

        let val_pred = predict_samples(&network, val_set, cfg.batch_size)?;
        let val_mae = mean_absolute_error(&val_pred, val_set);
        if !val_mae.is_finite() {
            return Err(ModelError::NonFinite { epoch, what: "validation MAE".into() });
        }
        let n = train_set.len() as f64;
        history.epochs.push(EpochRecord { epoch, train_loss: loss_sum / n, train_mae: abs_sum / n, val_mae });
        log::info!("epoch {epoch}: train MAE {:.3}, validation MAE {val_mae:.3}", abs_sum / n);

        let improved = best.as_ref().is_none_or(|(b, _)| val_mae < *b);
        if improved {
            let ckpt = Checkpoint {
                network: network.clone(),
                adam: Some(adam.clone()),
                meta: TrainingMeta { epoch, val_mae, provenance: None },
            };
            best = Some((val_mae, ckpt));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    let (_, ckpt) = best.expect("at least one epoch ran");
    Ok((ckpt, history))
}
