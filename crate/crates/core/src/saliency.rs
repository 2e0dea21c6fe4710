//! Gradient-weighted activation maps for the scalar age output, with
//! per-age-group averaging and iso-thresholding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::AgeBins;
use crate::engine::ops::NormMode;
use crate::engine::{Graph, Tensor};
use crate::model::{ModelError, Network};
use crate::preprocess::{PreprocessError, Volume};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("structural error: {0}")]
    Structural(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("unknown gradient modifier `{0}`")]
    UnknownModifier(String),
    #[error("age {0} falls outside every group")]
    Unbinned(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Volume(#[from] PreprocessError),
}

pub type Result<T> = std::result::Result<T, SaliencyError>;

pub const SMALL_VALUES_EPS: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// Elementwise transform applied to layer gradients before channel pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientModifier {
    Raw,
    Absolute,
    /// `1 / (|g| + 1e-5)`.
    #[default]
    SmallValues,
}

impl GradientModifier {
    pub fn id(self) -> &'static str {
        match self {
            GradientModifier::Raw => "raw",
            GradientModifier::Absolute => "absolute",
            GradientModifier::SmallValues => "small-values",
        }
    }

    pub fn apply(self, g: f64) -> f64 {
        match self {
            GradientModifier::Raw => g,
            GradientModifier::Absolute => g.abs(),
            GradientModifier::SmallValues => 1.0 / (g.abs() + SMALL_VALUES_EPS),
        }
    }
}

impl fmt::Display for GradientModifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for GradientModifier {
    type Err = SaliencyError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "absolute" => Ok(Self::Absolute),
            "small-values" => Ok(Self::SmallValues),
            other => Err(SaliencyError::UnknownModifier(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    /// Values in `[0, 1]` at the network input extents.
    pub volume: Volume,
    pub layer: String,
    pub modifier: GradientModifier,
    /// Set when the rectified map has no spread; values are then all zero.
    pub degenerate: bool,
    pub source: Option<String>,
}

/// `ReLU(sum_k alpha_k A_k)` with `alpha_k` the spatial mean of the modified
/// gradient of channel `k`. `activations` and `gradients` are `[K, n]` row-major.
pub fn weighted_combination(activations: &[f64], gradients: &[f64], channels: usize, modifier: GradientModifier) -> Vec<f64> {
    assert_eq!(activations.len(), gradients.len());
    let n = activations.len() / channels;
    let mut out = vec![0.0; n];
    for k in 0..channels {
        let g = &gradients[k * n..(k + 1) * n];
        let alpha = g.iter().map(|&v| modifier.apply(v)).sum::<f64>() / n as f64;
        for (o, a) in out.iter_mut().zip(&activations[k * n..(k + 1) * n]) {
            *o += alpha * a;
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

fn axis_weights(coarse: usize, fine: usize) -> Vec<(usize, usize, f64)> {
    (0..fine)
        .map(|i| {
            let u = ((i as f64 + 0.5) * coarse as f64 / fine as f64 - 0.5).clamp(0.0, (coarse - 1) as f64);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(coarse - 1);
            (lo, hi, u - lo as f64)
        })
        .collect()
}

/// Trilinear resize of a `[z, y, x]` field using voxel-centre alignment and
/// edge clamping.
pub fn upsample_trilinear(field: &[f64], coarse: [usize; 3], fine: [usize; 3]) -> Vec<f64> {
    assert_eq!(field.len(), coarse.iter().product::<usize>());
    let wz = axis_weights(coarse[0], fine[0]);
    let wy = axis_weights(coarse[1], fine[1]);
    let wx = axis_weights(coarse[2], fine[2]);
    let at = |z: usize, y: usize, x: usize| field[(z * coarse[1] + y) * coarse[2] + x];
    let mut out = Vec::with_capacity(fine.iter().product());
    for &(z0, z1, fz) in &wz {
        for &(y0, y1, fy) in &wy {
            for &(x0, x1, fx) in &wx {
                let lerp = |z: usize, y: usize| at(z, y, x0) * (1.0 - fx) + at(z, y, x1) * fx;
                let a = lerp(z0, y0) * (1.0 - fy) + lerp(z0, y1) * fy;
                let b = lerp(z1, y0) * (1.0 - fy) + lerp(z1, y1) * fy;
                out.push(a * (1.0 - fz) + b * fz);
            }
        }
    }
    out
}

/// Min-max scaling to `[0, 1]`; returns `None` when the field is constant.
pub fn min_max_normalize(values: &[f64]) -> Option<Vec<f64>> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if !(span > 0.0) || !span.is_finite() {
        return None;
    }
    Some(values.iter().map(|v| (v - min) / span).collect())
}

fn spatial3(shape: &[usize]) -> [usize; 3] {
    match *shape {
        [h, w] => [1, h, w],
        [d, h, w] => [d, h, w],
        _ => unreachable!("network spatial rank is 2 or 3"),
    }
}

/// Activation map of one `[channels, spatial..]` input at `layer` (default:
/// the pooled output of the last convolution block).
///
/// Gradients at a pre-pooling layer are zero wherever the pool discarded the
/// activation, and `SmallValues` turns those zeros into its largest weights.
pub fn activation_map(
    network: &Network<f32>,
    input: &Tensor<f32>,
    layer: Option<&str>,
    modifier: GradientModifier,
) -> Result<ActivationMap> {
    let layer = layer.map(str::to_string).unwrap_or_else(|| network.spec.last_feature_layer());
    let expected = network.input_shape();
    if input.shape() != expected.as_slice() {
        return Err(SaliencyError::Structural(format!(
            "input shape {:?} does not match network input {:?}",
            input.shape(),
            expected
        )));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let batched = input.clone().reshape(shape).map_err(ModelError::from)?;
    let mut graph = Graph::new();
    let fwd = network.forward(&mut graph, batched, NormMode::Inference)?;
    let node = fwd.layer(&layer).filter(|_| layer != "fc").ok_or_else(|| SaliencyError::UnknownLayer(layer.clone()))?;
    let grads = graph.backward(fwd.output).map_err(ModelError::from)?;
    let act = graph.value(node);
    let channels = act.shape()[1];
    let coarse = spatial3(&act.shape()[2..]);
    let n = act.numel();
    let activations: Vec<f64> = act.data().iter().map(|&v| f64::from(v)).collect();
    let gradients: Vec<f64> = match grads.get(node) {
        Some(g) => g.iter().map(|&v| f64::from(v)).collect(),
        None => vec![0.0; n],
    };
    let combined = weighted_combination(&activations, &gradients, channels, modifier);
    let fine = spatial3(&network.spec.input_extents);
    let up = upsample_trilinear(&combined, coarse, fine);
    let (values, degenerate) = match min_max_normalize(&up) {
        Some(v) => (v, false),
        None => (vec![0.0; up.len()], true),
    };
    let volume = Volume::from_tensor_field(fine, values.into_iter().map(|v| v as f32).collect())?;
    Ok(ActivationMap { volume, layer, modifier, degenerate, source: None })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMap {
    pub bin: usize,
    pub label: String,
    pub count: usize,
    pub mean: Volume,
    /// Voxels with mean value above the threshold.
    pub mask: Vec<bool>,
}

impl GroupMap {
    pub fn voxels_above(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Mean voxel coordinate `[x, y, z]` of the iso-mask.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for (i, _) in self.mask.iter().enumerate().filter(|(_, &m)| m) {
            let c = self.mean.coords(i);
            for d in 0..3 {
                sum[d] += c[d] as f64;
            }
            n += 1;
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAverage {
    pub threshold: f64,
    pub groups: Vec<GroupMap>,
    pub warnings: Vec<String>,
}

/// Mean map per age group and the `> threshold` iso-mask of each mean.
pub fn group_average(maps: &[Volume], ages: &[f64], bins: &AgeBins, threshold: f64) -> Result<GroupAverage> {
    if maps.len() != ages.len() {
        return Err(SaliencyError::Structural(format!("{} maps for {} ages", maps.len(), ages.len())));
    }
    if let Some(first) = maps.first() {
        if let Some(m) = maps.iter().find(|m| m.extents() != first.extents()) {
            return Err(SaliencyError::Structural(format!(
                "map extents differ: {:?} vs {:?}",
                m.extents(),
                first.extents()
            )));
        }
    }
    let mut members: Vec<Vec<&Volume>> = vec![Vec::new(); bins.len()];
    for (m, &a) in maps.iter().zip(ages) {
        members[bins.find(a).ok_or(SaliencyError::Unbinned(a))?].push(m);
    }
    let mut groups = Vec::new();
    let mut warnings = Vec::new();
    for (bin, group) in members.iter().enumerate() {
        if group.is_empty() {
            let msg = format!("age group {} has no maps; omitted", bins.label(bin));
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let n = group[0].len();
        let mut acc = vec![0.0f64; n];
        for m in group {
            acc.iter_mut().zip(m.values()).for_each(|(a, &v)| *a += f64::from(v));
        }
        acc.iter_mut().for_each(|a| *a /= group.len() as f64);
        let mask = acc.iter().map(|&v| v > threshold).collect();
        let mean = Volume::new(group[0].extents(), group[0].spacing(), acc.iter().map(|&v| v as f32).collect())?;
        groups.push(GroupMap { bin, label: bins.label(bin), count: group.len(), mean, mask });
    }
    Ok(GroupAverage { threshold, groups, warnings })
}
