//! Localization experiments: 2D slice-slab sweeps and region-masked 3D
//! training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Tensor;
use crate::model::{mean_absolute_error, predict_samples, train, ModelError, Network, NetworkSpec, Sample, TrainConfig};
use crate::preprocess::{PreprocessError, Volume};

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("structural error: {0}")]
    Structural(String),
    #[error("region mask `{0}` selects no voxels")]
    EmptyMask(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Volume(#[from] PreprocessError),
}

pub type Result<T> = std::result::Result<T, AblationError>;

/// Display cap for swept MAE values.
pub const PLOT_CAP: f64 = 10.0;

pub const WHOLE_BRAIN: &str = "whole-brain";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

impl FromStr for Axis {
    type Err = AblationError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(AblationError::Config(format!("unknown axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub volume: Volume,
    pub age: f64,
    pub subject_id: String,
}

/// Fixed train/validation/test partition shared by every ablation run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationData {
    pub train: Vec<LabeledVolume>,
    pub val: Vec<LabeledVolume>,
    pub test: Vec<LabeledVolume>,
}

impl AblationData {
    fn extents(&self) -> Result<[usize; 3]> {
        let first = self
            .train
            .first()
            .ok_or_else(|| AblationError::Structural("training split is empty".into()))?;
        let e = first.volume.extents();
        let all = self.train.iter().chain(&self.val).chain(&self.test);
        if let Some(v) = all.clone().find(|v| v.volume.extents() != e) {
            return Err(AblationError::Structural(format!(
                "volume {} has extents {:?}, expected {e:?}",
                v.subject_id,
                v.volume.extents()
            )));
        }
        if self.val.is_empty() || self.test.is_empty() {
            return Err(AblationError::Structural("validation and test splits must be non-empty".into()));
        }
        Ok(e)
    }
}

/// Three adjacent slices `center-1..=center+1` across `axis` as a
/// `[3, a, b]` tensor, where `(a, b)` are the remaining axes in z, y, x order.
pub fn slab(volume: &Volume, axis: Axis, center: usize) -> Result<Tensor<f32>> {
    let [dx, dy, dz] = volume.extents();
    let extent = volume.extents()[axis.index()];
    if extent < 3 || center == 0 || center + 1 >= extent {
        return Err(AblationError::Structural(format!(
            "slice centre {center} invalid for extent {extent} along {axis}"
        )));
    }
    let (a, b) = match axis {
        Axis::X => (dz, dy),
        Axis::Y => (dz, dx),
        Axis::Z => (dy, dx),
    };
    let mut data = Vec::with_capacity(3 * a * b);
    for s in center - 1..=center + 1 {
        for i in 0..a {
            for j in 0..b {
                let v = match axis {
                    Axis::X => volume.get(s, j, i),
                    Axis::Y => volume.get(j, s, i),
                    Axis::Z => volume.get(j, i, s),
                };
                data.push(v);
            }
        }
    }
    Ok(Tensor::new(vec![3, a, b], data).expect("slab shape matches data"))
}

/// Valid slab centres `1..=extent-2` taken every `stride`.
pub fn slice_centers(extent: usize, stride: usize) -> Vec<usize> {
    if extent < 3 {
        return Vec::new();
    }
    (1..=extent - 2).step_by(stride.max(1)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepNetwork {
    pub num_stages: usize,
    pub base_features: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SliceSweepResult {
    pub axis: Axis,
    pub centers: Vec<usize>,
    pub mae: Vec<f64>,
    /// Centre with the lowest MAE (earliest on ties).
    pub argmin: usize,
}

impl SliceSweepResult {
    pub fn capped(&self, cap: f64) -> Vec<f64> {
        self.mae.iter().map(|&m| m.min(cap)).collect()
    }
}

fn to_samples(items: &[LabeledVolume], f: impl Fn(&Volume) -> Result<Tensor<f32>>) -> Result<Vec<Sample>> {
    items.iter().map(|v| Ok(Sample::new(f(&v.volume)?, v.age as f32, v.subject_id.clone()))).collect()
}

fn train_and_test(spec: NetworkSpec, train_set: &[Sample], val: &[Sample], test: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    let net = Network::build(spec)?;
    let (ckpt, _) = train(net, train_set, val, cfg)?;
    let pred = predict_samples(&ckpt.network, test, 16)?;
    Ok(mean_absolute_error(&pred, test))
}

/// Trains one 2D network per slab position and records its test MAE.
pub fn slice_sweep(data: &AblationData, axis: Axis, stride: usize, net: SweepNetwork, cfg: &TrainConfig) -> Result<SliceSweepResult> {
    let extents = data.extents()?;
    let extent = extents[axis.index()];
    if extent < 3 {
        return Err(AblationError::Structural(format!("extent {extent} along {axis} is below 3")));
    }
    let plane = match axis {
        Axis::X => [extents[2], extents[1]],
        Axis::Y => [extents[2], extents[0]],
        Axis::Z => [extents[1], extents[0]],
    };
    let spec = NetworkSpec::slices(plane, net.num_stages, net.base_features, net.seed);
    spec.validate()?;
    let centers = slice_centers(extent, stride);
    let mut mae = Vec::with_capacity(centers.len());
    for &c in &centers {
        let cut = |v: &Volume| slab(v, axis, c);
        let (tr, va, te) = (to_samples(&data.train, cut)?, to_samples(&data.val, cut)?, to_samples(&data.test, cut)?);
        let m = train_and_test(spec.clone(), &tr, &va, &te, cfg)?;
        log::info!("slice sweep {axis}={c}: MAE {m:.3}");
        mae.push(m);
    }
    let best = mae
        .iter()
        .enumerate()
        .fold(None, |b: Option<(usize, f64)>, (i, &m)| match b {
            Some((_, bm)) if !(m < bm) => b,
            _ => Some((i, m)),
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(SliceSweepResult { axis, argmin: centers[best], centers, mae })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub name: String,
    extents: [usize; 3],
    mask: Vec<bool>,
}

impl RegionMask {
    pub fn new(name: impl Into<String>, extents: [usize; 3], mask: Vec<bool>) -> Result<Self> {
        let name = name.into();
        if mask.len() != extents.iter().product::<usize>() {
            return Err(AblationError::Structural(format!(
                "mask `{name}` has {} voxels for extents {extents:?}",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(AblationError::EmptyMask(name));
        }
        Ok(Self { name, extents, mask })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn voxels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// The eight octants of a volume; bit 0/1/2 of the index select the upper
/// half along x/y/z.
pub fn octant_masks(extents: [usize; 3]) -> Vec<RegionMask> {
    let [dx, dy, dz] = extents;
    (0..8u8)
        .map(|o| {
            let mut mask = Vec::with_capacity(dx * dy * dz);
            for z in 0..dz {
                for y in 0..dy {
                    for x in 0..dx {
                        let code = (x >= dx / 2) as u8 | ((y >= dy / 2) as u8) << 1 | ((z >= dz / 2) as u8) << 2;
                        mask.push(code == o);
                    }
                }
            }
            RegionMask::new(format!("octant{o}"), extents, mask).expect("octants of a volume are non-empty")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionResult {
    pub region: String,
    pub mae: f64,
}

/// Trains one 3D network per region on masked inputs, plus a whole-brain row.
pub fn lobe_eval(data: &AblationData, masks: &[RegionMask], spec: &NetworkSpec, cfg: &TrainConfig) -> Result<Vec<RegionResult>> {
    let extents = data.extents()?;
    let [dx, dy, dz] = extents;
    if spec.input_extents != [dz, dy, dx] || spec.input_channels != 1 || spec.spatial_rank != 3 {
        return Err(AblationError::Structural(format!(
            "network expects {:?} with {} channel(s), volumes are {:?}",
            spec.input_extents, spec.input_channels, extents
        )));
    }
    for m in masks {
        if m.extents != extents {
            return Err(AblationError::Structural(format!(
                "mask `{}` has extents {:?}, volumes are {extents:?}",
                m.name, m.extents
            )));
        }
    }
    let mut rows = Vec::with_capacity(masks.len() + 1);
    let whole = |v: &Volume| Ok(v.to_tensor());
    let (tr, va, te) = (to_samples(&data.train, whole)?, to_samples(&data.val, whole)?, to_samples(&data.test, whole)?);
    rows.push(RegionResult { region: WHOLE_BRAIN.into(), mae: train_and_test(spec.clone(), &tr, &va, &te, cfg)? });
    for m in masks {
        let cut = |v: &Volume| Ok(v.masked(&m.mask)?.to_tensor());
        let (tr, va, te) = (to_samples(&data.train, cut)?, to_samples(&data.val, cut)?, to_samples(&data.test, cut)?);
        let mae = train_and_test(spec.clone(), &tr, &va, &te, cfg)?;
        log::info!("region {}: MAE {mae:.3}", m.name);
        rows.push(RegionResult { region: m.name.clone(), mae });
    }
    Ok(rows)
}
