//! Binary checkpoint: `VAGE`, u32 version, u32 header length, UTF-8 JSON
//! header, then tensor records (u32 name length, name bytes, u32 rank, u32
//! extents, little-endian f32 values). All integers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, Network, NetworkSpec};
use crate::engine::ops::RunningStats;
use crate::engine::{AdamConfig, AdamState, Parameter, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VAGE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub val_mae: f64,
    /// Free-form provenance block (config hash, seeds, versions).
    #[serde(default)]
    pub provenance: Option<serde_json::Value>,
}

/// Trained network with optimizer state and training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub adam: Option<AdamState<f32>>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn untrained(network: Network<f32>) -> Self {
        Self { network, adam: None, meta: TrainingMeta { epoch: 0, val_mae: f64::NAN, provenance: None } }
    }
}

#[derive(Serialize, Deserialize)]
struct RunningBlob {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AdamBlob {
    step_count: u64,
    hyper: AdamConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkSpec,
    meta: TrainingMeta,
    running: Vec<RunningBlob>,
    adam: Option<AdamBlob>,
    records: usize,
}

fn write_record(out: &mut Vec<u8>, name: &str, tensor: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, ModelError> {
    let net = &ckpt.network;
    let mut records: Vec<(String, &Tensor<f32>)> =
        net.params.iter().map(|p| (p.name.clone(), &p.tensor)).collect();
    if let Some(adam) = &ckpt.adam {
        for (p, m) in net.params.iter().zip(&adam.first_moment) {
            records.push((format!("adam.m.{}", p.name), m));
        }
        for (p, v) in net.params.iter().zip(&adam.second_moment) {
            records.push((format!("adam.v.{}", p.name), v));
        }
    }
    let header = Header {
        network: net.spec.clone(),
        meta: ckpt.meta.clone(),
        running: net
            .running
            .iter()
            .map(|r| RunningBlob { mean: r.mean.clone(), variance: r.variance.clone() })
            .collect(),
        adam: ckpt.adam.as_ref().map(|a| AdamBlob { step_count: a.step_count, hyper: a.hyper }),
        records: records.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, tensor) in records {
        write_record(&mut out, &name, tensor);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ModelError::Corrupt(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ModelError::Format("missing VAGE magic".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version(version));
    }
    let len = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| ModelError::Corrupt(format!("header is not valid JSON: {e}")))?;
    let mut tensors = Vec::with_capacity(header.records);
    for i in 0..header.records {
        let what = format!("record {i}");
        let name_len = r.u32(&what)? as usize;
        let name = String::from_utf8(r.take(name_len, &what)?.to_vec())
            .map_err(|_| ModelError::Corrupt(format!("{what} has a non UTF-8 name")))?;
        let rank = r.u32(&what)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&what)? as usize);
        }
        let n = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e)).ok_or_else(|| {
            ModelError::Corrupt(format!("{what} has overflowing extents {shape:?}"))
        })?;
        let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), &what)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| ModelError::Corrupt(format!("{what}: {e}")))?;
        tensors.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let spec = header.network;
    spec.validate()?;
    let expected = spec.parameter_shapes();
    let mut iter = tensors.into_iter();
    let mut params = Vec::with_capacity(expected.len());
    for (name, shape, regularized) in &expected {
        let (got_name, tensor) = iter
            .next()
            .ok_or_else(|| ModelError::Corrupt(format!("missing parameter `{name}`")))?;
        if &got_name != name || tensor.shape() != &shape[..] {
            return Err(ModelError::Corrupt(format!(
                "expected `{name}` {shape:?}, found `{got_name}` {:?}",
                tensor.shape()
            )));
        }
        params.push(Parameter::new(name.clone(), tensor, *regularized));
    }
    let adam = match header.adam {
        Some(blob) => {
            let mut first = Vec::with_capacity(params.len());
            let mut second = Vec::with_capacity(params.len());
            for (prefix, dst) in [("adam.m.", &mut first), ("adam.v.", &mut second)] {
                for p in &params {
                    let (name, t) = iter.next().ok_or_else(|| {
                        ModelError::Corrupt(format!("missing optimizer moment for `{}`", p.name))
                    })?;
                    if name != format!("{prefix}{}", p.name) || t.shape() != p.tensor.shape() {
                        return Err(ModelError::Corrupt(format!("unexpected optimizer record `{name}`")));
                    }
                    dst.push(t);
                }
            }
            Some(AdamState { first_moment: first, second_moment: second, step_count: blob.step_count, hyper: blob.hyper })
        }
        None => None,
    };
    if let Some((name, _)) = iter.next() {
        return Err(ModelError::Corrupt(format!("unexpected record `{name}`")));
    }
    let features = spec.stage_features();
    if header.running.len() != features.len()
        || header.running.iter().zip(&features).any(|(r, &f)| r.mean.len() != f || r.variance.len() != f)
    {
        return Err(ModelError::Corrupt("running statistics do not match the architecture".into()));
    }
    let running = header.running.into_iter().map(|r| RunningStats { mean: r.mean, variance: r.variance }).collect();
    Ok(Checkpoint { network: Network { spec, params, running }, adam, meta: header.meta })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    decode_checkpoint(&fs::read(path)?)
}
