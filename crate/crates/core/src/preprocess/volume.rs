use std::fs;
use std::path::Path;

use super::PreprocessError;
use crate::engine::Tensor;

pub const VVOL_MAGIC: &[u8; 4] = b"VVOL";
pub const VVOL_VERSION: u32 = 1;
const VVOL_HEADER_LEN: usize = 4 + 4 + 12 + 12;

/// Scalar 3D field with voxel spacing in millimetres.
///
/// Values are stored x-fastest: `index = x + dx * (y + dy * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f32; 3],
    values: Vec<f32>,
    mask: Option<Vec<bool>>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f32; 3], values: Vec<f32>) -> Result<Self, PreprocessError> {
        if extents.iter().any(|&e| e == 0) {
            return Err(PreprocessError::Structural(format!("extents must be positive, got {extents:?}")));
        }
        let n = extents.iter().product::<usize>();
        if values.len() != n {
            return Err(PreprocessError::Structural(format!(
                "extents {extents:?} need {n} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(PreprocessError::Structural(format!("non-finite value at voxel {i}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(PreprocessError::Structural(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { extents, spacing, values, mask: None })
    }

    pub fn zeros(extents: [usize; 3]) -> Self {
        Self::new(extents, [1.0; 3], vec![0.0; extents.iter().product()]).expect("positive extents")
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self, PreprocessError> {
        if mask.len() != self.values.len() {
            return Err(PreprocessError::Structural(format!(
                "mask has {} voxels, volume has {}",
                mask.len(),
                self.values.len()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.extents[0] * (y + self.extents[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    /// Voxel coordinates of a flat index.
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [dx, dy, _] = self.extents;
        [index % dx, (index / dx) % dy, index / (dx * dy)]
    }

    /// Single-channel network input `[1, dz, dy, dx]`; the memory layout is unchanged.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [dx, dy, dz] = self.extents;
        Tensor::new(vec![1, dz, dy, dx], self.values.clone()).expect("volume is non-empty")
    }

    /// Tensor spatial extents `[dz, dy, dx]` of this volume.
    pub fn tensor_extents(&self) -> Vec<usize> {
        let [dx, dy, dz] = self.extents;
        vec![dz, dy, dx]
    }

    /// Inverse of [`Volume::to_tensor`] for a `[.., dz, dy, dx]` field with unit spacing.
    pub fn from_tensor_field(shape_zyx: [usize; 3], values: Vec<f32>) -> Result<Self, PreprocessError> {
        let [dz, dy, dx] = shape_zyx;
        Self::new([dx, dy, dz], [1.0; 3], values)
    }

    /// Values outside `mask` set to zero.
    pub fn masked(&self, mask: &[bool]) -> Result<Self, PreprocessError> {
        if mask.len() != self.values.len() {
            return Err(PreprocessError::Structural(format!(
                "mask has {} voxels, volume has {}",
                mask.len(),
                self.values.len()
            )));
        }
        let values = self.values.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        Ok(Self { values, ..self.clone() })
    }
}

pub fn encode_vvol(volume: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(VVOL_HEADER_LEN + 4 * volume.len());
    out.extend_from_slice(VVOL_MAGIC);
    out.extend_from_slice(&VVOL_VERSION.to_le_bytes());
    for e in volume.extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for s in volume.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for v in &volume.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_vvol(bytes: &[u8]) -> Result<Volume, PreprocessError> {
    if bytes.len() < 4 || &bytes[..4] != VVOL_MAGIC {
        return Err(PreprocessError::Format("missing VVOL magic".into()));
    }
    if bytes.len() < VVOL_HEADER_LEN {
        return Err(PreprocessError::Corrupt(format!("header truncated at {} bytes", bytes.len())));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let version = u32::from_le_bytes(word(4));
    if version != VVOL_VERSION {
        return Err(PreprocessError::Version(version));
    }
    let extents = [0, 1, 2].map(|a| u32::from_le_bytes(word(8 + 4 * a)) as usize);
    let spacing = [0, 1, 2].map(|a| f32::from_le_bytes(word(20 + 4 * a)));
    let n = extents
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| PreprocessError::Corrupt(format!("extents {extents:?} overflow")))?;
    let payload = &bytes[VVOL_HEADER_LEN..];
    if payload.len() != n.saturating_mul(4) {
        return Err(PreprocessError::Corrupt(format!(
            "payload has {} bytes, extents {extents:?} need {}",
            payload.len(),
            n.saturating_mul(4)
        )));
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Volume::new(extents, spacing, values).map_err(|e| PreprocessError::Corrupt(e.to_string()))
}

pub fn write_vvol(volume: &Volume, path: impl AsRef<Path>) -> Result<(), PreprocessError> {
    fs::write(path, encode_vvol(volume))?;
    Ok(())
}

pub fn read_vvol(path: impl AsRef<Path>) -> Result<Volume, PreprocessError> {
    decode_vvol(&fs::read(path)?)
}
