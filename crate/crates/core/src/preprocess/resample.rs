use super::{PreprocessError, Volume};
use crate::linalg;

/// 4x4 homogeneous transform in physical (millimetre) coordinates, mapping
/// source space onto target space. Voxel `i` sits at `i * spacing`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub matrix: [[f64; 4]; 4],
}

impl Affine {
    pub fn identity() -> Self {
        let mut matrix = [[0.0; 4]; 4];
        for (i, row) in matrix.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { matrix }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut a = Self::identity();
        for (i, &v) in t.iter().enumerate() {
            a.matrix[i][3] = v;
        }
        a
    }

    /// Linear part `m` followed by translation `t`.
    pub fn from_parts(m: [[f64; 3]; 3], t: [f64; 3]) -> Self {
        let mut a = Self::identity();
        for i in 0..3 {
            a.matrix[i][..3].copy_from_slice(&m[i]);
            a.matrix[i][3] = t[i];
        }
        a
    }

    /// Rotation by `angle` radians about the z axis through `center`.
    pub fn rotation_z(angle: f64, center: [f64; 3]) -> Self {
        let (s, c) = angle.sin_cos();
        let m = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let mut t = [0.0; 3];
        for i in 0..3 {
            t[i] = center[i] - (0..3).map(|j| m[i][j] * center[j]).sum::<f64>();
        }
        Self::from_parts(m, t)
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.matrix[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(PreprocessError::Structural(format!(
                "affine last row must be (0, 0, 0, 1), got {:?}",
                self.matrix[3]
            )));
        }
        let m = &self.matrix;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if !(det.abs() > 1e-12) {
            return Err(PreprocessError::Structural(format!("affine is singular (det {det:e})")));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Result<Self, PreprocessError> {
        self.validate()?;
        let flat: Vec<f64> = self.matrix.iter().flatten().copied().collect();
        let inv = linalg::invert(&flat, 4, 1e-15)
            .ok_or_else(|| PreprocessError::Structural("affine is singular".into()))?;
        let mut matrix = [[0.0; 4]; 4];
        for i in 0..4 {
            matrix[i].copy_from_slice(&inv[i * 4..i * 4 + 4]);
        }
        matrix[3] = [0.0, 0.0, 0.0, 1.0];
        Ok(Self { matrix })
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [0, 1, 2].map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3])
    }
}

/// Trilinear interpolation at continuous voxel coordinates; zero outside the
/// field `[0, extent - 1]` on any axis.
pub fn trilinear_sample(volume: &Volume, p: [f64; 3]) -> f64 {
    const EDGE: f64 = 1e-9;
    let e = volume.extents();
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let max = (e[a] - 1) as f64;
        if !(p[a] >= -EDGE && p[a] <= max + EDGE) {
            return 0.0;
        }
        let c = p[a].clamp(0.0, max);
        let f = c.floor();
        base[a] = f as usize;
        frac[a] = c - f;
        if base[a] == e[a] - 1 {
            frac[a] = 0.0;
        }
    }
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let hi = corner >> a & 1 == 1;
            w *= if hi { frac[a] } else { 1.0 - frac[a] };
            idx[a] = base[a] + hi as usize;
        }
        if w != 0.0 {
            acc += w * volume.get(idx[0], idx[1], idx[2]) as f64;
        }
    }
    acc
}

/// Resamples `volume` onto an `out_extents` grid (same spacing) after moving it
/// by `affine`: each output voxel reads the source at `affine^-1 * position`.
pub fn affine_resample(volume: &Volume, affine: &Affine, out_extents: [usize; 3]) -> Result<Volume, PreprocessError> {
    let inv = affine.inverse()?;
    let spacing = volume.spacing();
    let mut out = Volume::new(out_extents, spacing, vec![0.0; out_extents.iter().product()])?;
    let [dx, dy, dz] = out_extents;
    let values = out.values_mut();
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let phys = [x as f64 * spacing[0] as f64, y as f64 * spacing[1] as f64, z as f64 * spacing[2] as f64];
                let src = inv.apply(phys);
                let vox = [0, 1, 2].map(|a| src[a] / spacing[a] as f64);
                values[x + dx * (y + dy * z)] = trilinear_sample(volume, vox) as f32;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeReport {
    pub mean: f64,
    pub std: f64,
    /// Set when the statistics region is constant; the output is all zeros.
    pub degenerate: bool,
}

/// Z-scores the volume with the mean and population standard deviation of the
/// voxels in `mask` (explicit argument, else the volume's own mask, else all).
pub fn normalize_intensity(volume: &Volume, mask: Option<&[bool]>) -> Result<(Volume, NormalizeReport), PreprocessError> {
    let mask = mask.or(volume.mask());
    if let Some(m) = mask {
        if m.len() != volume.len() {
            return Err(PreprocessError::Structural(format!(
                "mask has {} voxels, volume has {}",
                m.len(),
                volume.len()
            )));
        }
        if !m.iter().any(|&b| b) {
            return Err(PreprocessError::Structural("normalization mask is empty".into()));
        }
    }
    let selected = || volume.values().iter().enumerate().filter(|(i, _)| mask.is_none_or(|m| m[*i]));
    let count = selected().count() as f64;
    let mean = selected().map(|(_, &v)| v as f64).sum::<f64>() / count;
    let var = selected().map(|(_, &v)| (v as f64 - mean).powi(2)).sum::<f64>() / count;
    let std = var.sqrt();
    let degenerate = !(std > 1e-12 * mean.abs().max(1.0));
    let mut out = volume.clone();
    for v in out.values_mut() {
        *v = if degenerate { 0.0 } else { ((*v as f64 - mean) / std) as f32 };
    }
    Ok((out, NormalizeReport { mean, std, degenerate }))
}
