//! Synthetic age-encoded volumes: a sphere whose outer shell thins and whose
//! central cavity widens linearly with age, plus Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::Volume;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("phantom configuration error: {0}")]
    Config(String),
    #[error("age {age} outside the phantom range [{min}, {max}]")]
    AgeOutOfRange { age: f64, min: f64, max: f64 },
}

/// Where the age-dependent geometry is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignalRegion {
    #[default]
    Whole,
    /// Octant `o` in `0..8`; bit 0/1/2 select the upper half along x/y/z.
    /// Outside it the geometry is frozen at the mid-range age.
    Octant(u8),
}

impl SignalRegion {
    pub fn contains(&self, extent: usize, x: usize, y: usize, z: usize) -> bool {
        match *self {
            SignalRegion::Whole => true,
            SignalRegion::Octant(o) => octant_of(extent, x, y, z) == o,
        }
    }
}

/// Octant index of a voxel in a cube of side `extent`.
pub fn octant_of(extent: usize, x: usize, y: usize, z: usize) -> u8 {
    let half = extent / 2;
    (x >= half) as u8 | ((y >= half) as u8) << 1 | ((z >= half) as u8) << 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// Cube side in voxels.
    pub extent: usize,
    pub shell_intensity: f32,
    pub interior_intensity: f32,
    pub cavity_intensity: f32,
    pub background: f32,
    /// Shell thickness in voxels at `age_min` and `age_max`.
    pub thickness_young: f64,
    pub thickness_old: f64,
    /// Cavity radius as a fraction of `extent` at `age_min` and `age_max`.
    pub cavity_young: f64,
    pub cavity_old: f64,
    /// Outer radius as a fraction of `extent`.
    pub radius: f64,
    pub age_min: f64,
    pub age_max: f64,
    pub noise_sigma: f64,
    pub signal: SignalRegion,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            extent: 32,
            shell_intensity: 0.8,
            interior_intensity: 0.6,
            cavity_intensity: 0.1,
            background: 0.0,
            thickness_young: 4.0,
            thickness_old: 1.5,
            cavity_young: 0.05,
            cavity_old: 0.15,
            radius: 0.45,
            age_min: 18.0,
            age_max: 97.0,
            noise_sigma: 0.02,
            signal: SignalRegion::Whole,
        }
    }
}

impl PhantomSpec {
    fn position(&self, age: f64) -> f64 {
        (age - self.age_min) / (self.age_max - self.age_min)
    }

    pub fn outer_radius(&self) -> f64 {
        self.radius * self.extent as f64
    }

    pub fn shell_thickness(&self, age: f64) -> f64 {
        self.thickness_young + (self.thickness_old - self.thickness_young) * self.position(age)
    }

    pub fn cavity_radius(&self, age: f64) -> f64 {
        self.extent as f64 * (self.cavity_young + (self.cavity_old - self.cavity_young) * self.position(age))
    }

    pub fn reference_age(&self) -> f64 {
        0.5 * (self.age_min + self.age_max)
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::Config(m));
        if self.extent < 4 {
            return bad(format!("extent {} is too small", self.extent));
        }
        if !(self.age_max > self.age_min) {
            return bad("age_max must exceed age_min".into());
        }
        if !(self.thickness_young > self.thickness_old && self.thickness_old > 0.0) {
            return bad("shell thickness must be positive and strictly decreasing with age".into());
        }
        if !(self.cavity_old > self.cavity_young && self.cavity_young > 0.0) {
            return bad("cavity radius must be positive and strictly increasing with age".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be nonnegative".into());
        }
        let r = self.outer_radius();
        if r + 0.5 > self.extent as f64 / 2.0 {
            return bad(format!("outer radius {r} does not fit a {}-voxel cube", self.extent));
        }
        for age in [self.age_min, self.age_max] {
            let inner = r - self.shell_thickness(age);
            let cavity = self.cavity_radius(age);
            if cavity >= inner {
                return bad(format!(
                    "at age {age} the cavity radius {cavity:.2} reaches the shell (inner radius {inner:.2})"
                ));
            }
        }
        Ok(())
    }
}

/// Fraction of the unit voxel around distance `d` lying inside radius `r`.
#[inline]
fn coverage(r: f64, d: f64) -> f64 {
    (r - d + 0.5).clamp(0.0, 1.0)
}

/// Noise-free phantom value at distance `d` from the centre for a given age.
fn profile(spec: &PhantomSpec, age: f64, d: f64) -> f64 {
    let r = spec.outer_radius();
    let inner = r - spec.shell_thickness(age);
    let cavity = spec.cavity_radius(age);
    spec.background as f64
        + (spec.shell_intensity - spec.background) as f64 * coverage(r, d)
        + (spec.interior_intensity - spec.shell_intensity) as f64 * coverage(inner, d)
        + (spec.cavity_intensity - spec.interior_intensity) as f64 * coverage(cavity, d)
}

/// Generates the phantom for `age`; deterministic in `(age, spec, seed)`.
pub fn generate_phantom(age: f64, spec: &PhantomSpec, seed: u64) -> Result<Volume, PhantomError> {
    spec.validate()?;
    if !(age >= spec.age_min && age <= spec.age_max) {
        return Err(PhantomError::AgeOutOfRange { age, min: spec.age_min, max: spec.age_max });
    }
    let n = spec.extent;
    let centre = (n as f64 - 1.0) / 2.0;
    let reference = spec.reference_age();
    let sigma = spec.noise_sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let (lo, hi) = (-3.0 * sigma, 1.0 + 3.0 * sigma);
    let mut values = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let d = ((x as f64 - centre).powi(2) + (y as f64 - centre).powi(2) + (z as f64 - centre).powi(2)).sqrt();
                let a = if spec.signal.contains(n, x, y, z) { age } else { reference };
                let mut v = profile(spec, a, d);
                if sigma > 0.0 {
                    v = (v + noise.sample(&mut rng)).clamp(lo, hi);
                }
                values.push(v as f32);
            }
        }
    }
    Ok(Volume::new([n, n, n], [1.0; 3], values).expect("finite phantom values"))
}

/// Voxels of a noise-free phantom whose value is nearer the shell intensity
/// than the interior intensity.
pub fn shell_voxel_count(volume: &Volume, spec: &PhantomSpec) -> usize {
    let cut = 0.5 * (spec.shell_intensity + spec.interior_intensity);
    volume.values().iter().filter(|&&v| v > cut).count()
}
