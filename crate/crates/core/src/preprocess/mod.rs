//! Volume container and file format, affine resampling with trilinear
//! interpolation, and intensity normalization.

mod resample;
mod volume;

pub use resample::{affine_resample, normalize_intensity, trilinear_sample, Affine, NormalizeReport};
pub use volume::{decode_vvol, encode_vvol, read_vvol, write_vvol, Volume, VVOL_MAGIC, VVOL_VERSION};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("structural error: {0}")]
    Structural(String),
    #[error("volume format error: {0}")]
    Format(String),
    #[error("unsupported volume version {0}")]
    Version(u32),
    #[error("corrupt volume file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
