//! Brain-age estimation from volumetric images: a small convolutional
//! regression engine, cohort construction, synthetic phantoms, resampling,
//! activation maps, ablation harnesses and the accompanying statistics.

pub mod ablation;
pub mod cohort;
pub mod engine;
pub mod model;
pub mod phantom;
pub mod preprocess;
pub mod saliency;
pub mod stats;

mod linalg;
