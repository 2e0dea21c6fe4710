mod analysis;
mod cohort;
mod model;

pub use analysis::{ablate_lobes, ablate_slices, saliency_group, saliency_map, stats_assoc, stats_retest};
pub use cohort::{cohort_balance, cohort_split, cohort_weights, phantom_gen};
pub use model::{eval, predict, train};
