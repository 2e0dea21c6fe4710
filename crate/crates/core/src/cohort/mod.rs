//! Cohort construction: age binning, uniform balancing by over/undersampling,
//! subject-disjoint stratified splits and inverse-frequency weights.

mod balance;
mod bins;
mod manifest;
mod split;

pub use balance::{balance_cohort, BalanceAction, BalanceOptions, BalancedCohort, BinAudit};
pub use bins::{bin_sessions, inverse_frequency_weights, AgeBins, BinnedSessions, RejectedRecord};
pub use manifest::{read_manifest, read_manifest_from, write_manifest, write_manifest_to, Gender, SessionRecord};
pub use split::{stratified_split, Split, SplitName, SplitRatios, StratumKey, StratumSplit};

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("age bin {0} has no sessions")]
    EmptyBin(String),
    #[error("record {subject}/{session} with age {age} falls outside every age bin")]
    Unbinned { subject: String, session: String, age: f64 },
    #[error("duplicate session {subject}/{session}")]
    Duplicate { subject: String, session: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Orders identifiers with embedded numbers numerically (`ses-2 < ses-10`).
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut x, mut y) = (a.as_bytes(), b.as_bytes());
    loop {
        match (x.first(), y.first()) {
            (None, None) => return a.cmp(b),
            (None, _) => return Ordering::Less,
            (_, None) => return Ordering::Greater,
            (Some(p), Some(q)) if p.is_ascii_digit() && q.is_ascii_digit() => {
                let dp = x.iter().take_while(|c| c.is_ascii_digit()).count();
                let dq = y.iter().take_while(|c| c.is_ascii_digit()).count();
                let (np, nq) = (trim_zeros(&x[..dp]), trim_zeros(&y[..dq]));
                let ord = np.len().cmp(&nq.len()).then_with(|| np.cmp(nq));
                if ord != Ordering::Equal {
                    return ord;
                }
                x = &x[dp..];
                y = &y[dq..];
            }
            (Some(p), Some(q)) => {
                if p != q {
                    return p.cmp(q);
                }
                x = &x[1..];
                y = &y[1..];
            }
        }
    }
}

fn trim_zeros(digits: &[u8]) -> &[u8] {
    let start = digits.iter().position(|&c| c != b'0').unwrap_or(digits.len());
    &digits[start..]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn natural_order() {
        assert_eq!(natural_cmp("ses-2", "ses-10"), Ordering::Less);
        assert_eq!(natural_cmp("ses-02", "ses-2"), Ordering::Less);
        assert_eq!(natural_cmp("a", "b"), Ordering::Less);
        assert_eq!(natural_cmp("v1b", "v1a"), Ordering::Greater);
        assert_eq!(natural_cmp("x", "x"), Ordering::Equal);
    }
}
