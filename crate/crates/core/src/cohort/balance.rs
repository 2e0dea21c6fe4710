use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{natural_cmp, AgeBins, BinnedSessions, CohortError, Gender, SessionRecord};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BalanceOptions {
    /// Per-bin target; defaults to the smallest subject count among the
    /// bins that are not oversample-eligible.
    pub target: Option<usize>,
    /// Oversample-eligible bin indices; defaults to the two oldest bins.
    pub oversample_bins: Option<BTreeSet<usize>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum BalanceAction {
    Kept,
    Undersampled { eligible: usize, kept: usize },
    Oversampled { subjects: usize, sessions: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinAudit {
    pub bin: usize,
    pub label: String,
    pub subjects: usize,
    pub sessions: usize,
    pub selected: usize,
    pub oversample_eligible: bool,
    #[serde(flatten)]
    pub action: BalanceAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancedCohort {
    pub bins: AgeBins,
    /// Selected sessions grouped by bin, each group in (subject, session) order.
    pub per_bin: Vec<Vec<SessionRecord>>,
    pub target: usize,
    pub oversample_bins: BTreeSet<usize>,
    pub audit: Vec<BinAudit>,
}

impl BalancedCohort {
    pub fn counts(&self) -> Vec<usize> {
        self.per_bin.iter().map(Vec::len).collect()
    }

    pub fn selected(&self) -> Vec<SessionRecord> {
        self.per_bin.iter().flatten().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.per_bin.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sessions of one bin keyed by subject, each list in natural session order.
fn by_subject(records: &[SessionRecord]) -> BTreeMap<String, Vec<SessionRecord>> {
    let mut map: BTreeMap<String, Vec<SessionRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.subject_id.clone()).or_default().push(r.clone());
    }
    for sessions in map.values_mut() {
        sessions.sort_by(|a, b| natural_cmp(&a.session_id, &b.session_id));
    }
    map
}

fn bin_rng(seed: u64, bin: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (bin as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Splits `total` across groups proportionally to `sizes` by largest
/// remainder; equal remainders are ordered by a random key.
pub(crate) fn largest_remainder<R: Rng>(sizes: &[usize], total: usize, rng: &mut R) -> Vec<usize> {
    let sum: usize = sizes.iter().sum();
    if sum == 0 {
        return vec![0; sizes.len()];
    }
    let mut quota = Vec::with_capacity(sizes.len());
    let mut rank = Vec::with_capacity(sizes.len());
    for (i, &s) in sizes.iter().enumerate() {
        let num = total * s;
        quota.push(num / sum);
        rank.push((num % sum, rng.random::<u64>(), i));
    }
    let leftover = total - quota.iter().sum::<usize>();
    rank.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, _, i) in rank.iter().take(leftover) {
        quota[i] += 1;
    }
    quota
}

fn undersample(eligible: Vec<SessionRecord>, target: usize, rng: &mut ChaCha8Rng) -> Vec<SessionRecord> {
    let mut strata: BTreeMap<(String, Gender), Vec<SessionRecord>> = BTreeMap::new();
    for r in eligible {
        strata.entry((r.site.clone(), r.gender)).or_default().push(r);
    }
    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
    let quota = largest_remainder(&sizes, target, rng);
    let mut out = Vec::with_capacity(target);
    for (mut members, q) in strata.into_values().zip(quota) {
        members.shuffle(rng);
        members.truncate(q);
        out.extend(members);
    }
    out
}

fn round_robin(subjects: &BTreeMap<String, Vec<SessionRecord>>, target: usize) -> Vec<SessionRecord> {
    let mut out = Vec::new();
    let mut round = 0;
    while out.len() < target {
        let mut any = false;
        for sessions in subjects.values() {
            if let Some(s) = sessions.get(round) {
                any = true;
                out.push(s.clone());
                if out.len() == target {
                    break;
                }
            }
        }
        if !any {
            break;
        }
        round += 1;
    }
    out
}

pub fn balance_cohort(binned: &BinnedSessions, opts: &BalanceOptions) -> Result<BalancedCohort, CohortError> {
    let nbins = binned.bins.len();
    if let Some(b) = binned.members.iter().position(Vec::is_empty) {
        return Err(CohortError::EmptyBin(binned.bins.label(b)));
    }
    let oversample: BTreeSet<usize> = match &opts.oversample_bins {
        Some(set) => {
            if let Some(&b) = set.iter().find(|&&b| b >= nbins) {
                return Err(CohortError::Config(format!("oversample bin {b} out of range (have {nbins} bins)")));
            }
            set.clone()
        }
        None => (nbins.saturating_sub(2)..nbins).collect(),
    };
    let grouped: Vec<_> = binned.members.iter().map(|m| by_subject(m)).collect();
    let target = match opts.target {
        Some(t) => t,
        None => {
            let normal = grouped.iter().enumerate().filter(|(b, _)| !oversample.contains(b));
            let all = grouped.iter().enumerate();
            normal
                .map(|(_, g)| g.len())
                .min()
                .or_else(|| all.map(|(_, g)| g.len()).min())
                .unwrap_or(0)
        }
    };
    if target < 1 {
        return Err(CohortError::Config(format!("balancing target must be at least 1, got {target}")));
    }

    let mut per_bin = Vec::with_capacity(nbins);
    let mut audit = Vec::with_capacity(nbins);
    for (b, subjects) in grouped.iter().enumerate() {
        let mut rng = bin_rng(opts.seed, b);
        let sessions = binned.members[b].len();
        let eligible = oversample.contains(&b);
        let (mut chosen, action) = if eligible && subjects.len() < target {
            let chosen = round_robin(subjects, target);
            let action = BalanceAction::Oversampled { subjects: subjects.len(), sessions: chosen.len() };
            (chosen, action)
        } else {
            let earliest: Vec<SessionRecord> = subjects.values().map(|s| s[0].clone()).collect();
            if earliest.len() > target {
                let n = earliest.len();
                (undersample(earliest, target, &mut rng), BalanceAction::Undersampled { eligible: n, kept: target })
            } else {
                (earliest, BalanceAction::Kept)
            }
        };
        chosen.sort_by(|a, c| {
            natural_cmp(&a.subject_id, &c.subject_id).then_with(|| natural_cmp(&a.session_id, &c.session_id))
        });
        audit.push(BinAudit {
            bin: b,
            label: binned.bins.label(b),
            subjects: subjects.len(),
            sessions,
            selected: chosen.len(),
            oversample_eligible: eligible,
            action,
        });
        per_bin.push(chosen);
    }
    Ok(BalancedCohort { bins: binned.bins.clone(), per_bin, target, oversample_bins: oversample, audit })
}
