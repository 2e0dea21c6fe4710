use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{natural_cmp, BalancedCohort, CohortError, Gender, SessionRecord};

/// Strata with fewer subjects than this merge into their bin.
pub const MIN_STRATUM_SUBJECTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios(pub [f64; 3]);

impl Default for SplitRatios {
    fn default() -> Self {
        Self([0.8, 0.1, 0.1])
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), CohortError> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(CohortError::Config(format!("split ratios must be non-negative and sum to 1: {:?}", self.0)));
        }
        Ok(())
    }

    /// Subject counts for a stratum of `n`; floors first, then the largest
    /// fractional parts, ties in train/val/test order.
    pub fn allocate(&self, n: usize) -> [usize; 3] {
        let exact: Vec<f64> = self.0.iter().map(|r| r * n as f64).collect();
        let mut counts = [0usize; 3];
        for i in 0..3 {
            counts[i] = (exact[i] + 1e-9).floor() as usize;
        }
        let mut left = n.saturating_sub(counts.iter().sum());
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = exact[a] - counts[a] as f64;
            let fb = exact[b] - counts[b] as f64;
            fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

/// `site`/`gender` are `None` for a merged bin-level stratum.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct StratumKey {
    pub bin: usize,
    pub site: Option<String>,
    pub gender: Option<Gender>,
}

impl fmt::Display for StratumKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let site = self.site.as_deref().unwrap_or("*");
        let gender = self.gender.map_or("*".to_string(), |g| g.to_string());
        write!(f, "bin{}/{}/{}", self.bin, site, gender)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumSplit {
    pub key: StratumKey,
    pub subjects: usize,
    pub counts: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Every cohort session with its split, in cohort order.
    pub assignments: Vec<(SessionRecord, SplitName)>,
    pub strata: Vec<StratumSplit>,
    pub warnings: Vec<String>,
}

impl Split {
    pub fn records(&self, which: SplitName) -> Vec<SessionRecord> {
        self.assignments.iter().filter(|(_, s)| *s == which).map(|(r, _)| r.clone()).collect()
    }

    pub fn subject_split(&self) -> BTreeMap<String, SplitName> {
        self.assignments.iter().map(|(r, s)| (r.subject_id.clone(), *s)).collect()
    }
}

pub fn stratified_split(cohort: &BalancedCohort, ratios: SplitRatios, seed: u64) -> Result<Split, CohortError> {
    ratios.validate()?;
    let records = cohort.selected();

    let mut earliest: BTreeMap<&str, (usize, &SessionRecord)> = BTreeMap::new();
    for (bin, group) in cohort.per_bin.iter().enumerate() {
        for r in group {
            let e = earliest.entry(&r.subject_id).or_insert((bin, r));
            if natural_cmp(&r.session_id, &e.1.session_id).is_lt() {
                *e = (bin, r);
            }
        }
    }

    let mut fine: BTreeMap<StratumKey, Vec<String>> = BTreeMap::new();
    for (subject, (bin, r)) in &earliest {
        let key = StratumKey { bin: *bin, site: Some(r.site.clone()), gender: Some(r.gender) };
        fine.entry(key).or_default().push(subject.to_string());
    }
    let mut strata: BTreeMap<StratumKey, Vec<String>> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (key, subjects) in fine {
        if subjects.len() < MIN_STRATUM_SUBJECTS {
            let msg = format!(
                "stratum {key} has {} subject(s); falling back to bin-level stratification",
                subjects.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
            let merged = StratumKey { bin: key.bin, site: None, gender: None };
            strata.entry(merged).or_default().extend(subjects);
        } else {
            strata.insert(key, subjects);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subject_split: BTreeMap<String, SplitName> = BTreeMap::new();
    let mut summary = Vec::with_capacity(strata.len());
    for (key, mut subjects) in strata {
        subjects.sort_by(|a, b| natural_cmp(a, b));
        subjects.shuffle(&mut rng);
        let counts = ratios.allocate(subjects.len());
        let mut it = subjects.into_iter();
        for (name, &c) in SplitName::ALL.iter().zip(&counts) {
            for s in it.by_ref().take(c) {
                subject_split.insert(s, *name);
            }
        }
        summary.push(StratumSplit { subjects: counts.iter().sum(), key, counts });
    }

    let assignments = records
        .into_iter()
        .map(|r| {
            let s = subject_split[&r.subject_id];
            (r, s)
        })
        .collect();
    Ok(Split { assignments, strata: summary, warnings })
}
