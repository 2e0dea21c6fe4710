use serde::{Deserialize, Serialize};

use super::{CohortError, SessionRecord};

/// Contiguous left-closed, right-open age intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeBins {
    edges: Vec<f64>,
}

impl Default for AgeBins {
    /// `[18,20), [20,25), ..., [85,90), [90,100)`.
    fn default() -> Self {
        let mut edges = vec![18.0];
        edges.extend((20..=90).step_by(5).map(f64::from));
        edges.push(100.0);
        Self { edges }
    }
}

impl AgeBins {
    pub fn new(edges: Vec<f64>) -> Result<Self, CohortError> {
        if edges.len() < 2 {
            return Err(CohortError::Config("age bins need at least two edges".into()));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(CohortError::Config(format!("bin edges must be finite and strictly increasing: {edges:?}")));
        }
        Ok(Self { edges })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> (f64, f64) {
        (self.edges[0], *self.edges.last().expect("at least two edges"))
    }

    /// Bin holding `age`, by the left-closed convention.
    pub fn find(&self, age: f64) -> Option<usize> {
        if !(age >= self.edges[0] && age < self.edges[self.edges.len() - 1]) {
            return None;
        }
        Some(self.edges.partition_point(|&e| e <= age) - 1)
    }

    pub fn bounds(&self, bin: usize) -> (f64, f64) {
        (self.edges[bin], self.edges[bin + 1])
    }

    pub fn label(&self, bin: usize) -> String {
        let (lo, hi) = self.bounds(bin);
        format!("[{lo}, {hi})")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectedRecord {
    pub record: SessionRecord,
    pub reason: String,
}

/// Records partitioned by age bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedSessions {
    pub bins: AgeBins,
    pub members: Vec<Vec<SessionRecord>>,
    pub rejected: Vec<RejectedRecord>,
}

pub fn bin_sessions(records: &[SessionRecord], bins: &AgeBins) -> BinnedSessions {
    let mut members = vec![Vec::new(); bins.len()];
    let mut rejected = Vec::new();
    let (lo, hi) = bins.range();
    for r in records {
        match bins.find(r.age) {
            Some(b) => members[b].push(r.clone()),
            None => rejected.push(RejectedRecord {
                record: r.clone(),
                reason: format!("age {} outside [{lo}, {hi})", r.age),
            }),
        }
    }
    BinnedSessions { bins: bins.clone(), members, rejected }
}

/// `w_i = N / (K * n_bin(i))` with `K` the number of occupied bins, so the
/// weights average to one and every occupied bin carries the same total weight.
pub fn inverse_frequency_weights(records: &[SessionRecord], bins: &AgeBins) -> Result<Vec<f64>, CohortError> {
    let mut counts = vec![0usize; bins.len()];
    let mut index = Vec::with_capacity(records.len());
    for r in records {
        let b = bins.find(r.age).ok_or_else(|| CohortError::Unbinned {
            subject: r.subject_id.clone(),
            session: r.session_id.clone(),
            age: r.age,
        })?;
        counts[b] += 1;
        index.push(b);
    }
    let occupied = counts.iter().filter(|&&c| c > 0).count() as f64;
    let n = records.len() as f64;
    Ok(index.iter().map(|&b| n / (occupied * counts[b] as f64)).collect())
}
