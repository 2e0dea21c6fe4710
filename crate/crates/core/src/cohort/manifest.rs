use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CohortError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

impl Gender {
    /// Regression coding: F is the reference category.
    pub fn indicator(self) -> f64 {
        match self {
            Gender::F => 0.0,
            Gender::M => 1.0,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::M => "M",
            Gender::F => "F",
        })
    }
}

/// One scan session as listed in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub subject_id: String,
    pub session_id: String,
    pub age: f64,
    pub gender: Gender,
    pub site: String,
    pub path: String,
}

pub const MANIFEST_HEADER: [&str; 6] = ["subject_id", "session_id", "age", "gender", "site", "path"];

/// Reads a manifest CSV; extra columns are ignored.
pub fn read_manifest_from<R: Read>(reader: R) -> Result<Vec<SessionRecord>, CohortError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in MANIFEST_HEADER {
        if !headers.iter().any(|h| h == col) {
            return Err(CohortError::Manifest(format!("missing column `{col}`")));
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let rec: SessionRecord = row?;
        if !rec.age.is_finite() {
            return Err(CohortError::Manifest(format!(
                "non-finite age for {}/{}",
                rec.subject_id, rec.session_id
            )));
        }
        if !seen.insert((rec.subject_id.clone(), rec.session_id.clone())) {
            return Err(CohortError::Duplicate { subject: rec.subject_id, session: rec.session_id });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SessionRecord>, CohortError> {
    read_manifest_from(std::fs::File::open(path)?)
}

/// Writes a manifest, optionally with one extra column (e.g. `split`, `weight`).
pub fn write_manifest_to<W: Write>(
    writer: W,
    records: &[SessionRecord],
    extra: Option<(&str, &[String])>,
) -> Result<(), CohortError> {
    if let Some((name, values)) = extra {
        if values.len() != records.len() {
            return Err(CohortError::Manifest(format!(
                "column `{name}` has {} values for {} records",
                values.len(),
                records.len()
            )));
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = MANIFEST_HEADER.to_vec();
    if let Some((name, _)) = extra {
        header.push(name);
    }
    w.write_record(&header)?;
    for (i, r) in records.iter().enumerate() {
        let mut row = vec![
            r.subject_id.clone(),
            r.session_id.clone(),
            r.age.to_string(),
            r.gender.to_string(),
            r.site.clone(),
            r.path.clone(),
        ];
        if let Some((_, values)) = extra {
            row.push(values[i].clone());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_manifest(
    path: impl AsRef<Path>,
    records: &[SessionRecord],
    extra: Option<(&str, &[String])>,
) -> Result<(), CohortError> {
    write_manifest_to(std::fs::File::create(path)?, records, extra)
}
