use std::path::{Path, PathBuf};

use brainage::ablation::{AblationData, LabeledVolume};
use brainage::cohort::{bin_sessions, read_manifest, write_manifest_to, AgeBins, SessionRecord, SplitName};
use brainage::model::Sample;
use brainage::preprocess::{read_vvol, Volume};

use crate::error::{CliError, Classify};
use crate::output::Run;

/// A manifest plus the optional `split` column.
pub struct Manifest {
    pub path: PathBuf,
    pub records: Vec<SessionRecord>,
    pub splits: Option<Vec<SplitName>>,
}

fn parse_split(s: &str) -> Option<SplitName> {
    SplitName::ALL.into_iter().find(|n| n.as_str() == s)
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let records = read_manifest(path).invalid(&format!("manifest {}", path.display()))?;
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .invalid(&format!("manifest {}", path.display()))?;
        let headers = rdr.headers().invalid("manifest header")?.clone();
        let splits = match headers.iter().position(|h| h == "split") {
            None => None,
            Some(col) => {
                let mut out = Vec::new();
                for (i, row) in rdr.records().enumerate() {
                    let row = row.invalid("manifest row")?;
                    let value = row.get(col).unwrap_or("");
                    out.push(parse_split(value).ok_or_else(|| {
                        CliError::Validation(format!("manifest row {}: unknown split `{value}`", i + 1))
                    })?);
                }
                Some(out)
            }
        };
        Ok(Self { path: path.to_path_buf(), records, splits })
    }

    pub fn volume_path(&self, record: &SessionRecord) -> PathBuf {
        self.path.parent().unwrap_or(Path::new("")).join(&record.path)
    }

    pub fn load(&self, record: &SessionRecord) -> Result<Volume, CliError> {
        let p = self.volume_path(record);
        read_vvol(&p).invalid(&format!("volume for {}/{} ({})", record.subject_id, record.session_id, p.display()))
    }

    pub fn require_splits(&self) -> Result<&[SplitName], CliError> {
        self.splits.as_deref().ok_or_else(|| {
            CliError::Validation(format!("manifest {} has no `split` column; run `cohort split` first", self.path.display()))
        })
    }

    pub fn records_in(&self, which: SplitName) -> Result<Vec<&SessionRecord>, CliError> {
        let splits = self.require_splits()?;
        Ok(self.records.iter().zip(splits).filter(|(_, s)| **s == which).map(|(r, _)| r).collect())
    }

    pub fn labeled(&self, which: SplitName) -> Result<Vec<LabeledVolume>, CliError> {
        self.records_in(which)?
            .into_iter()
            .map(|r| Ok(LabeledVolume { volume: self.load(r)?, age: r.age, subject_id: r.subject_id.clone() }))
            .collect()
    }

    pub fn ablation_data(&self) -> Result<AblationData, CliError> {
        Ok(AblationData {
            train: self.labeled(SplitName::Train)?,
            val: self.labeled(SplitName::Val)?,
            test: self.labeled(SplitName::Test)?,
        })
    }
}

pub fn sample(volume: &Volume, record: &SessionRecord) -> Sample {
    Sample::new(volume.to_tensor(), record.age as f32, record.subject_id.clone())
}

/// Writes `rejected.csv` and fails when any record falls outside the bins.
pub fn reject_out_of_range(mut run: Run, records: &[SessionRecord], bins: &AgeBins) -> Result<Run, CliError> {
    let binned = bin_sessions(records, bins);
    if binned.rejected.is_empty() {
        return Ok(run);
    }
    let recs: Vec<SessionRecord> = binned.rejected.iter().map(|r| r.record.clone()).collect();
    let reasons: Vec<String> = binned.rejected.iter().map(|r| r.reason.clone()).collect();
    let mut buf = Vec::new();
    write_manifest_to(&mut buf, &recs, Some(("reason", &reasons))).failed("writing rejected records")?;
    let path = run.write_bytes("rejected.csv", &buf)?;
    for r in &binned.rejected {
        eprintln!("rejected {}/{} (age {}): {}", r.record.subject_id, r.record.session_id, r.record.age, r.reason);
    }
    run.finish()?;
    Err(CliError::Validation(format!("{} record(s) rejected; see {}", recs.len(), path.display())))
}
