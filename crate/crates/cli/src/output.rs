use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig, SCHEMA_VERSION};
use crate::error::{CliError, Classify};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Reproducibility record attached to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub command: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
}

/// Output directory of one command plus its provenance bookkeeping.
pub struct Run {
    pub cfg: RunConfig,
    dir: PathBuf,
    provenance: Provenance,
    artifacts: Vec<FileDigest>,
}

fn digest_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).failed(&format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(bytes)))
}

impl Run {
    pub fn new(cfg: RunConfig, command: &str, out_root: &Path) -> Result<Self, CliError> {
        let dir = out_root.join(command.replace(' ', "-"));
        fs::create_dir_all(&dir).failed(&format!("creating {}", dir.display()))?;
        let provenance = Provenance {
            tool: "brainage".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            config_sha256: cfg.hash(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
        };
        Ok(Self { cfg, dir, provenance, artifacts: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.provenance.seeds.insert(name.into(), value);
    }

    /// Records the digest of an input, keyed by its path relative to the config.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = digest_file(path)?;
        let key = path.strip_prefix(&self.cfg.base).unwrap_or(path);
        self.provenance.inputs.push(FileDigest { path: key.display().to_string().replace('\\', "/"), sha256 });
        Ok(())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).failed(&format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes).failed(&format!("writing {}", path.display()))?;
        self.artifacts.push(FileDigest { path: name.into(), sha256: hex(&Sha256::digest(bytes)) });
        Ok(path)
    }

    /// Pretty JSON with the provenance block embedded under `provenance`.
    pub fn write_report<S: Serialize>(&mut self, name: &str, body: &S) -> Result<PathBuf, CliError> {
        let mut value = serde_json::to_value(body).failed("serializing report")?;
        if let serde_json::Value::Object(map) = &mut value {
            map.insert("provenance".into(), serde_json::to_value(&self.provenance).failed("serializing provenance")?);
        }
        let mut text = serde_json::to_string_pretty(&value).failed("serializing report")?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).failed("writing csv")?;
        for r in rows {
            w.write_record(r).failed("writing csv")?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
        self.write_bytes(name, &bytes)
    }

    /// Writes `provenance.json` listing every artifact and its digest.
    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            #[serde(flatten)]
            provenance: &'a Provenance,
            artifacts: &'a [FileDigest],
        }
        let artifacts = std::mem::take(&mut self.artifacts);
        let mut text = serde_json::to_string_pretty(&Manifest { provenance: &self.provenance, artifacts: &artifacts })
            .failed("serializing provenance")?;
        text.push('\n');
        let path = self.dir.join("provenance.json");
        fs::write(&path, text).failed(&format!("writing {}", path.display()))?;
        Ok(self.dir)
    }
}

/// Shortest representation that round-trips.
pub fn num(v: f64) -> String {
    format!("{v}")
}
