use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use brainage::ablation::Axis;
use brainage::cohort::{AgeBins, BalanceOptions, SplitRatios};
use brainage::model::{NetworkSpec, TrainConfig};
use brainage::phantom::PhantomSpec;
use brainage::saliency::{GradientModifier, DEFAULT_THRESHOLD};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Output root; `--out` and `BRAINAGE_OUT` take precedence.
    pub out: Option<PathBuf>,
    pub paths: Paths,
    pub phantom: PhantomSection,
    pub cohort: CohortSection,
    pub network: NetworkSection,
    pub training: TrainConfig,
    pub saliency: SaliencySection,
    pub ablation: AblationSection,
    pub stats: StatsSection,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out: None,
            paths: Paths::default(),
            phantom: PhantomSection::default(),
            cohort: CohortSection::default(),
            network: NetworkSection::default(),
            training: TrainConfig::desk(),
            saliency: SaliencySection::default(),
            ablation: AblationSection::default(),
            stats: StatsSection::default(),
            base: PathBuf::new(),
        }
    }
}

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Session manifest (CSV); `train`, `ablate` and `eval` read its `split` column.
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Manifest of activation maps written by `saliency map`.
    pub maps: Option<PathBuf>,
    /// Table with `subject_id, score, age, predicted_age, gender` columns.
    pub table: Option<PathBuf>,
    /// Predictions CSV with `subject_id, predicted_age` columns.
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub subjects: usize,
    /// Scans per subject, each with fresh noise.
    pub sessions: usize,
    pub sites: Vec<String>,
    pub spec: PhantomSpec,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self { subjects: 100, sessions: 1, sites: vec!["site-a".into(), "site-b".into()], spec: PhantomSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    /// Bin edges; the 16 default bins when absent.
    pub bins: Option<Vec<f64>>,
    pub target: Option<usize>,
    pub oversample_bins: Option<Vec<usize>>,
    pub ratios: [f64; 3],
}

impl Default for CohortSection {
    fn default() -> Self {
        Self { bins: None, target: None, oversample_bins: None, ratios: SplitRatios::default().0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub num_stages: usize,
    pub base_features: usize,
    pub feature_growth: usize,
    pub kernel: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let d = NetworkSpec::desk();
        Self { num_stages: d.num_stages, base_features: d.base_features, feature_growth: d.feature_growth, kernel: d.kernel }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencySection {
    /// Layer to explain; the last pooled feature map when absent.
    pub layer: Option<String>,
    pub modifier: GradientModifier,
    pub threshold: f64,
}

impl Default for SaliencySection {
    fn default() -> Self {
        Self { layer: None, modifier: GradientModifier::default(), threshold: DEFAULT_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionFile {
    pub name: String,
    /// VVOL volume; non-zero voxels belong to the region.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub axis: Axis,
    pub stride: usize,
    pub slice_stages: usize,
    pub slice_base_features: usize,
    /// Region masks for `ablate lobes`; the eight octants when empty.
    pub regions: Vec<RegionFile>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { axis: Axis::X, stride: 1, slice_stages: 3, slice_base_features: 8, regions: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub alpha: f64,
    /// Number of tests sharing the Bonferroni correction.
    pub tests: usize,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self { alpha: 0.05, tests: 1 }
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{field}: {msg}"))
}

impl RunConfig {
    /// Parses JSON, reporting the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(if path == "." { "config" } else { &path }, e.into_inner())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Ok(cfg)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.base.join(path)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid("schema_version", format!("expected {SCHEMA_VERSION}, found {}", self.schema_version)));
        }
        if self.phantom.subjects == 0 || self.phantom.sessions == 0 {
            return Err(invalid("phantom", "subjects and sessions must be positive"));
        }
        if self.phantom.sites.is_empty() {
            return Err(invalid("phantom.sites", "at least one site is required"));
        }
        self.phantom.spec.validate().map_err(|e| invalid("phantom.spec", e))?;
        self.bins()?;
        SplitRatios(self.cohort.ratios).validate().map_err(|e| invalid("cohort.ratios", e))?;
        if self.cohort.target == Some(0) {
            return Err(invalid("cohort.target", "must be at least 1"));
        }
        let n = &self.network;
        if n.num_stages == 0 || n.base_features == 0 || n.feature_growth == 0 || n.kernel % 2 == 0 {
            return Err(invalid("network", "stages, features and growth must be positive and the kernel odd"));
        }
        self.training.validate().map_err(|e| invalid("training", e))?;
        if !(self.saliency.threshold > 0.0 && self.saliency.threshold <= 1.0) {
            return Err(invalid("saliency.threshold", "must lie in (0, 1]"));
        }
        if self.ablation.stride == 0 || self.ablation.slice_stages == 0 || self.ablation.slice_base_features == 0 {
            return Err(invalid("ablation", "stride, slice_stages and slice_base_features must be positive"));
        }
        if !(self.stats.alpha > 0.0 && self.stats.alpha < 1.0) || self.stats.tests == 0 {
            return Err(invalid("stats", "alpha must lie in (0, 1) and tests be positive"));
        }
        Ok(())
    }

    pub fn bins(&self) -> Result<AgeBins, CliError> {
        match &self.cohort.bins {
            None => Ok(AgeBins::default()),
            Some(edges) => AgeBins::new(edges.clone()).map_err(|e| invalid("cohort.bins", e)),
        }
    }

    pub fn balance_options(&self) -> BalanceOptions {
        BalanceOptions {
            target: self.cohort.target,
            oversample_bins: self.cohort.oversample_bins.as_ref().map(|b| b.iter().copied().collect::<BTreeSet<_>>()),
            seed: self.seed,
        }
    }

    /// Seed for the split RNG, kept apart from the balancing stream.
    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn network_spec(&self, extents_zyx: Vec<usize>) -> NetworkSpec {
        NetworkSpec {
            num_stages: self.network.num_stages,
            base_features: self.network.base_features,
            feature_growth: self.network.feature_growth,
            kernel: self.network.kernel,
            input_extents: extents_zyx,
            seed: self.seed,
            ..NetworkSpec::desk()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.training.clone() }
    }

    /// Resolves a configured path, failing unless it is set and exists.
    pub fn require(&self, field: &str, path: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        let p = path.as_ref().ok_or_else(|| invalid(&format!("paths.{field}"), "required by this command"))?;
        let resolved = self.resolve(p);
        if !resolved.exists() {
            return Err(invalid(&format!("paths.{field}"), format!("{} does not exist", resolved.display())));
        }
        Ok(resolved)
    }

    /// SHA-256 of the canonical JSON form of the effective config, with
    /// paths as written.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
