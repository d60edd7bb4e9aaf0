//! Job and experiment configuration.
//!
//! Configs are handled in two forms: a loose JSON-like *tree* (what YAML
//! parses into, and what overrides are merged onto) and the typed
//! [`JobConfig`] obtained by validating a tree. Every typed config can be
//! rendered back to canonical bytes, which are the basis for run ids and
//! checkpoint hashes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Free-form backend/adapter parameters.
pub type Params = BTreeMap<String, Value>;

/// A loose configuration tree, prior to validation.
pub type ConfigTree = Value;

/// Dotted path → replacement value.
pub type Overrides = BTreeMap<String, Value>;

/// 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Digest(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("parse error in {source_name}: {message}")]
    Parse { source_name: String, message: String },
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("invalid value at `{path}`: {message}")]
    InvalidValue { path: String, message: String },
}

impl ConfigError {
    fn invalid(path: &str, message: impl Into<String>) -> Self {
        ConfigError::InvalidValue {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Schema

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pose,
    Video,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pose => "pose",
            Mode::Video => "video",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeScope {
    PerClip,
    PerFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Webdataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub job_name: String,
    pub dataset: DatasetConfig,
    pub processing: ProcessingConfig,
    #[serde(default)]
    pub postprocess: PostprocessConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub runtime: RuntimeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub adapter_name: String,
    pub source_path: PathBuf,
    #[serde(default)]
    pub params: Params,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessingConfig {
    pub mode: Mode,
    #[serde(default = "defaults::frame_rate_hz")]
    pub frame_rate_hz: f64,
    #[serde(default)]
    pub detector: Option<DetectorConfig>,
    #[serde(default)]
    pub extractor: Option<ExtractorConfig>,
    #[serde(default)]
    pub crop: Option<CropConfig>,
    #[serde(default)]
    pub media: MediaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub backend_name: String,
    #[serde(default)]
    pub params: Params,
    #[serde(default = "defaults::one")]
    pub sample_stride: u32,
    #[serde(default = "defaults::min_score")]
    pub min_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub backend_name: String,
    #[serde(default)]
    pub params: Params,
    pub expected_keypoints: u32,
    #[serde(default = "defaults::channels")]
    pub channels: u32,
    /// Argument vector of an external backend speaking the landmark protocol.
    /// When set, `backend_name` is registered as a command backend at startup.
    #[serde(default)]
    pub command: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    #[serde(default = "defaults::pad_fraction")]
    pub pad_fraction: f64,
    #[serde(default)]
    pub target_aspect: Option<f64>,
    #[serde(default)]
    pub resize: Option<ResizeConfig>,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            pad_fraction: defaults::pad_fraction(),
            target_aspect: None,
            resize: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResizeConfig {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediaConfig {
    /// `auto` picks the synthetic backend for `.synth.json` files and the
    /// command backend otherwise.
    #[serde(default = "defaults::media_backend")]
    pub backend_name: String,
    #[serde(default)]
    pub probe_command: Option<Vec<String>>,
    #[serde(default)]
    pub render_command: Option<Vec<String>>,
}

impl Default for MediaConfig {
    fn default() -> Self {
        MediaConfig {
            backend_name: defaults::media_backend(),
            probe_command: None,
            render_command: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocessConfig {
    #[serde(default = "defaults::yes")]
    pub enabled: bool,
    #[serde(default)]
    pub preset_name: Option<String>,
    #[serde(default)]
    pub normalize: NormalizeConfig,
    #[serde(default)]
    pub flatten: bool,
    #[serde(default)]
    pub mask_invisible: bool,
    #[serde(default)]
    pub drop_depth: bool,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            enabled: true,
            preset_name: None,
            normalize: NormalizeConfig::default(),
            flatten: false,
            mask_invisible: false,
            drop_depth: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizeConfig {
    #[serde(default = "defaults::scope")]
    pub scope: NormalizeScope,
    #[serde(default = "defaults::visibility_threshold")]
    pub visibility_threshold: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        NormalizeConfig {
            scope: defaults::scope(),
            visibility_threshold: defaults::visibility_threshold(),
            epsilon: defaults::epsilon(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default = "defaults::yes")]
    pub require_text: bool,
    #[serde(default = "defaults::yes")]
    pub require_timing: bool,
    #[serde(default = "defaults::min_duration_s")]
    pub min_duration_s: f64,
    #[serde(default = "defaults::max_duration_s")]
    pub max_duration_s: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            require_text: true,
            require_timing: true,
            min_duration_s: defaults::min_duration_s(),
            max_duration_s: defaults::max_duration_s(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "defaults::format")]
    pub format: OutputFormat,
    #[serde(default = "defaults::max_samples_per_shard")]
    pub max_samples_per_shard: u64,
    #[serde(default = "defaults::max_bytes_per_shard")]
    pub max_bytes_per_shard: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            format: OutputFormat::Webdataset,
            max_samples_per_shard: defaults::max_samples_per_shard(),
            max_bytes_per_shard: defaults::max_bytes_per_shard(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeConfig {
    #[serde(default = "defaults::one")]
    pub workers: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::yes")]
    pub resume: bool,
    #[serde(default = "defaults::output_root")]
    pub output_root: PathBuf,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            workers: 1,
            seed: 0,
            resume: true,
            output_root: defaults::output_root(),
        }
    }
}

/// Documented defaults. Changing any of these changes run ids.
pub mod defaults {
    use super::{NormalizeScope, OutputFormat};
    use std::path::PathBuf;

    pub fn frame_rate_hz() -> f64 {
        25.0
    }
    pub fn visibility_threshold() -> f64 {
        0.5
    }
    pub fn epsilon() -> f64 {
        1e-6
    }
    pub fn pad_fraction() -> f64 {
        0.1
    }
    pub fn min_duration_s() -> f64 {
        0.5
    }
    pub fn max_duration_s() -> f64 {
        60.0
    }
    pub fn max_samples_per_shard() -> u64 {
        1000
    }
    pub fn max_bytes_per_shard() -> u64 {
        1 << 30
    }
    pub fn min_score() -> f64 {
        0.25
    }
    pub fn channels() -> u32 {
        4
    }
    pub fn media_backend() -> String {
        "auto".to_string()
    }
    pub fn output_root() -> PathBuf {
        PathBuf::from("runs")
    }
    pub fn scope() -> NormalizeScope {
        NormalizeScope::PerClip
    }
    pub fn format() -> OutputFormat {
        OutputFormat::Webdataset
    }
    pub(crate) fn one() -> u32 {
        1
    }
    pub(crate) fn yes() -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// Validation

fn check(cond: bool, path: &str, message: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(ConfigError::invalid(path, message))
    }
}

fn finite_positive(v: f64, path: &str) -> Result<()> {
    check(v.is_finite() && v > 0.0, path, "must be a finite number > 0")
}

impl JobConfig {
    /// Range and cross-field checks that the type system does not express.
    pub fn validate(&self) -> Result<()> {
        check(!self.job_name.trim().is_empty(), "job_name", "must be non-empty")?;
        check(
            !self.dataset.adapter_name.is_empty(),
            "dataset.adapter_name",
            "must be non-empty",
        )?;

        let p = &self.processing;
        finite_positive(p.frame_rate_hz, "processing.frame_rate_hz")?;
        if let Some(d) = &p.detector {
            check(
                !d.backend_name.is_empty(),
                "processing.detector.backend_name",
                "must be non-empty",
            )?;
            check(
                d.sample_stride >= 1,
                "processing.detector.sample_stride",
                "must be >= 1",
            )?;
            check(
                (0.0..=1.0).contains(&d.min_score),
                "processing.detector.min_score",
                "must lie in [0, 1]",
            )?;
        }
        if let Some(e) = &p.extractor {
            check(
                !e.backend_name.is_empty(),
                "processing.extractor.backend_name",
                "must be non-empty",
            )?;
            check(
                e.expected_keypoints > 0,
                "processing.extractor.expected_keypoints",
                "must be > 0",
            )?;
            check(
                (2..=4).contains(&e.channels),
                "processing.extractor.channels",
                "must be one of 2, 3, 4",
            )?;
            if let Some(cmd) = &e.command {
                check(!cmd.is_empty(), "processing.extractor.command", "must not be empty")?;
            }
        }
        if let Some(c) = &p.crop {
            check(
                c.pad_fraction.is_finite() && c.pad_fraction >= 0.0,
                "processing.crop.pad_fraction",
                "must be a finite number >= 0",
            )?;
            if let Some(a) = c.target_aspect {
                finite_positive(a, "processing.crop.target_aspect")?;
            }
            if let Some(r) = c.resize {
                check(
                    r.width > 0 && r.height > 0,
                    "processing.crop.resize",
                    "width and height must be > 0",
                )?;
            }
        }
        match p.mode {
            Mode::Pose => check(
                p.extractor.is_some(),
                "processing.extractor",
                "required when mode is pose",
            )?,
            Mode::Video => {
                check(p.crop.is_some(), "processing.crop", "required when mode is video")?;
                check(
                    p.detector.is_some(),
                    "processing.detector",
                    "required when mode is video",
                )?;
            }
        }

        let n = &self.postprocess.normalize;
        check(
            (0.0..=1.0).contains(&n.visibility_threshold),
            "postprocess.normalize.visibility_threshold",
            "must lie in [0, 1]",
        )?;
        finite_positive(n.epsilon, "postprocess.normalize.epsilon")?;

        let f = &self.filter;
        check(
            f.min_duration_s.is_finite() && f.min_duration_s >= 0.0,
            "filter.min_duration_s",
            "must be a finite number >= 0",
        )?;
        finite_positive(f.max_duration_s, "filter.max_duration_s")?;
        check(
            f.min_duration_s < f.max_duration_s,
            "filter.min_duration_s",
            "must be smaller than filter.max_duration_s",
        )?;

        check(
            self.output.max_samples_per_shard > 0,
            "output.max_samples_per_shard",
            "must be > 0",
        )?;
        check(
            self.output.max_bytes_per_shard > 0,
            "output.max_bytes_per_shard",
            "must be > 0",
        )?;
        check(self.runtime.workers >= 1, "runtime.workers", "must be >= 1")?;
        Ok(())
    }

    /// The config as a loose tree (every default filled in).
    pub fn to_tree(&self) -> ConfigTree {
        serde_json::to_value(self).expect("config serializes")
    }
}

// ---------------------------------------------------------------------------
// Loading

/// Parse YAML text into a loose tree.
pub fn parse_tree(text: &str, source_name: &str) -> Result<ConfigTree> {
    let tree: Value = serde_yaml::from_str(text).map_err(|e| ConfigError::Parse {
        source_name: source_name.to_string(),
        message: e.to_string(),
    })?;
    if !tree.is_object() {
        return Err(ConfigError::Parse {
            source_name: source_name.to_string(),
            message: "top level must be a mapping".into(),
        });
    }
    Ok(tree)
}

pub fn read_tree(path: &Path) -> Result<ConfigTree> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Parse {
        source_name: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_tree(&text, &path.display().to_string())
}

/// Validate a tree into a typed config.
pub fn from_tree(tree: ConfigTree) -> Result<JobConfig> {
    let config: JobConfig = serde_path_to_error::deserialize(tree).map_err(classify)?;
    config.validate()?;
    Ok(config)
}

fn classify(err: serde_path_to_error::Error<serde_json::Error>) -> ConfigError {
    let path = err.path().to_string();
    let message = err.inner().to_string();
    if let Some(rest) = message.strip_prefix("unknown field `") {
        let field = rest.split('`').next().unwrap_or_default();
        let full = if path == "." || path.is_empty() {
            field.to_string()
        } else if path == field || path.ends_with(&format!(".{field}")) {
            path
        } else {
            format!("{path}.{field}")
        };
        return ConfigError::UnknownField(full);
    }
    if let Some(rest) = message.strip_prefix("unknown variant `") {
        let variant = rest.split('`').next().unwrap_or_default();
        return ConfigError::invalid(&path, format!("`{variant}` is not an accepted value"));
    }
    ConfigError::invalid(&path, message)
}

pub fn load_config(path: &Path) -> Result<JobConfig> {
    from_tree(read_tree(path)?)
}

pub fn load_config_with_overrides(path: &Path, overrides: &Overrides) -> Result<JobConfig> {
    let tree = merge_overrides(read_tree(path)?, overrides)?;
    from_tree(tree)
}

// ---------------------------------------------------------------------------
// Overrides

/// Apply dotted-path overrides onto a tree.
///
/// Maps are merged key by key; lists and scalars are replaced wholesale.
/// Missing intermediate maps are created, so the merged tree must still pass
/// [`from_tree`] for unknown paths to be caught.
pub fn merge_overrides(mut base: ConfigTree, overrides: &Overrides) -> Result<ConfigTree> {
    for (dotted, value) in overrides {
        let parts: Vec<&str> = dotted.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(ConfigError::UnknownField(dotted.clone()));
        }
        let mut node = &mut base;
        for part in &parts[..parts.len() - 1] {
            if node.is_null() {
                *node = Value::Object(Map::new());
            }
            let Some(map) = node.as_object_mut() else {
                return Err(ConfigError::UnknownField(dotted.clone()));
            };
            node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        }
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let Some(map) = node.as_object_mut() else {
            return Err(ConfigError::UnknownField(dotted.clone()));
        };
        let leaf = parts[parts.len() - 1].to_string();
        match map.get_mut(&leaf) {
            Some(existing) => deep_merge(existing, value.clone()),
            None => {
                map.insert(leaf, value.clone());
            }
        }
    }
    Ok(base)
}

fn deep_merge(target: &mut Value, incoming: Value) {
    match (target, incoming) {
        (Value::Object(dst), Value::Object(src)) => {
            for (k, v) in src {
                match dst.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        dst.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse the value half of a `dotted=value` command-line override as a YAML
/// scalar or flow collection.
pub fn parse_override(assignment: &str) -> Result<(String, Value)> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::invalid(assignment, "expected dotted.path=value"))?;
    let value: Value = if raw.is_empty() {
        Value::String(String::new())
    } else {
        serde_yaml::from_str(raw).map_err(|e| ConfigError::invalid(path, e.to_string()))?
    };
    Ok((path.trim().to_string(), value))
}

// ---------------------------------------------------------------------------
// Canonical bytes and hashes

/// Deterministic compact JSON: keys sorted at every level, no whitespace,
/// shortest round-trip reals, UTF-8.
pub fn canonical_json(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push(b'{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                out.extend(serde_json::to_vec(k).expect("string serializes"));
                out.push(b':');
                write_canonical(&map[k], out);
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(v, out);
            }
            out.push(b']');
        }
        scalar => out.extend(serde_json::to_vec(scalar).expect("scalar serializes")),
    }
}

pub fn canonical_serialize(config: &JobConfig) -> Vec<u8> {
    canonical_json(&config.to_tree())
}

fn subtree<'a>(tree: &'a Value, dotted: &str) -> Result<&'a Value> {
    let mut node = tree;
    for part in dotted.split('.') {
        node = node
            .as_object()
            .and_then(|m| m.get(part))
            .ok_or_else(|| ConfigError::UnknownField(dotted.to_string()))?;
    }
    Ok(node)
}

/// SHA-256 of the canonical bytes of the whole config or one subtree.
pub fn config_hash(config: &JobConfig, section: Option<&str>) -> Result<Digest> {
    let tree = config.to_tree();
    match section {
        None => Ok(Digest::of(&canonical_json(&tree))),
        Some(s) => Ok(Digest::of(&canonical_json(subtree(&tree, s)?))),
    }
}

/// Hash of several subtrees at once, keyed by their dotted paths.
pub fn config_hash_sections(config: &JobConfig, sections: &[&str]) -> Result<Digest> {
    if let [single] = sections {
        return config_hash(config, Some(single));
    }
    let tree = config.to_tree();
    let mut joined = Map::new();
    for s in sections {
        joined.insert((*s).to_string(), subtree(&tree, s)?.clone());
    }
    Ok(Digest::of(&canonical_json(&Value::Object(joined))))
}

// ---------------------------------------------------------------------------
// Experiments

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum JobSource {
    Path(PathBuf),
    Inline(Value),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentJobRaw {
    base: JobSource,
    #[serde(default)]
    overrides: Overrides,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentRaw {
    experiment_name: String,
    jobs: Vec<ExperimentJobRaw>,
    #[serde(default)]
    continue_on_error: bool,
}

/// An experiment whose jobs have all been merged and validated.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment_name: String,
    pub jobs: Vec<JobConfig>,
    pub continue_on_error: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("experiment job {index}: {source}")]
pub struct ExperimentJobError {
    pub index: usize,
    pub source: ConfigError,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Job(#[from] ExperimentJobError),
}

/// Load an experiment file. Relative job paths resolve against the file's
/// directory. Every job is merged with its overrides and validated before
/// anything runs.
pub fn load_experiment(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let tree = read_tree(path)?;
    let base_dir = path.parent().unwrap_or(Path::new("."));
    experiment_from_tree(tree, base_dir)
}

pub fn experiment_from_tree(tree: ConfigTree, base_dir: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let raw: ExperimentRaw = serde_path_to_error::deserialize(tree).map_err(classify)?;
    if raw.jobs.is_empty() {
        return Err(ConfigError::invalid("jobs", "must contain at least one job").into());
    }
    let mut jobs = Vec::with_capacity(raw.jobs.len());
    for (index, job) in raw.jobs.into_iter().enumerate() {
        let resolve = || -> Result<JobConfig> {
            let base = match job.base {
                JobSource::Path(p) => read_tree(&base_dir.join(p))?,
                JobSource::Inline(v) => v,
            };
            from_tree(merge_overrides(base, &job.overrides)?)
        };
        jobs.push(resolve().map_err(|source| ExperimentJobError { index, source })?);
    }
    Ok(ExperimentConfig {
        experiment_name: raw.experiment_name,
        jobs,
        continue_on_error: raw.continue_on_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const MINIMAL: &str = "
job_name: demo
dataset:
  adapter_name: how2sign_csv
  source_path: data/train.csv
processing:
  mode: pose
  extractor:
    backend_name: synthetic
    expected_keypoints: 85
";

    fn minimal() -> JobConfig {
        from_tree(parse_tree(MINIMAL, "inline").unwrap()).unwrap()
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let c = minimal();
        assert_eq!(c.processing.frame_rate_hz, 25.0);
        assert_eq!(c.postprocess.normalize.visibility_threshold, 0.5);
        assert_eq!(c.postprocess.normalize.epsilon, 1e-6);
        assert_eq!(c.filter.min_duration_s, 0.5);
        assert_eq!(c.filter.max_duration_s, 60.0);
        assert_eq!(c.output.max_samples_per_shard, 1000);
        assert_eq!(c.output.max_bytes_per_shard, 1 << 30);
        assert_eq!(c.runtime.workers, 1);
        assert!(c.runtime.resume);
        assert_eq!(c.processing.extractor.as_ref().unwrap().channels, 4);
        assert_eq!(CropConfig::default().pad_fraction, 0.1);
    }

    #[test]
    fn closed_enum_rejects_unknown_mode() {
        let text = MINIMAL.replace("mode: pose", "mode: audio");
        let err = from_tree(parse_tree(&text, "inline").unwrap()).unwrap_err();
        assert!(
            matches!(err, ConfigError::InvalidValue { ref path, .. } if path == "processing.mode"),
            "{err:?}"
        );
    }

    #[test]
    fn inverted_duration_bounds_rejected() {
        let text = format!("{MINIMAL}filter:\n  min_duration_s: 10\n  max_duration_s: 5\n");
        let err = from_tree(parse_tree(&text, "inline").unwrap()).unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { .. }), "{err:?}");
    }

    #[test]
    fn unknown_key_is_named() {
        let text = format!("{MINIMAL}runtime:\n  wrokers: 2\n");
        let err = from_tree(parse_tree(&text, "inline").unwrap()).unwrap_err();
        assert_eq!(err, ConfigError::UnknownField("runtime.wrokers".into()));
        let text = format!("{MINIMAL}colour: red\n");
        let err = from_tree(parse_tree(&text, "inline").unwrap()).unwrap_err();
        assert_eq!(err, ConfigError::UnknownField("colour".into()));
    }

    #[test]
    fn malformed_yaml_is_parse_error() {
        let err = parse_tree("job_name: [unclosed", "bad.yaml").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
    }

    #[test]
    fn mode_requirements() {
        let text = MINIMAL.replace("mode: pose", "mode: video");
        let err = from_tree(parse_tree(&text, "inline").unwrap()).unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { ref path, .. } if path == "processing.crop"));
    }

    #[test]
    fn deep_merge_override() {
        let base = json!({"runtime": {"workers": 1, "seed": 7}});
        let mut o = Overrides::new();
        o.insert("runtime.workers".into(), json!(4));
        assert_eq!(
            merge_overrides(base.clone(), &o).unwrap(),
            json!({"runtime": {"workers": 4, "seed": 7}})
        );
        assert_eq!(merge_overrides(base.clone(), &Overrides::new()).unwrap(), base);
    }

    #[test]
    fn list_override_replaces_whole_list() {
        let base = json!({"processing": {"extractor": {"command": ["a", "b", "c"]}}});
        let mut o = Overrides::new();
        o.insert("processing.extractor.command".into(), json!(["z"]));
        let merged = merge_overrides(base, &o).unwrap();
        assert_eq!(merged["processing"]["extractor"]["command"], json!(["z"]));
    }

    #[test]
    fn subtree_override_merges_maps() {
        let base = json!({"runtime": {"workers": 1, "seed": 7}});
        let mut o = Overrides::new();
        o.insert("runtime".into(), json!({"seed": 9}));
        assert_eq!(
            merge_overrides(base, &o).unwrap(),
            json!({"runtime": {"workers": 1, "seed": 9}})
        );
    }

    #[test]
    fn override_to_unknown_path_fails_validation() {
        let mut o = Overrides::new();
        o.insert("runtime.nope".into(), json!(1));
        let tree = merge_overrides(parse_tree(MINIMAL, "x").unwrap(), &o).unwrap();
        assert_eq!(
            from_tree(tree).unwrap_err(),
            ConfigError::UnknownField("runtime.nope".into())
        );
        o.clear();
        o.insert("job_name.inner".into(), json!(1));
        assert!(matches!(
            merge_overrides(parse_tree(MINIMAL, "x").unwrap(), &o),
            Err(ConfigError::UnknownField(_))
        ));
    }

    #[test]
    fn canonical_bytes_ignore_key_order() {
        let reordered = "
processing:
  extractor:
    expected_keypoints: 85
    backend_name: synthetic
  mode: pose
dataset:
  source_path: data/train.csv
  adapter_name: how2sign_csv
job_name: demo
";
        let a = canonical_serialize(&minimal());
        let b = canonical_serialize(&from_tree(parse_tree(reordered, "x").unwrap()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn canonical_bytes_are_sorted_and_compact() {
        let bytes = canonical_json(&json!({"b": 1, "a": {"d": true, "c": 1.5}}));
        assert_eq!(bytes, br#"{"a":{"c":1.5,"d":true},"b":1}"#);
    }

    #[test]
    fn canonical_fixpoint() {
        let c = minimal();
        let bytes = canonical_serialize(&c);
        let reparsed = from_tree(parse_tree(std::str::from_utf8(&bytes).unwrap(), "x").unwrap()).unwrap();
        assert_eq!(canonical_serialize(&reparsed), bytes);
        assert_eq!(reparsed, c);
    }

    #[test]
    fn seed_change_changes_bytes_and_hash() {
        let a = minimal();
        let mut b = a.clone();
        b.runtime.seed = 8;
        assert_ne!(canonical_serialize(&a), canonical_serialize(&b));
        assert_ne!(config_hash(&a, None).unwrap(), config_hash(&b, None).unwrap());
        assert_eq!(config_hash(&a, None).unwrap(), config_hash(&a.clone(), None).unwrap());
    }

    #[test]
    fn section_hash_isolated_from_other_sections() {
        let a = minimal();
        let mut b = a.clone();
        b.runtime.workers = 8;
        assert_eq!(
            config_hash(&a, Some("postprocess")).unwrap(),
            config_hash(&b, Some("postprocess")).unwrap()
        );
        b.postprocess.flatten = true;
        assert_ne!(
            config_hash(&a, Some("postprocess")).unwrap(),
            config_hash(&b, Some("postprocess")).unwrap()
        );
        assert_eq!(
            config_hash(&a, Some("nope")).unwrap_err(),
            ConfigError::UnknownField("nope".into())
        );
    }

    #[test]
    fn parse_override_values() {
        assert_eq!(
            parse_override("runtime.workers=4").unwrap(),
            ("runtime.workers".into(), json!(4))
        );
        assert_eq!(parse_override("a.b=abc").unwrap().1, json!("abc"));
        assert_eq!(parse_override("a.b=[1, 2]").unwrap().1, json!([1, 2]));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn experiment_inline_and_overrides() {
        let base: Value = parse_tree(MINIMAL, "x").unwrap();
        let tree = json!({
            "experiment_name": "abl",
            "jobs": [
                {"base": base.clone()},
                {"base": base, "overrides": {"postprocess.flatten": true}},
            ]
        });
        let exp = experiment_from_tree(tree, Path::new(".")).unwrap();
        assert_eq!(exp.jobs.len(), 2);
        assert!(!exp.continue_on_error);
        assert!(exp.jobs[1].postprocess.flatten);

        let empty = json!({"experiment_name": "e", "jobs": []});
        assert!(experiment_from_tree(empty, Path::new(".")).is_err());

        let bad = json!({"experiment_name": "e", "jobs": [{"base": {"job_name": "x"}}]});
        let err = experiment_from_tree(bad, Path::new(".")).unwrap_err();
        assert!(matches!(err, ExperimentError::Job(ExperimentJobError { index: 0, .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn leaf_paths() -> Vec<(&'static str, Value)> {
            vec![
                ("runtime.workers", json!(3)),
                ("runtime.seed", json!(99)),
                ("filter.min_duration_s", json!(1.25)),
                ("filter.require_text", json!(false)),
                ("postprocess.flatten", json!(true)),
                ("postprocess.normalize.scope", json!("per_frame")),
                ("output.max_samples_per_shard", json!(7)),
                ("processing.frame_rate_hz", json!(12.5)),
            ]
        }

        proptest! {
            #[test]
            fn merge_commutes_over_disjoint_paths(mask in 0u32..256, split in 0u32..256) {
                let base = minimal().to_tree();
                let mut o1 = Overrides::new();
                let mut o2 = Overrides::new();
                for (i, (p, v)) in leaf_paths().into_iter().enumerate() {
                    if mask & (1 << i) == 0 { continue; }
                    if split & (1 << i) == 0 { o1.insert(p.into(), v); } else { o2.insert(p.into(), v); }
                }
                let ab = merge_overrides(merge_overrides(base.clone(), &o1).unwrap(), &o2).unwrap();
                let ba = merge_overrides(merge_overrides(base, &o2).unwrap(), &o1).unwrap();
                prop_assert_eq!(canonical_json(&ab), canonical_json(&ba));
            }

            #[test]
            fn serialize_load_roundtrip(seed in any::<u64>(), workers in 1u32..64, fps in 0.1f64..120.0) {
                let mut c = minimal();
                c.runtime.seed = seed;
                c.runtime.workers = workers;
                c.processing.frame_rate_hz = fps;
                let bytes = canonical_serialize(&c);
                let back = from_tree(parse_tree(std::str::from_utf8(&bytes).unwrap(), "x").unwrap()).unwrap();
                prop_assert_eq!(canonical_serialize(&back), bytes);
            }
        }
    }
}
