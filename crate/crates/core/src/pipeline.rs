//! Staged job execution: manifest → process → postprocess → export, each
//! stage checkpointed by a content hash so completed work is skipped on
//! resume.
//!
//! Run layout under `output_root/run_id/`:
//!
//! ```text
//! manifest.csv  rejects.csv  report.json
//! checkpoints/stage.{name}.json
//! manifest/  process/  postprocess/  shards/
//! tmp/{stage}/        in-flight or quarantined stage output
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::config::{
    canonical_json, config_hash_sections, ConfigError, Digest, ExperimentConfig, JobConfig, Mode, NormalizeScope,
};
use crate::export::{self, Element, SampleMeta, SampleRecord, ShardEntry, ShardIndex, ShardSpec};
use crate::extractor::protocol::{FramePayload, FrameRequest};
use crate::extractor::{self, ExtractorError, ExtractorFactory, ExtractorSpec, Session};
use crate::geometry::{self, BBox, Region};
use crate::manifest::{self, Manifest, ManifestRecord, Reject, RejectReason};
use crate::mediaio::{self, MediaBackend};
use crate::posepost::{self, Channel, CoordinateSpace, KeypointPreset, LandmarkClip, PosepostError};
use crate::registry::{Kind, PostprocessKind, Registry, RegistryError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Manifest,
    Process,
    Postprocess,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Manifest, Stage::Process, Stage::Postprocess, Stage::Export];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Manifest => "manifest",
            Stage::Process => "process",
            Stage::Postprocess => "postprocess",
            Stage::Export => "export",
        }
    }

    /// Directory holding the stage's committed outputs.
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Export => "shards",
            s => s.as_str(),
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("invalid job: {0}")]
    Invalid(String),
    #[error("stage {stage} failed: {cause}")]
    StageFailure { stage: Stage, cause: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl PipelineError {
    /// Problems found before any stage ran.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PipelineError::Config(_) | PipelineError::Registry(_) | PipelineError::Invalid(_)
        )
    }

    fn stage(stage: Stage, cause: impl std::fmt::Display) -> Self {
        PipelineError::StageFailure {
            stage,
            cause: cause.to_string(),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    #[serde(rename = "in")]
    pub input: u64,
    pub out: u64,
    pub rejected: u64,
}

impl Counts {
    pub fn balanced(&self) -> bool {
        self.input == self.out + self.rejected
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: Stage,
    pub input_hash: String,
    /// RFC 3339, UTC.
    pub completed_at: String,
    pub counts: Counts,
    /// Run the outputs were copied from, when reused from a sibling run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_run: Option<String>,
}

/// Where a stage's outputs came from in this run.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub marker: StageMarker,
    pub reused: bool,
}

// ---------------------------------------------------------------------------
// hashes and ids

/// Hash of the config minus `runtime.output_root` and `runtime.resume`:
/// those say where and how to run, not what to produce.
pub fn job_hash(config: &JobConfig) -> Digest {
    let mut tree = config.to_tree();
    if let Some(rt) = tree.get_mut("runtime").and_then(Value::as_object_mut) {
        rt.remove("output_root");
        rt.remove("resume");
    }
    Digest::of(&canonical_json(&tree))
}

/// `job_name` made filesystem-safe, a dash, and 12 hex digits of [`job_hash`].
pub fn run_id(config: &JobConfig) -> String {
    let mut name = manifest::sanitize_key(&config.job_name);
    if name.is_empty() {
        name = "job".into();
    }
    format!("{name}-{}", &job_hash(config).to_hex()[..12])
}

/// SHA-256 over the stage name, the stage's config-subtree hash and the
/// upstream hash.
pub fn stage_hash(stage: Stage, subtree: &Digest, upstream: &Digest) -> Digest {
    let mut bytes = stage.as_str().as_bytes().to_vec();
    bytes.extend_from_slice(&subtree.0);
    bytes.extend_from_slice(&upstream.0);
    Digest::of(&bytes)
}

/// Config paths each stage depends on.
pub fn stage_sections(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Manifest => &["dataset", "filter"],
        Stage::Process => &["processing", "runtime.seed"],
        Stage::Postprocess => &["postprocess"],
        Stage::Export => &["output", "runtime.workers"],
    }
}

/// Hash of a stage's config subtree; the postprocess stage also folds in the
/// resolved preset contents.
pub fn stage_subtree_hash(
    stage: Stage,
    config: &JobConfig,
    preset: Option<&KeypointPreset>,
) -> Result<Digest, ConfigError> {
    let base = config_hash_sections(config, stage_sections(stage))?;
    Ok(match (stage, preset) {
        (Stage::Postprocess, Some(p)) => {
            let mut bytes = base.0.to_vec();
            bytes.extend(p.canonical_bytes());
            Digest::of(&bytes)
        }
        _ => base,
    })
}

/// Manifest-stage upstream: retained records plus the reject list.
pub fn manifest_upstream(retained: &Manifest, rejects: &[Reject]) -> Digest {
    let mut sorted: Vec<&Reject> = rejects.iter().collect();
    sorted.sort();
    let mut bytes = manifest::manifest_hash(retained).0.to_vec();
    for r in sorted {
        bytes.extend(format!("{}\x1f{}\x1f{}\n", r.sample_id, r.stage, r.reason).bytes());
    }
    Digest::of(&bytes)
}

/// Item `i` goes to worker `i mod W`; order within a worker is kept.
pub fn partition_work<T>(items: impl IntoIterator<Item = T>, workers: usize) -> Vec<Vec<T>> {
    let w = workers.max(1);
    let mut parts: Vec<Vec<T>> = (0..w).map(|_| Vec::new()).collect();
    for (i, item) in items.into_iter().enumerate() {
        parts[i % w].push(item);
    }
    parts
}

// ---------------------------------------------------------------------------
// rejects

/// Append one row to a rejects CSV, writing the header for a new file.
pub fn record_reject(path: &Path, reject: &Reject) -> Result<(), PipelineError> {
    let fresh = !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(manifest::REJECTS_HEADER).map_err(|e| io_err(path, e))?;
    }
    w.write_record([&reject.sample_id, &reject.stage, &reject.reason])
        .map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Shared append-only reject log for one stage's workers.
pub struct RejectSink {
    path: PathBuf,
    rows: Mutex<Vec<Reject>>,
}

impl RejectSink {
    pub fn new(path: &Path) -> Self {
        RejectSink {
            path: path.to_path_buf(),
            rows: Mutex::new(Vec::new()),
        }
    }

    pub fn record(&self, reject: Reject) -> Result<(), PipelineError> {
        let mut rows = self.rows.lock().expect("reject sink lock");
        record_reject(&self.path, &reject)?;
        rows.push(reject);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.lock().expect("reject sink lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rewrite the log sorted so committed output is order-independent.
    pub fn finish(self) -> Result<Vec<Reject>, PipelineError> {
        let mut rows = self.rows.into_inner().expect("reject sink lock");
        rows.sort();
        manifest::write_rejects_csv(&self.path, &rows).map_err(|e| io_err(&self.path, e))?;
        Ok(rows)
    }
}

// ---------------------------------------------------------------------------
// persisted per-sample state between stages

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Landmarks {
        file: String,
        backend: String,
        fps: f64,
        space: CoordinateSpace,
        channels: Vec<Channel>,
        shape: Vec<usize>,
    },
    Clip {
        file: String,
        extension: String,
    },
}

impl Payload {
    fn file(&self) -> &str {
        match self {
            Payload::Landmarks { file, .. } | Payload::Clip { file, .. } => file,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleState {
    pub key: String,
    pub sample_id: String,
    pub video_id: String,
    pub start_s: Option<f64>,
    pub end_s: Option<f64>,
    pub text: Option<String>,
    pub split: Option<String>,
    pub processor: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleIndex {
    pub samples: Vec<SampleState>,
}

impl SampleIndex {
    pub const FILE_NAME: &'static str = "index.json";

    fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        let path = dir.join(Self::FILE_NAME);
        let bytes = serde_json::to_vec_pretty(self).expect("index serializes");
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))
    }

    fn read(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(Self::FILE_NAME);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| io_err(&path, e))
    }
}

const SAMPLES_DIR: &str = "samples";

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub input_hash: String,
    pub counts: Counts,
    pub reused: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub job_name: String,
    pub run_id: String,
    pub config_hash: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub stages: Vec<StageReport>,
    /// `stage/reason` → count.
    pub rejects: BTreeMap<String, u64>,
    /// Paths relative to the run directory.
    pub shards: Vec<ShardEntry>,
    pub samples_exported: u64,
}

impl RunReport {
    pub const FILE_NAME: &'static str = "report.json";

    /// Pretty JSON with keys sorted at every level.
    pub fn to_bytes(&self) -> Vec<u8> {
        let v = serde_json::to_value(self).expect("report serializes");
        let mut out = serde_json::to_vec_pretty(&v).expect("report serializes");
        out.push(b'\n');
        out
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

// ---------------------------------------------------------------------------
// context

type CommitHook = Box<dyn Fn(Stage) + Send + Sync>;

#[derive(Default)]
pub struct ExecuteOptions {
    /// Called after each stage's marker is in place.
    pub after_commit: Option<CommitHook>,
}

/// Validated configuration plus everything one run accumulates.
pub struct RunContext {
    pub config: JobConfig,
    pub run_id: String,
    pub run_dir: PathBuf,
    pub manifest: Option<Manifest>,
    pub stage_records: Vec<StageRecord>,
    pub rejects: Vec<Reject>,
    pub shard_index: Option<ShardIndex>,
    registry: Registry,
    preset: Option<KeypointPreset>,
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Nanos, true)
}

fn copy_dir(src: &Path, dst: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dst)?;
    for entry in fs::read_dir(src)? {
        let entry = entry?;
        let to = dst.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &to)?;
        } else {
            fs::copy(entry.path(), &to)?;
        }
    }
    Ok(())
}

fn remove_path(p: &Path) -> std::io::Result<()> {
    match fs::symlink_metadata(p) {
        Ok(m) if m.is_dir() => fs::remove_dir_all(p),
        Ok(_) => fs::remove_file(p),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

fn is_run_suffix(s: &str) -> bool {
    s.len() == 12 && s.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

impl RunContext {
    /// Validate, build the registry, resolve names and create the run dir.
    pub fn new(config: &JobConfig) -> Result<Self, PipelineError> {
        let (registry, preset) = check_job(config)?;
        let run_id = run_id(config);
        let run_dir = config.runtime.output_root.join(&run_id);
        fs::create_dir_all(run_dir.join("checkpoints")).map_err(|e| io_err(&run_dir, e))?;
        Ok(RunContext {
            config: config.clone(),
            run_id,
            run_dir,
            manifest: None,
            stage_records: Vec::new(),
            rejects: Vec::new(),
            shard_index: None,
            registry,
            preset,
        })
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.dir_name())
    }

    pub fn tmp_dir(&self, stage: Stage) -> PathBuf {
        self.run_dir.join("tmp").join(stage.as_str())
    }

    pub fn marker_path(dir: &Path, stage: Stage) -> PathBuf {
        dir.join("checkpoints").join(format!("stage.{}.json", stage.as_str()))
    }

    pub fn read_marker(run_dir: &Path, stage: Stage) -> Option<StageMarker> {
        let bytes = fs::read(Self::marker_path(run_dir, stage)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn write_marker(&self, marker: &StageMarker) -> Result<(), PipelineError> {
        let path = Self::marker_path(&self.run_dir, marker.stage);
        let tmp = path.with_extension("json.tmp");
        let mut bytes = serde_json::to_vec_pretty(marker).expect("marker serializes");
        bytes.push(b'\n');
        fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
    }

    /// Other runs of the same job under the output root.
    fn sibling_runs(&self) -> Vec<PathBuf> {
        let prefix = format!("{}-", &self.run_id[..self.run_id.len() - 13]);
        let Ok(rd) = fs::read_dir(&self.config.runtime.output_root) else {
            return Vec::new();
        };
        let mut out: Vec<PathBuf> = rd
            .filter_map(|e| e.ok())
            .filter(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                name != self.run_id && name.strip_prefix(&prefix).is_some_and(is_run_suffix) && e.path().is_dir()
            })
            .map(|e| e.path())
            .collect();
        out.sort();
        out
    }

    /// Drop markers and outputs from `stage` on, so nothing stale survives
    /// a re-execution.
    fn invalidate_from(&self, stage: Stage) -> Result<(), PipelineError> {
        for s in Stage::ALL.into_iter().filter(|s| *s >= stage) {
            let m = Self::marker_path(&self.run_dir, s);
            remove_path(&m).map_err(|e| io_err(&m, e))?;
            let d = self.stage_dir(s);
            remove_path(&d).map_err(|e| io_err(&d, e))?;
        }
        Ok(())
    }

    /// Move tmp output into place and refresh the top-level views.
    fn commit_dir(&self, stage: Stage) -> Result<(), PipelineError> {
        let tmp = self.tmp_dir(stage);
        let dst = self.stage_dir(stage);
        remove_path(&dst).map_err(|e| io_err(&dst, e))?;
        fs::rename(&tmp, &dst).map_err(|e| io_err(&dst, e))?;
        let tmp_root = self.run_dir.join("tmp");
        if fs::read_dir(&tmp_root).map(|mut d| d.next().is_none()).unwrap_or(false) {
            let _ = fs::remove_dir(&tmp_root);
        }
        self.rebuild_views(stage)
    }

    /// `manifest.csv` and `rejects.csv` at the run root, from committed
    /// stages up to `upto`.
    fn rebuild_views(&self, upto: Stage) -> Result<(), PipelineError> {
        let src = self.stage_dir(Stage::Manifest).join("manifest.csv");
        let view = self.run_dir.join("manifest.csv");
        if src.exists() {
            fs::copy(&src, &view).map_err(|e| io_err(&view, e))?;
        }
        let mut rows = Vec::new();
        for s in Stage::ALL.into_iter().filter(|s| *s <= upto) {
            let p = self.stage_dir(s).join("rejects.csv");
            if p.exists() {
                rows.extend(manifest::read_rejects_csv(&p).map_err(|e| io_err(&p, e))?);
            }
        }
        let view = self.run_dir.join("rejects.csv");
        manifest::write_rejects_csv(&view, &rows).map_err(|e| io_err(&view, e))
    }

    /// Find a completed stage with this hash: first in this run, then in
    /// sibling runs (copied in). Returns the marker now in effect.
    fn try_reuse(&self, stage: Stage, hash: &Digest) -> Result<Option<StageMarker>, PipelineError> {
        if !self.config.runtime.resume {
            return Ok(None);
        }
        let hex = hash.to_hex();
        if let Some(m) = Self::read_marker(&self.run_dir, stage) {
            if m.input_hash == hex && self.stage_dir(stage).is_dir() {
                self.rebuild_views(stage)?;
                return Ok(Some(m));
            }
        }
        for sibling in self.sibling_runs() {
            let Some(m) = Self::read_marker(&sibling, stage) else {
                continue;
            };
            let src = sibling.join(stage.dir_name());
            if m.input_hash != hex || !src.is_dir() {
                continue;
            }
            self.invalidate_from(stage)?;
            let tmp = self.tmp_dir(stage);
            remove_path(&tmp).map_err(|e| io_err(&tmp, e))?;
            copy_dir(&src, &tmp).map_err(|e| io_err(&tmp, e))?;
            self.commit_dir(stage)?;
            let marker = StageMarker {
                source_run: Some(
                    m.source_run
                        .clone()
                        .unwrap_or_else(|| sibling.file_name().unwrap_or_default().to_string_lossy().into_owned()),
                ),
                ..m
            };
            self.write_marker(&marker)?;
            return Ok(Some(marker));
        }
        Ok(None)
    }

    /// Reuse or execute one stage. `work` writes into the tmp dir and
    /// returns the stage counts.
    fn run_stage<F>(&mut self, stage: Stage, hash: Digest, opts: &ExecuteOptions, work: F) -> Result<(), PipelineError>
    where
        F: FnOnce(&mut Self, &Path) -> Result<Counts, PipelineError>,
    {
        if let Some(marker) = self.try_reuse(stage, &hash)? {
            log::info!("{stage}: reusing outputs ({})", &marker.input_hash[..12]);
            self.stage_records.push(StageRecord { marker, reused: true });
        } else {
            self.invalidate_from(stage)?;
            let tmp = self.tmp_dir(stage);
            remove_path(&tmp).map_err(|e| io_err(&tmp, e))?;
            fs::create_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
            let counts = work(self, &tmp)?;
            if !counts.balanced() {
                return Err(PipelineError::stage(stage, format!("unbalanced counts {counts:?}")));
            }
            self.commit_dir(stage)?;
            let marker = StageMarker {
                stage,
                input_hash: hash.to_hex(),
                completed_at: now_rfc3339(),
                counts,
                source_run: None,
            };
            self.write_marker(&marker)?;
            self.stage_records.push(StageRecord { marker, reused: false });
        }
        if let Some(hook) = &opts.after_commit {
            hook(stage);
        }
        Ok(())
    }

    fn last_hash(&self) -> Digest {
        let m = &self.stage_records.last().expect("a stage has run").marker;
        Digest::from_hex(&m.input_hash).expect("markers hold hex digests")
    }

    /// Run all four stages in order.
    pub fn run(&mut self, opts: &ExecuteOptions) -> Result<(), PipelineError> {
        // manifest: ingest and filter on every run
        let adapter = self.registry.dataset(&self.config.dataset.adapter_name)?;
        let ingested = adapter
            .ingest(&self.config.dataset.source_path, &self.config.dataset.params)
            .map_err(|e| PipelineError::stage(Stage::Manifest, e))?;
        let (mut retained, mut rejects) = manifest::filter_segments(&ingested.manifest, &self.config.filter);
        rejects.splice(0..0, ingested.rejects.iter().cloned());
        let collisions: BTreeSet<String> = manifest::key_collisions(&retained).into_iter().collect();
        if !collisions.is_empty() {
            retained.records.retain(|r| !collisions.contains(&r.sample_id));
            rejects.extend(
                collisions
                    .iter()
                    .map(|id| Reject::new(id, manifest::INGEST_STAGE, RejectReason::DuplicateKey)),
            );
        }
        rejects.sort();
        let upstream = manifest_upstream(&retained, &rejects);
        let subtree = stage_subtree_hash(Stage::Manifest, &self.config, None)?;
        let rows = ingested.rows as u64;
        self.run_stage(
            Stage::Manifest,
            stage_hash(Stage::Manifest, &subtree, &upstream),
            opts,
            |_, tmp| {
                manifest::write_manifest_csv(&tmp.join("manifest.csv"), &retained)
                    .map_err(|e| PipelineError::stage(Stage::Manifest, e))?;
                manifest::write_rejects_csv(&tmp.join("rejects.csv"), &rejects)
                    .map_err(|e| PipelineError::stage(Stage::Manifest, e))?;
                Ok(Counts {
                    input: rows,
                    out: retained.records.len() as u64,
                    rejected: rejects.len() as u64,
                })
            },
        )?;
        self.rejects.extend(rejects.iter().cloned());
        self.manifest = Some(retained);

        let subtree = stage_subtree_hash(Stage::Process, &self.config, None)?;
        let h = stage_hash(Stage::Process, &subtree, &self.last_hash());
        self.run_stage(Stage::Process, h, opts, |ctx, tmp| ctx.process_stage(tmp))?;
        self.collect_rejects(Stage::Process)?;

        let subtree = stage_subtree_hash(Stage::Postprocess, &self.config, self.preset.as_ref())?;
        let h = stage_hash(Stage::Postprocess, &subtree, &self.last_hash());
        self.run_stage(Stage::Postprocess, h, opts, |ctx, tmp| ctx.postprocess_stage(tmp))?;
        self.collect_rejects(Stage::Postprocess)?;

        let subtree = stage_subtree_hash(Stage::Export, &self.config, None)?;
        let h = stage_hash(Stage::Export, &subtree, &self.last_hash());
        self.run_stage(Stage::Export, h, opts, |ctx, tmp| ctx.export_stage(tmp))?;
        self.shard_index =
            Some(ShardIndex::read(&self.stage_dir(Stage::Export)).map_err(|e| PipelineError::stage(Stage::Export, e))?);
        Ok(())
    }

    fn collect_rejects(&mut self, stage: Stage) -> Result<(), PipelineError> {
        let p = self.stage_dir(stage).join("rejects.csv");
        if p.exists() {
            self.rejects
                .extend(manifest::read_rejects_csv(&p).map_err(|e| io_err(&p, e))?);
        }
        Ok(())
    }

    fn workers(&self) -> usize {
        self.config.runtime.workers.max(1) as usize
    }

    fn media_for(&self, path: &Path) -> Result<std::sync::Arc<dyn MediaBackend>, RegistryError> {
        let name = match self.config.processing.media.backend_name.as_str() {
            "auto" if path.to_string_lossy().ends_with(mediaio::SYNTHETIC_EXTENSION) => "synthetic",
            "auto" => "command",
            other => other,
        };
        self.registry.mediaio(name)
    }

    // -----------------------------------------------------------------------
    // process

    fn process_stage(&mut self, tmp: &Path) -> Result<Counts, PipelineError> {
        let records: Vec<ManifestRecord> = self.manifest.as_ref().expect("manifest stage ran").records.clone();
        let samples_dir = tmp.join(SAMPLES_DIR);
        fs::create_dir_all(&samples_dir).map_err(|e| io_err(&samples_dir, e))?;
        let sink = RejectSink::new(&tmp.join("rejects.csv"));
        let parts = partition_work(records.iter().enumerate(), self.workers());
        let ctx: &RunContext = self;
        let results: Vec<Result<Vec<(usize, SampleState)>, PipelineError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = parts
                .into_iter()
                .map(|part| {
                    let sink = &sink;
                    let samples_dir = &samples_dir;
                    scope.spawn(move || {
                        let mut worker = ProcessWorker::new(ctx);
                        let mut done = Vec::new();
                        for (pos, rec) in part {
                            match worker.process(rec, samples_dir)? {
                                Ok(state) => done.push((pos, state)),
                                Err(reason) => {
                                    sink.record(Reject::new(&rec.sample_id, Stage::Process.as_str(), reason))?
                                }
                            }
                        }
                        Ok(done)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        let mut done = Vec::new();
        for r in results {
            done.extend(r?);
        }
        done.sort_by_key(|(pos, _)| *pos);
        let rejected = sink.finish()?.len() as u64;
        let index = SampleIndex {
            samples: done.into_iter().map(|(_, s)| s).collect(),
        };
        index.write(tmp)?;
        Ok(Counts {
            input: records.len() as u64,
            out: index.samples.len() as u64,
            rejected,
        })
    }

    // -----------------------------------------------------------------------
    // postprocess

    fn postprocess_stage(&mut self, tmp: &Path) -> Result<Counts, PipelineError> {
        let src_dir = self.stage_dir(Stage::Process);
        let input = SampleIndex::read(&src_dir)?;
        let out_samples = tmp.join(SAMPLES_DIR);
        fs::create_dir_all(&out_samples).map_err(|e| io_err(&out_samples, e))?;
        let sink = RejectSink::new(&tmp.join("rejects.csv"));
        let notes: Mutex<Vec<(String, usize)>> = Mutex::new(Vec::new());
        let kind = self.registry.postprocessor(postprocessor_name(&self.config))?;
        let parts = partition_work(input.samples.iter().enumerate(), self.workers());
        let ctx: &RunContext = self;
        let results: Vec<Result<Vec<(usize, SampleState)>, PipelineError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = parts
                .into_iter()
                .map(|part| {
                    let (sink, notes, src_dir, out_samples) = (&sink, &notes, &src_dir, &out_samples);
                    scope.spawn(move || {
                        let mut done = Vec::new();
                        for (pos, state) in part {
                            match ctx.postprocess_one(kind, state, src_dir, out_samples)? {
                                Ok((s, empty)) => {
                                    if !empty.is_empty() {
                                        let mut n = notes.lock().expect("notes lock");
                                        n.extend(empty.into_iter().map(|t| (state.sample_id.clone(), t)));
                                    }
                                    done.push((pos, s));
                                }
                                Err(reason) => {
                                    sink.record(Reject::new(&state.sample_id, Stage::Postprocess.as_str(), reason))?
                                }
                            }
                        }
                        Ok(done)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        let mut done = Vec::new();
        for r in results {
            done.extend(r?);
        }
        done.sort_by_key(|(pos, _)| *pos);
        let rejected = sink.finish()?.len() as u64;
        let mut notes = notes.into_inner().expect("notes lock");
        if !notes.is_empty() {
            notes.sort();
            let path = tmp.join("notes.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
            w.write_record(["sample_id", "frame", "reason"])
                .map_err(|e| io_err(&path, e))?;
            for (id, t) in notes {
                w.write_record([id, t.to_string(), RejectReason::NoValidPoints.as_str().to_string()])
                    .map_err(|e| io_err(&path, e))?;
            }
            w.flush().map_err(|e| io_err(&path, e))?;
        }
        let index = SampleIndex {
            samples: done.into_iter().map(|(_, s)| s).collect(),
        };
        index.write(tmp)?;
        Ok(Counts {
            input: input.samples.len() as u64,
            out: index.samples.len() as u64,
            rejected,
        })
    }

    /// One sample through the landmark chain, or copied unchanged.
    #[allow(clippy::type_complexity)]
    fn postprocess_one(
        &self,
        kind: PostprocessKind,
        state: &SampleState,
        src_dir: &Path,
        out_samples: &Path,
    ) -> Result<Result<(SampleState, Vec<usize>), RejectReason>, PipelineError> {
        let src = src_dir.join(state.payload.file());
        let dst = out_samples.join(Path::new(state.payload.file()).file_name().expect("file name"));
        let (file, backend, fps, channels, shape) = match (&state.payload, kind) {
            (
                Payload::Landmarks {
                    file,
                    backend,
                    fps,
                    channels,
                    shape,
                    ..
                },
                PostprocessKind::Landmarks,
            ) => (file, backend, *fps, channels, shape),
            _ => {
                fs::copy(&src, &dst).map_err(|e| io_err(&dst, e))?;
                return Ok(Ok((state.clone(), Vec::new())));
            }
        };
        let fail = |e: PosepostError| PipelineError::stage(Stage::Postprocess, format!("{}: {e}", state.sample_id));
        let bytes = fs::read(&src).map_err(|e| io_err(&src, e))?;
        let arr = export::decode_array(&bytes).map_err(|e| PipelineError::stage(Stage::Postprocess, e))?;
        if arr.shape.len() != 3 || arr.shape != *shape {
            return Err(PipelineError::stage(
                Stage::Postprocess,
                format!(
                    "{}: expected a 3-d landmark array, found {:?}",
                    state.sample_id, arr.shape
                ),
            ));
        }
        let mut clip = LandmarkClip {
            sample_id: state.sample_id.clone(),
            backend_name: backend.clone(),
            fps,
            space: match &state.payload {
                Payload::Landmarks { space, .. } => *space,
                _ => unreachable!(),
            },
            channels: channels.clone(),
            frames: arr.shape[0],
            keypoints: arr.shape[1],
            data: arr.data,
        };
        clip.validate().map_err(fail)?;
        let pp = &self.config.postprocess;
        if let Some(preset) = &self.preset {
            clip = posepost::reduce_keypoints(&clip, preset).map_err(fail)?;
        }
        if pp.mask_invisible {
            clip = posepost::mask_invisible(&clip, pp.normalize.visibility_threshold);
        }
        let normalized = match posepost::unit_bbox_normalize(
            &clip,
            pp.normalize.scope,
            pp.normalize.visibility_threshold,
            pp.normalize.epsilon,
        ) {
            Ok(n) => n,
            Err(PosepostError::NoValidPoints(_)) if pp.normalize.scope == NormalizeScope::PerClip => {
                return Ok(Err(RejectReason::NoValidPoints));
            }
            Err(e) => return Err(fail(e)),
        };
        let mut clip = normalized.clip;
        if pp.drop_depth {
            clip = posepost::drop_depth(&clip).map_err(fail)?;
        }
        let (data, shape) = if pp.flatten {
            let m = posepost::flatten(&clip);
            (m.data, vec![m.rows, m.cols])
        } else {
            (clip.data.clone(), clip.shape().to_vec())
        };
        let bytes = export::encode_array(&data, &shape, Element::F8)
            .map_err(|e| PipelineError::stage(Stage::Postprocess, e))?;
        fs::write(&dst, bytes).map_err(|e| io_err(&dst, e))?;
        let mut out = state.clone();
        out.payload = Payload::Landmarks {
            file: file.clone(),
            backend: clip.backend_name.clone(),
            fps: clip.fps,
            space: clip.space,
            channels: clip.channels.clone(),
            shape,
        };
        Ok(Ok((out, normalized.empty_frames)))
    }

    // -----------------------------------------------------------------------
    // export

    fn export_stage(&mut self, tmp: &Path) -> Result<Counts, PipelineError> {
        self.registry.exporter("webdataset")?;
        let src_dir = self.stage_dir(Stage::Postprocess);
        let input = SampleIndex::read(&src_dir)?;
        let parts = partition_work(input.samples.iter(), self.workers());
        let out = &self.config.output;
        let results: Vec<Result<ShardIndex, PipelineError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = parts
                .into_iter()
                .enumerate()
                .map(|(w, part)| {
                    let src_dir = &src_dir;
                    scope.spawn(move || {
                        let spec = ShardSpec {
                            max_samples: out.max_samples_per_shard,
                            max_bytes: out.max_bytes_per_shard,
                            worker_id: w as u32,
                        };
                        let mut samples = Vec::with_capacity(part.len());
                        for s in part {
                            samples.push(export_record(s, src_dir)?);
                        }
                        export::write_shards(samples, &spec, tmp).map_err(|e| PipelineError::stage(Stage::Export, e))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        let mut index = ShardIndex::default();
        for r in results {
            index.shards.extend(r?.shards);
        }
        index.write(tmp).map_err(|e| PipelineError::stage(Stage::Export, e))?;
        let n = index.total_count();
        if n != input.samples.len() as u64 {
            return Err(PipelineError::stage(Stage::Export, "shard counts disagree with input"));
        }
        Ok(Counts {
            input: n,
            out: n,
            rejected: 0,
        })
    }

    pub fn report(&self, error: Option<&PipelineError>) -> RunReport {
        let mut rejects = BTreeMap::new();
        for r in &self.rejects {
            *rejects.entry(format!("{}/{}", r.stage, r.reason)).or_insert(0) += 1;
        }
        let shards: Vec<ShardEntry> = self
            .shard_index
            .iter()
            .flat_map(|i| i.shards.iter())
            .map(|s| ShardEntry {
                path: format!("{}/{}", Stage::Export.dir_name(), s.path),
                ..s.clone()
            })
            .collect();
        RunReport {
            job_name: self.config.job_name.clone(),
            run_id: self.run_id.clone(),
            config_hash: job_hash(&self.config).to_hex(),
            status: if error.is_some() { "failed" } else { "ok" }.into(),
            error: error.map(|e| e.to_string()),
            stages: self
                .stage_records
                .iter()
                .map(|r| StageReport {
                    stage: r.marker.stage,
                    input_hash: r.marker.input_hash.clone(),
                    counts: r.marker.counts,
                    reused: r.reused,
                })
                .collect(),
            rejects,
            samples_exported: shards.iter().map(|s| s.count).sum(),
            shards,
        }
    }

    fn write_report(&self, report: &RunReport) -> Result<PathBuf, PipelineError> {
        let path = self.run_dir.join(RunReport::FILE_NAME);
        fs::write(&path, report.to_bytes()).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

/// Everything a run checks before touching the filesystem: schema rules,
/// component names and the keypoint preset.
pub fn validate_job(config: &JobConfig) -> Result<(), PipelineError> {
    check_job(config).map(|_| ())
}

fn check_job(config: &JobConfig) -> Result<(Registry, Option<KeypointPreset>), PipelineError> {
    config.validate()?;
    let registry = Registry::for_job(config)?;
    registry.dataset(&config.dataset.adapter_name)?;
    registry.processor(config.processing.mode.as_str())?;
    registry.exporter("webdataset")?;
    registry.postprocessor(postprocessor_name(config))?;
    if let Some(ex) = &config.processing.extractor {
        if config.processing.mode == Mode::Pose {
            registry.extractor(&ex.backend_name)?;
        }
    }
    if let Some(d) = &config.processing.detector {
        registry.detector(&d.backend_name)?;
    }
    if config.processing.media.backend_name != "auto" {
        registry.mediaio(&config.processing.media.backend_name)?;
    }
    let preset = match (&config.postprocess.preset_name, postprocessor_name(config)) {
        (Some(name), "landmarks") => {
            Some(KeypointPreset::resolve(name).map_err(|e| PipelineError::Invalid(e.to_string()))?)
        }
        _ => None,
    };
    Ok((registry, preset))
}

fn postprocessor_name(config: &JobConfig) -> &'static str {
    if config.postprocess.enabled && config.processing.mode == Mode::Pose {
        "landmarks"
    } else {
        "passthrough"
    }
}

fn export_record(s: &SampleState, src_dir: &Path) -> Result<SampleRecord, PipelineError> {
    let path = src_dir.join(s.payload.file());
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    let (ext, payload) = match &s.payload {
        Payload::Landmarks { .. } => {
            let arr = export::decode_array(&bytes).map_err(|e| PipelineError::stage(Stage::Export, e))?;
            let f4 = export::encode_array(&arr.data, &arr.shape, Element::F4)
                .map_err(|e| PipelineError::stage(Stage::Export, e))?;
            ("pose.npy".to_string(), f4)
        }
        Payload::Clip { extension, .. } => (extension.clone(), bytes),
    };
    let meta = SampleMeta {
        sample_id: s.sample_id.clone(),
        video_id: s.video_id.clone(),
        start_s: s.start_s,
        end_s: s.end_s,
        processor: s.processor.clone(),
        split: s.split.clone(),
    };
    Ok(SampleRecord::new(
        &s.key,
        &meta,
        s.text.as_deref(),
        BTreeMap::from([(ext, payload)]),
    ))
}

// ---------------------------------------------------------------------------
// per-worker processing

struct ProcessWorker<'a> {
    ctx: &'a RunContext,
    session: Option<Session>,
}

fn classify(e: &ExtractorError) -> Option<RejectReason> {
    match e {
        ExtractorError::Protocol(_) => Some(RejectReason::ProtocolError),
        ExtractorError::BackendCrash { .. } => Some(RejectReason::BackendCrash),
        ExtractorError::Backend(_) => Some(RejectReason::BackendError),
        _ => None,
    }
}

impl<'a> ProcessWorker<'a> {
    fn new(ctx: &'a RunContext) -> Self {
        ProcessWorker { ctx, session: None }
    }

    fn session(&mut self) -> Result<&mut Session, PipelineError> {
        if self.session.is_none() {
            let cfg = self
                .ctx
                .config
                .processing
                .extractor
                .as_ref()
                .expect("pose mode has an extractor");
            let spec = ExtractorSpec::from_config(cfg, self.ctx.config.runtime.seed);
            let factory: std::sync::Arc<dyn ExtractorFactory> = self.ctx.registry.extractor(&cfg.backend_name)?;
            let s =
                extractor::handshake(factory.as_ref(), &spec).map_err(|e| PipelineError::stage(Stage::Process, e))?;
            self.session = Some(s);
        }
        Ok(self.session.as_mut().expect("just opened"))
    }

    /// Ok(Err(reason)) rejects the sample; Err aborts the stage.
    fn process(
        &mut self,
        rec: &ManifestRecord,
        samples_dir: &Path,
    ) -> Result<Result<SampleState, RejectReason>, PipelineError> {
        let cfg = &self.ctx.config;
        let key = manifest::sanitize_key(&rec.sample_id);
        let video = manifest::video_path(&cfg.dataset.source_path, &cfg.dataset.params, &rec.video_id);
        let media = self.ctx.media_for(&video)?;
        let reject = |reason: RejectReason, detail: &dyn std::fmt::Display| {
            log::warn!("{}: {reason}: {detail}", rec.sample_id);
            Ok(Err(reason))
        };
        let info = match media.probe(&video) {
            Ok(i) => i,
            Err(e) => return reject(RejectReason::DecodeFailure, &e),
        };
        let start = rec.start_s.unwrap_or(0.0);
        let end = rec.end_s.unwrap_or(info.duration_s);
        let frames = match mediaio::sample_times(start, end, cfg.processing.frame_rate_hz)
            .and_then(|times| media.decode_frames(&video, &times))
        {
            Ok(f) => f,
            Err(e) => return reject(RejectReason::DecodeFailure, &e),
        };

        let region: Option<BBox> = match (rec.bbox, &cfg.processing.detector) {
            (Some(b), _) => Some(b.clamp(info.width, info.height)),
            (None, Some(det)) => {
                let detector = self.ctx.registry.detector(&det.backend_name)?;
                let grid: Vec<_> = frames
                    .iter()
                    .step_by(det.sample_stride.max(1) as usize)
                    .cloned()
                    .collect();
                let found = detector
                    .detect(&grid, &det.params)
                    .map_err(|e| PipelineError::stage(Stage::Process, format!("detector: {e}")))?;
                let mut by_frame: BTreeMap<usize, Vec<geometry::Detection>> =
                    grid.iter().map(|f| (f.index, Vec::new())).collect();
                for d in found {
                    by_frame.entry(d.frame_index).or_default().push(d);
                }
                match geometry::select_signer_region(&by_frame, det.min_score) {
                    Region::Signer(b) => Some(b.clamp(info.width, info.height)),
                    Region::Skip(reason) => {
                        let r = match reason {
                            geometry::SkipReason::MultiPerson => RejectReason::MultiPerson,
                            geometry::SkipReason::NoDetection => RejectReason::NoDetection,
                        };
                        let detail = match reason {
                            geometry::SkipReason::MultiPerson => "more than one person in sampled frames",
                            geometry::SkipReason::NoDetection => "no person in sampled frames",
                        };
                        return reject(r, &detail);
                    }
                }
            }
            (None, None) => None,
        };

        let base = |payload: Payload, processor: String| SampleState {
            key: key.clone(),
            sample_id: rec.sample_id.clone(),
            video_id: rec.video_id.clone(),
            start_s: rec.start_s,
            end_s: rec.end_s,
            text: rec.text.clone(),
            split: rec.split.clone(),
            processor,
            payload,
        };

        match cfg.processing.mode {
            Mode::Pose => {
                let requests: Vec<FrameRequest> = frames
                    .iter()
                    .map(|f| FrameRequest {
                        index: f.index,
                        sample_id: rec.sample_id.clone(),
                        width: f.width,
                        height: f.height,
                        bbox: region,
                        payload: FramePayload::FileRef {
                            path: f.path.clone(),
                            frame_index: f.frame_index,
                        },
                    })
                    .collect();
                let session = self.session()?;
                let clip =
                    match extractor::extract_clip(session, &rec.sample_id, &requests, cfg.processing.frame_rate_hz) {
                        Ok(c) => c,
                        Err(e) => match classify(&e) {
                            Some(reason) => {
                                self.session = None;
                                return reject(reason, &e);
                            }
                            None => return Err(PipelineError::stage(Stage::Process, e)),
                        },
                    };
                let file = format!("{SAMPLES_DIR}/{key}.npy");
                let shape = clip.shape().to_vec();
                let bytes = export::encode_array(&clip.data, &shape, Element::F8)
                    .map_err(|e| PipelineError::stage(Stage::Process, e))?;
                let path = samples_dir.join(format!("{key}.npy"));
                fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
                let processor = format!("pose:{}", clip.backend_name);
                Ok(Ok(base(
                    Payload::Landmarks {
                        file,
                        backend: clip.backend_name,
                        fps: clip.fps,
                        space: clip.space,
                        channels: clip.channels,
                        shape,
                    },
                    processor,
                )))
            }
            Mode::Video => {
                let crop = cfg.processing.crop.clone().unwrap_or_default();
                let Some(region) = region else {
                    return reject(RejectReason::NoDetection, &"no signer region");
                };
                let padded = geometry::pad_box(&region, crop.pad_fraction, info.width, info.height);
                let aspect = match crop.target_aspect {
                    Some(a) => geometry::expand_to_aspect(&padded, a, info.width, info.height).unwrap_or(padded),
                    None => padded,
                };
                let resize = crop.resize.as_ref().map(|r| (r.width, r.height));
                let plan = match geometry::make_crop_plan(&aspect, resize, info.width, info.height) {
                    Ok(p) => p,
                    Err(e) => return reject(RejectReason::DegenerateBox, &e),
                };
                let ext = media.clip_extension();
                let file = format!("{SAMPLES_DIR}/{key}.{ext}");
                let out = samples_dir.join(format!("{key}.{ext}"));
                let rendered = media.render_clip(&video, start, end, &plan, &out);
                if let Err(e) = rendered {
                    let _ = fs::remove_file(&out);
                    return reject(RejectReason::RenderFailure, &e);
                }
                if ext == "clip.json" {
                    // the descriptor records where it was written; keep it
                    // relative so outputs do not depend on the run location
                    let desc = mediaio::RenderedClip {
                        input: video.file_name().map(PathBuf::from).unwrap_or_default(),
                        start_s: start,
                        end_s: end,
                        plan,
                        output: PathBuf::from(format!("{key}.{ext}")),
                    };
                    fs::write(&out, serde_json::to_vec(&desc).expect("descriptor")).map_err(|e| io_err(&out, e))?;
                }
                let backend = match cfg.processing.media.backend_name.as_str() {
                    "auto" if ext == "clip.json" => "synthetic",
                    "auto" => "command",
                    other => other,
                };
                Ok(Ok(base(
                    Payload::Clip {
                        file,
                        extension: ext.to_string(),
                    },
                    format!("video:{backend}"),
                )))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// entry points

/// Run one job. The report is written to `run_dir/report.json` whether the
/// run succeeds or a stage fails.
pub fn execute_job(config: &JobConfig, opts: &ExecuteOptions) -> Result<RunReport, PipelineError> {
    let mut ctx = RunContext::new(config)?;
    let result = ctx.run(opts);
    let report = ctx.report(result.as_ref().err());
    ctx.write_report(&report)?;
    result.map(|_| report)
}

pub fn run_dir(config: &JobConfig) -> PathBuf {
    config.runtime.output_root.join(run_id(config))
}

#[derive(Debug)]
pub struct JobOutcome {
    pub index: usize,
    pub run_id: String,
    pub result: Result<RunReport, PipelineError>,
}

/// Run jobs in order, stopping at the first failure unless the experiment
/// says to continue.
pub fn execute_experiment(exp: &ExperimentConfig, opts: &ExecuteOptions) -> Vec<JobOutcome> {
    let mut out = Vec::new();
    for (index, job) in exp.jobs.iter().enumerate() {
        let result = execute_job(job, opts);
        let failed = result.is_err();
        if let Err(e) = &result {
            log::error!("experiment {} job {index}: {e}", exp.experiment_name);
        }
        out.push(JobOutcome {
            index,
            run_id: run_id(job),
            result,
        });
        if failed && !exp.continue_on_error {
            break;
        }
    }
    out
}

/// Names a job resolves, for listing alongside the registry.
pub fn referenced_components(config: &JobConfig) -> Vec<(Kind, String)> {
    let mut v = vec![
        (Kind::Dataset, config.dataset.adapter_name.clone()),
        (Kind::Processor, config.processing.mode.as_str().to_string()),
        (Kind::Postprocessor, postprocessor_name(config).to_string()),
        (Kind::Exporter, "webdataset".to_string()),
    ];
    if let Some(ex) = &config.processing.extractor {
        v.push((Kind::Extractor, ex.backend_name.clone()));
    }
    if let Some(d) = &config.processing.detector {
        v.push((Kind::Detector, d.backend_name.clone()));
    }
    v
}
