//! Canonical segment manifests: ingestion through adapters, column alias
//! normalization, text cleanup, filtering and content hashing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::config::{canonical_json, Digest, FilterConfig, Params};
use crate::geometry::BBox;

pub const MANIFEST_HEADER: [&str; 9] = [
    "sample_id",
    "video_id",
    "start_s",
    "end_s",
    "text",
    "split",
    "signer_id",
    "bbox",
    "extras_json",
];

pub const REJECTS_HEADER: [&str; 3] = ["sample_id", "stage", "reason"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifestError {
    #[error("unknown dataset adapter `{name}` (closest: {})", suggestions.join(", "))]
    UnknownAdapter { name: String, suggestions: Vec<String> },
    #[error("cannot read {path}: {message}")]
    SourceUnreadable { path: String, message: String },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("headers {headers:?} all map to `{field}`")]
    AmbiguousAlias { field: Field, headers: Vec<String> },
    #[error("bad adapter params: {0}")]
    BadParams(String),
}

/// Canonical manifest columns an alias can point at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    SampleId,
    VideoId,
    StartS,
    EndS,
    /// Only transcript sources: end = start + duration when end is absent.
    DurationS,
    Text,
    Split,
    SignerId,
    Bbox,
    /// Only the canonical CSV: a JSON object of extras.
    ExtrasJson,
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("field serializes");
        f.write_str(v.as_str().expect("string"))
    }
}

/// Lowercased source header -> canonical field.
pub type AliasTable = BTreeMap<String, Field>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Column {
    Field(Field),
    Extra(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub video_id: String,
    pub start_s: Option<f64>,
    pub end_s: Option<f64>,
    pub text: Option<String>,
    pub split: Option<String>,
    pub signer_id: Option<String>,
    pub bbox: Option<BBox>,
    pub extras: BTreeMap<String, String>,
}

impl ManifestRecord {
    pub fn new(sample_id: &str, video_id: &str) -> Self {
        ManifestRecord {
            sample_id: sample_id.to_string(),
            video_id: video_id.to_string(),
            start_s: None,
            end_s: None,
            text: None,
            split: None,
            signer_id: None,
            bbox: None,
            extras: BTreeMap::new(),
        }
    }

    pub fn duration_s(&self) -> Option<f64> {
        Some(self.end_s? - self.start_s?)
    }

    /// Fields in persisted column order; absent values render as "".
    pub fn row(&self) -> [String; 9] {
        let opt = |v: &Option<String>| v.clone().unwrap_or_default();
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.sample_id.clone(),
            self.video_id.clone(),
            num(self.start_s),
            num(self.end_s),
            opt(&self.text),
            opt(&self.split),
            opt(&self.signer_id),
            self.bbox
                .map(|b| b.to_array().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
                .unwrap_or_default(),
            if self.extras.is_empty() {
                String::new()
            } else {
                String::from_utf8(canonical_json(&serde_json::to_value(&self.extras).expect("map"))).expect("utf8")
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub source_path: PathBuf,
    pub adapter_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    MalformedRow,
    MissingId,
    BadTiming,
    BadBbox,
    MissingText,
    MissingTiming,
    TooShort,
    TooLong,
    DuplicateKey,
    MultiPerson,
    NoDetection,
    DecodeFailure,
    ProtocolError,
    BackendCrash,
    BackendError,
    DegenerateBox,
    RenderFailure,
    NoValidPoints,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::MalformedRow => "MalformedRow",
            RejectReason::MissingId => "MissingId",
            RejectReason::BadTiming => "BadTiming",
            RejectReason::BadBbox => "BadBbox",
            RejectReason::MissingText => "MissingText",
            RejectReason::MissingTiming => "MissingTiming",
            RejectReason::TooShort => "TooShort",
            RejectReason::TooLong => "TooLong",
            RejectReason::DuplicateKey => "DuplicateKey",
            RejectReason::MultiPerson => "MultiPerson",
            RejectReason::NoDetection => "NoDetection",
            RejectReason::DecodeFailure => "DecodeFailure",
            RejectReason::ProtocolError => "ProtocolError",
            RejectReason::BackendCrash => "BackendCrash",
            RejectReason::BackendError => "BackendError",
            RejectReason::DegenerateBox => "DegenerateBox",
            RejectReason::RenderFailure => "RenderFailure",
            RejectReason::NoValidPoints => "NoValidPoints",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One row of `rejects.csv`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reject {
    pub sample_id: String,
    pub stage: String,
    pub reason: String,
}

impl Reject {
    pub fn new(sample_id: &str, stage: &str, reason: RejectReason) -> Self {
        Reject {
            sample_id: sample_id.to_string(),
            stage: stage.to_string(),
            reason: reason.as_str().to_string(),
        }
    }
}

/// An ingested manifest plus the rows that could not become records.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub manifest: Manifest,
    pub rejects: Vec<Reject>,
    /// Data rows seen in the source, rejected ones included.
    pub rows: usize,
}

pub const INGEST_STAGE: &str = "manifest";

// ---------------------------------------------------------------------------
// text and values

/// NFC, whitespace runs collapsed to one space, trimmed.
pub fn normalize_text(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Seconds as a decimal number or `[H:]MM:SS[.fff]`. Empty means absent.
pub fn parse_time(s: &str) -> Result<Option<f64>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    let bad = || format!("unparsable time {s:?}");
    let v = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() > 3 {
            return Err(bad());
        }
        let (secs, units) = parts.split_last().expect("non-empty");
        let mut total: f64 = 0.0;
        for u in units {
            let n: u64 = u.parse().map_err(|_| bad())?;
            total = total * 60.0 + n as f64;
        }
        let sec: f64 = secs.parse().map_err(|_| bad())?;
        if !(0.0..60.0).contains(&sec) && !units.is_empty() {
            return Err(bad());
        }
        total * 60.0 + sec
    } else {
        s.parse::<f64>().map_err(|_| bad())?
    };
    if !v.is_finite() || v < 0.0 {
        return Err(bad());
    }
    Ok(Some(v))
}

/// `x0,y0,x1,y1` with optional brackets, commas or whitespace between.
pub fn parse_bbox(s: &str) -> Result<Option<BBox>, String> {
    let inner = s.trim().trim_start_matches(['[', '(']).trim_end_matches([']', ')']);
    if inner.trim().is_empty() {
        return Ok(None);
    }
    let nums: Result<Vec<f64>, _> = inner
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .map(str::parse::<f64>)
        .collect();
    let nums = nums.map_err(|_| format!("unparsable bbox {s:?}"))?;
    let arr: [f64; 4] = nums.try_into().map_err(|_| format!("bbox needs 4 numbers: {s:?}"))?;
    BBox::try_from(arr).map(Some).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// columns

pub fn parse_alias_table(text: &str) -> Result<AliasTable, ManifestError> {
    let raw: BTreeMap<String, Field> =
        serde_json::from_str(text).map_err(|e| ManifestError::BadParams(format!("alias table: {e}")))?;
    Ok(raw.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect())
}

/// Map each header to a canonical field or to extras.
///
/// Matching is case-insensitive. Empty headers become `column_N` extras
/// (1-based); repeated extra names get a `#N` suffix so nothing is lost.
pub fn normalize_columns(headers: &[String], aliases: &AliasTable) -> Result<Vec<Column>, ManifestError> {
    if headers.is_empty() {
        return Err(ManifestError::SchemaError("no header row".into()));
    }
    let mut by_field: BTreeMap<Field, Vec<String>> = BTreeMap::new();
    let mut extras_seen = BTreeSet::new();
    let mut out = Vec::with_capacity(headers.len());
    for (i, h) in headers.iter().enumerate() {
        let name = h.trim();
        match aliases.get(&name.to_lowercase()) {
            Some(&f) if !name.is_empty() => {
                by_field.entry(f).or_default().push(h.clone());
                out.push(Column::Field(f));
            }
            _ => {
                let base = if name.is_empty() {
                    format!("column_{}", i + 1)
                } else {
                    name.to_string()
                };
                let mut key = base.clone();
                let mut n = 2;
                while !extras_seen.insert(key.clone()) {
                    key = format!("{base}#{n}");
                    n += 1;
                }
                out.push(Column::Extra(key));
            }
        }
    }
    if let Some((field, hs)) = by_field.into_iter().find(|(_, hs)| hs.len() > 1) {
        return Err(ManifestError::AmbiguousAlias { field, headers: hs });
    }
    Ok(out)
}

fn require_identifiers(columns: &[Column]) -> Result<(), ManifestError> {
    for (field, what) in [(Field::SampleId, "sample"), (Field::VideoId, "video")] {
        if !columns.contains(&Column::Field(field)) {
            return Err(ManifestError::SchemaError(format!("no {what} identifier column")));
        }
    }
    Ok(())
}

enum RowOutcome {
    Record(ManifestRecord),
    Reject(Reject),
}

/// Build one record from mapped cells. `row_label` names the row in rejects
/// when it has no usable sample id.
fn build_record(columns: &[Column], cells: &[Option<String>], row_label: &str) -> RowOutcome {
    let mut rec = ManifestRecord::new("", "");
    let mut duration = None;
    let mut problem: Option<RejectReason> = None;
    for (col, cell) in columns.iter().zip(cells) {
        let Some(cell) = cell else { continue };
        match col {
            Column::Extra(name) => {
                rec.extras.insert(name.clone(), cell.clone());
            }
            Column::Field(f) => {
                let trimmed = cell.trim();
                match f {
                    Field::SampleId => rec.sample_id = trimmed.to_string(),
                    Field::VideoId => rec.video_id = trimmed.to_string(),
                    Field::StartS | Field::EndS | Field::DurationS => match parse_time(trimmed) {
                        Ok(v) => match f {
                            Field::StartS => rec.start_s = v,
                            Field::EndS => rec.end_s = v,
                            _ => duration = v,
                        },
                        Err(_) => problem = problem.or(Some(RejectReason::BadTiming)),
                    },
                    Field::Text => rec.text = (!cell.is_empty()).then(|| cell.clone()),
                    Field::Split => rec.split = (!trimmed.is_empty()).then(|| trimmed.to_string()),
                    Field::SignerId => rec.signer_id = (!trimmed.is_empty()).then(|| trimmed.to_string()),
                    Field::Bbox => match parse_bbox(trimmed) {
                        Ok(b) => rec.bbox = b,
                        Err(_) => problem = problem.or(Some(RejectReason::BadBbox)),
                    },
                    Field::ExtrasJson => {
                        if !trimmed.is_empty() {
                            match serde_json::from_str::<BTreeMap<String, String>>(trimmed) {
                                Ok(m) => rec.extras.extend(m),
                                Err(_) => problem = problem.or(Some(RejectReason::MalformedRow)),
                            }
                        }
                    }
                }
            }
        }
    }
    if rec.end_s.is_none() {
        if let (Some(s), Some(d)) = (rec.start_s, duration) {
            rec.end_s = Some(s + d);
        }
    }
    if rec.sample_id.is_empty() || rec.video_id.is_empty() {
        let label = if rec.sample_id.is_empty() {
            row_label
        } else {
            &rec.sample_id
        };
        return RowOutcome::Reject(Reject::new(label, INGEST_STAGE, RejectReason::MissingId));
    }
    if let (Some(s), Some(e)) = (rec.start_s, rec.end_s) {
        if s >= e {
            problem = problem.or(Some(RejectReason::BadTiming));
        }
    }
    match problem {
        Some(reason) => RowOutcome::Reject(Reject::new(&rec.sample_id, INGEST_STAGE, reason)),
        None => RowOutcome::Record(rec),
    }
}

fn collect(
    outcomes: impl IntoIterator<Item = RowOutcome>,
    source_path: &Path,
    adapter_name: &str,
) -> Result<Ingested, ManifestError> {
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    let mut ids = BTreeSet::new();
    let mut rows = 0;
    for o in outcomes {
        rows += 1;
        match o {
            RowOutcome::Record(r) => {
                if !ids.insert(r.sample_id.clone()) {
                    return Err(ManifestError::SchemaError(format!(
                        "duplicate sample_id `{}`",
                        r.sample_id
                    )));
                }
                records.push(r);
            }
            RowOutcome::Reject(r) => rejects.push(r),
        }
    }
    Ok(Ingested {
        manifest: Manifest {
            records,
            source_path: source_path.to_path_buf(),
            adapter_name: adapter_name.to_string(),
        },
        rejects,
        rows,
    })
}

// ---------------------------------------------------------------------------
// adapters

pub trait DatasetAdapter: Send + Sync {
    fn ingest(&self, source_path: &Path, params: &Params) -> Result<Ingested, ManifestError>;
}

/// Aliases from the shipped table, overridden by `params.aliases`.
fn effective_aliases(base: &AliasTable, params: &Params) -> Result<AliasTable, ManifestError> {
    let mut table = base.clone();
    if let Some(extra) = params.get("aliases") {
        let extra: BTreeMap<String, Field> =
            serde_json::from_value(extra.clone()).map_err(|e| ManifestError::BadParams(format!("aliases: {e}")))?;
        table.extend(extra.into_iter().map(|(k, v)| (k.to_lowercase(), v)));
    }
    Ok(table)
}

fn read_source(path: &Path) -> Result<String, ManifestError> {
    let unreadable = |message: String| ManifestError::SourceUnreadable {
        path: path.display().to_string(),
        message,
    };
    let bytes = std::fs::read(path).map_err(|e| unreadable(e.to_string()))?;
    let text = String::from_utf8(bytes).map_err(|e| unreadable(e.to_string()))?;
    Ok(text.strip_prefix('\u{feff}').map(str::to_string).unwrap_or(text))
}

/// Comma- or tab-separated tables with a header row.
pub struct DelimitedAdapter {
    pub name: String,
    pub aliases: AliasTable,
}

impl DelimitedAdapter {
    pub fn new(name: &str, aliases: AliasTable) -> Self {
        DelimitedAdapter {
            name: name.to_string(),
            aliases,
        }
    }

    fn delimiter(text: &str, params: &Params) -> Result<u8, ManifestError> {
        match params.get("delimiter") {
            None => {
                let first = text.lines().next().unwrap_or("");
                Ok(if first.contains('\t') { b'\t' } else { b',' })
            }
            Some(Value::String(s)) if s == "tab" || s == "\t" => Ok(b'\t'),
            Some(Value::String(s)) if s.len() == 1 && s.is_ascii() => Ok(s.as_bytes()[0]),
            Some(other) => Err(ManifestError::BadParams(format!("delimiter {other}"))),
        }
    }
}

impl DatasetAdapter for DelimitedAdapter {
    fn ingest(&self, source_path: &Path, params: &Params) -> Result<Ingested, ManifestError> {
        let text = read_source(source_path)?;
        let aliases = effective_aliases(&self.aliases, params)?;
        let delimiter = Self::delimiter(&text, params)?;
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .flexible(true)
            .quoting(delimiter != b'\t')
            .from_reader(text.as_bytes());
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| ManifestError::SchemaError(format!("header row: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        if headers.iter().all(|h| h.trim().is_empty()) {
            return Err(ManifestError::SchemaError("empty header row".into()));
        }
        let columns = normalize_columns(&headers, &aliases)?;
        require_identifiers(&columns)?;
        let mut outcomes = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let label = format!("#row{}", i + 2);
            let row = match row {
                Ok(r) => r,
                Err(_) => {
                    outcomes.push(RowOutcome::Reject(Reject::new(
                        &label,
                        INGEST_STAGE,
                        RejectReason::MalformedRow,
                    )));
                    continue;
                }
            };
            if row.len() == 1 && row[0].trim().is_empty() {
                continue;
            }
            if row.len() != headers.len() {
                let id = columns
                    .iter()
                    .position(|c| *c == Column::Field(Field::SampleId))
                    .and_then(|p| row.get(p))
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .unwrap_or(&label)
                    .to_string();
                outcomes.push(RowOutcome::Reject(Reject::new(
                    &id,
                    INGEST_STAGE,
                    RejectReason::MalformedRow,
                )));
                continue;
            }
            let cells: Vec<Option<String>> = row.iter().map(|c| Some(c.to_string())).collect();
            outcomes.push(build_record(&columns, &cells, &label));
        }
        collect(outcomes, source_path, &self.name)
    }
}

/// A JSON array of segment objects, or an object holding one under `segments`.
pub struct TranscriptJsonAdapter {
    pub name: String,
    pub aliases: AliasTable,
}

impl DatasetAdapter for TranscriptJsonAdapter {
    fn ingest(&self, source_path: &Path, params: &Params) -> Result<Ingested, ManifestError> {
        let text = read_source(source_path)?;
        let aliases = effective_aliases(&self.aliases, params)?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| ManifestError::SchemaError(format!("json: {e}")))?;
        let items = match doc {
            Value::Array(a) => a,
            Value::Object(mut o) => match o.remove("segments") {
                Some(Value::Array(a)) => a,
                _ => return Err(ManifestError::SchemaError("expected a `segments` array".into())),
            },
            _ => return Err(ManifestError::SchemaError("expected an array of segments".into())),
        };
        let mut headers: Vec<String> = Vec::new();
        for item in &items {
            if let Value::Object(o) = item {
                for k in o.keys() {
                    if !headers.contains(k) {
                        headers.push(k.clone());
                    }
                }
            }
        }
        let columns = normalize_columns(&headers, &aliases)?;
        require_identifiers(&columns)?;
        let outcomes = items.iter().enumerate().map(|(i, item)| {
            let label = format!("#item{i}");
            let Value::Object(o) = item else {
                return RowOutcome::Reject(Reject::new(&label, INGEST_STAGE, RejectReason::MalformedRow));
            };
            let cells: Vec<Option<String>> = headers
                .iter()
                .map(|h| match o.get(h) {
                    None | Some(Value::Null) => None,
                    Some(Value::String(s)) => Some(s.clone()),
                    Some(Value::Array(a)) => Some(
                        a.iter()
                            .map(|v| v.as_f64().map(|x| x.to_string()).unwrap_or_else(|| v.to_string()))
                            .collect::<Vec<_>>()
                            .join(","),
                    ),
                    Some(v) => Some(v.to_string()),
                })
                .collect();
            build_record(&columns, &cells, &label)
        });
        collect(outcomes.collect::<Vec<_>>(), source_path, &self.name)
    }
}

pub const BUILTIN_ADAPTERS: [&str; 5] = [
    "canonical_csv",
    "delimited",
    "how2sign_csv",
    "openasl_tsv",
    "transcript_json",
];

pub fn builtin_alias_table(name: &str) -> Option<AliasTable> {
    let text = match name {
        "how2sign_csv" => include_str!("../data/aliases/how2sign_csv.json"),
        "openasl_tsv" => include_str!("../data/aliases/openasl_tsv.json"),
        "transcript_json" => include_str!("../data/aliases/transcript_json.json"),
        "canonical_csv" => include_str!("../data/aliases/canonical_csv.json"),
        "delimited" => include_str!("../data/aliases/delimited.json"),
        _ => return None,
    };
    Some(parse_alias_table(text).expect("shipped alias tables parse"))
}

pub fn builtin_adapter(name: &str) -> Option<Box<dyn DatasetAdapter>> {
    let aliases = builtin_alias_table(name)?;
    Some(match name {
        "transcript_json" => Box::new(TranscriptJsonAdapter {
            name: name.to_string(),
            aliases,
        }),
        _ => Box::new(DelimitedAdapter::new(name, aliases)),
    })
}

/// Ingest through one of the builtin adapters.
pub fn ingest(adapter_name: &str, source_path: &Path, params: &Params) -> Result<Ingested, ManifestError> {
    match builtin_adapter(adapter_name) {
        Some(a) => a.ingest(source_path, params),
        None => Err(ManifestError::UnknownAdapter {
            name: adapter_name.to_string(),
            suggestions: crate::registry::closest(adapter_name, BUILTIN_ADAPTERS.iter().copied()),
        }),
    }
}

// ---------------------------------------------------------------------------
// filtering and hashing

/// Rules applied in order; the first failing one names the reject.
pub fn check_rules(rec: &ManifestRecord, rules: &FilterConfig) -> Option<RejectReason> {
    if rules.require_text && rec.text.as_deref().map(normalize_text).unwrap_or_default().is_empty() {
        return Some(RejectReason::MissingText);
    }
    if rules.require_timing && (rec.start_s.is_none() || rec.end_s.is_none()) {
        return Some(RejectReason::MissingTiming);
    }
    if let Some(d) = rec.duration_s() {
        if d < rules.min_duration_s {
            return Some(RejectReason::TooShort);
        }
        if d > rules.max_duration_s {
            return Some(RejectReason::TooLong);
        }
    }
    None
}

/// Split into retained records (text normalized) and rejects.
pub fn filter_segments(manifest: &Manifest, rules: &FilterConfig) -> (Manifest, Vec<Reject>) {
    let mut retained = Vec::new();
    let mut rejects = Vec::new();
    for rec in &manifest.records {
        match check_rules(rec, rules) {
            Some(reason) => rejects.push(Reject::new(&rec.sample_id, INGEST_STAGE, reason)),
            None => {
                let mut r = rec.clone();
                r.text = r.text.as_deref().map(normalize_text).filter(|t| !t.is_empty());
                retained.push(r);
            }
        }
    }
    (
        Manifest {
            records: retained,
            source_path: manifest.source_path.clone(),
            adapter_name: manifest.adapter_name.clone(),
        },
        rejects,
    )
}

/// SHA-256 over records sorted by sample_id, fields in persisted column
/// order joined by 0x1F, records joined by `\n`.
pub fn manifest_hash(manifest: &Manifest) -> Digest {
    let mut rows: Vec<[String; 9]> = manifest.records.iter().map(ManifestRecord::row).collect();
    rows.sort_by(|a, b| a[0].cmp(&b[0]));
    let body = rows.iter().map(|r| r.join("\x1f")).collect::<Vec<_>>().join("\n");
    Digest::of(body.as_bytes())
}

/// Key used in shard and sample file names: anything outside
/// `[A-Za-z0-9_-]` becomes `_`.
pub fn sanitize_key(sample_id: &str) -> String {
    sample_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Records whose sanitized keys collide, beyond the first of each key.
pub fn key_collisions(manifest: &Manifest) -> Vec<String> {
    let mut seen = BTreeSet::new();
    manifest
        .records
        .iter()
        .filter(|r| !seen.insert(sanitize_key(&r.sample_id)))
        .map(|r| r.sample_id.clone())
        .collect()
}

/// Where a record's source video lives: `params.video_dir` (default: next
/// to the manifest) joined with `video_id + params.video_extension`.
pub fn video_path(manifest_source: &Path, params: &Params, video_id: &str) -> PathBuf {
    let base_dir = manifest_source.parent().unwrap_or(Path::new("."));
    let dir = match params.get("video_dir").and_then(Value::as_str) {
        Some(d) if Path::new(d).is_absolute() => PathBuf::from(d),
        Some(d) => base_dir.join(d),
        None => base_dir.to_path_buf(),
    };
    let ext = params.get("video_extension").and_then(Value::as_str).unwrap_or(".mp4");
    dir.join(format!("{video_id}{ext}"))
}

// ---------------------------------------------------------------------------
// persistence

fn csv_err(path: &Path, e: impl fmt::Display) -> ManifestError {
    ManifestError::SourceUnreadable {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn write_manifest_csv(path: &Path, manifest: &Manifest) -> Result<(), ManifestError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_err(path, e))?;
    for r in &manifest.records {
        w.write_record(r.row()).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))
}

pub fn read_manifest_csv(path: &Path) -> Result<Ingested, ManifestError> {
    ingest("canonical_csv", path, &Params::new())
}

pub fn write_rejects_csv(path: &Path, rejects: &[Reject]) -> Result<(), ManifestError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(REJECTS_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rejects {
        w.write_record([&r.sample_id, &r.stage, &r.reason])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))
}

pub fn read_rejects_csv(path: &Path) -> Result<Vec<Reject>, ManifestError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

// ---------------------------------------------------------------------------
// statistics

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestStats {
    pub records: usize,
    pub splits: BTreeMap<String, usize>,
    /// Min, 25%, median, 75%, max over records with both timings.
    pub duration_quartiles: Option<[f64; 5]>,
    pub missing: BTreeMap<String, usize>,
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn manifest_stats(manifest: &Manifest) -> ManifestStats {
    let mut splits = BTreeMap::new();
    let mut missing: BTreeMap<String, usize> = ["start_s", "end_s", "text", "split", "signer_id", "bbox"]
        .iter()
        .map(|f| (f.to_string(), 0))
        .collect();
    let mut durations = Vec::new();
    for r in &manifest.records {
        *splits
            .entry(r.split.clone().unwrap_or_else(|| "(none)".into()))
            .or_insert(0) += 1;
        let absent = [
            ("start_s", r.start_s.is_none()),
            ("end_s", r.end_s.is_none()),
            ("text", r.text.as_deref().map_or(true, |t| t.trim().is_empty())),
            ("split", r.split.is_none()),
            ("signer_id", r.signer_id.is_none()),
            ("bbox", r.bbox.is_none()),
        ];
        for (f, a) in absent {
            if a {
                *missing.get_mut(f).expect("listed") += 1;
            }
        }
        durations.extend(r.duration_s());
    }
    durations.sort_by(f64::total_cmp);
    let duration_quartiles =
        (!durations.is_empty()).then(|| [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile(&durations, q)));
    ManifestStats {
        records: manifest.records.len(),
        splits,
        duration_quartiles,
        missing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn headers(h: &[&str]) -> Vec<String> {
        h.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn text_normalization() {
        assert_eq!(normalize_text("  hello\t world "), "hello world");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("caf\u{e9}"), normalize_text("cafe\u{301}"));
        assert_eq!(normalize_text("a\n\n b\u{a0}c"), "a b c");
    }

    #[test]
    fn column_mapping() {
        let h2s = builtin_alias_table("how2sign_csv").unwrap();
        assert_eq!(
            normalize_columns(&headers(&["SENTENCE"]), &h2s).unwrap(),
            vec![Column::Field(Field::Text)]
        );
        assert_eq!(
            normalize_columns(&headers(&["sentence", "CAMERA", ""]), &h2s).unwrap(),
            vec![
                Column::Field(Field::Text),
                Column::Extra("CAMERA".into()),
                Column::Extra("column_3".into())
            ]
        );
        let generic = builtin_alias_table("delimited").unwrap();
        match normalize_columns(&headers(&["VIDEO_NAME", "VIDEO_ID"]), &generic) {
            Err(ManifestError::AmbiguousAlias { field, headers }) => {
                assert_eq!(field, Field::VideoId);
                assert_eq!(headers.len(), 2);
            }
            other => panic!("{other:?}"),
        }
        assert!(normalize_columns(&[], &generic).is_err());
    }

    #[test]
    fn time_and_bbox_parsing() {
        assert_eq!(parse_time(" 1.5 ").unwrap(), Some(1.5));
        assert_eq!(parse_time("").unwrap(), None);
        assert_eq!(parse_time("0:01:02.5").unwrap(), Some(62.5));
        assert_eq!(parse_time("01:02").unwrap(), Some(62.0));
        assert!(parse_time("abc").is_err());
        assert!(parse_time("-1").is_err());
        assert!(parse_time("1:75").is_err());
        assert_eq!(
            parse_bbox("[1, 2, 3, 4]").unwrap(),
            Some(BBox::new(1.0, 2.0, 3.0, 4.0).unwrap())
        );
        assert_eq!(
            parse_bbox("1 2 3 4").unwrap(),
            Some(BBox::new(1.0, 2.0, 3.0, 4.0).unwrap())
        );
        assert!(parse_bbox("1,2,3").is_err());
        assert!(parse_bbox("5,5,1,1").is_err());
    }

    #[test]
    fn how2sign_style_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "h.csv",
            "VIDEO_ID\tVIDEO_NAME\tSENTENCE_ID\tSENTENCE_NAME\tSTART_REALIGNED\tEND_REALIGNED\tSENTENCE\n\
             v1\tvid_a\tsid1\tvid_a_0\t0.5\t2.0\tHello  there\n\
             v1\tvid_a\tsid2\tvid_a_1\tx\t3.0\tBad timing\n\
             v1\tvid_a\tsid3\n",
        );
        let got = ingest("how2sign_csv", &p, &Params::new()).unwrap();
        assert_eq!(got.rows, 3);
        assert_eq!(got.manifest.records.len(), 1);
        let r = &got.manifest.records[0];
        assert_eq!((r.sample_id.as_str(), r.video_id.as_str()), ("vid_a_0", "vid_a"));
        assert_eq!((r.start_s, r.end_s), (Some(0.5), Some(2.0)));
        assert_eq!(r.text.as_deref(), Some("Hello  there"));
        assert_eq!(r.extras.get("VIDEO_ID").map(String::as_str), Some("v1"));
        let reasons: Vec<_> = got.rejects.iter().map(|r| r.reason.as_str()).collect();
        assert_eq!(reasons, vec!["BadTiming", "MalformedRow"]);
    }

    #[test]
    fn openasl_style_bbox() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "o.tsv",
            "yid\tvid\tstart\tend\traw-text\tsplit\tbbox\n\
             y1\ty1-000\t0:00:01.000\t0:00:03.500\tHI\ttrain\t10,20,110,220\n\
             y1\ty1-001\t4\t5\tBYE\ttest\t1,2\n",
        );
        let got = ingest("openasl_tsv", &p, &Params::new()).unwrap();
        assert_eq!(got.manifest.records.len(), 1);
        let r = &got.manifest.records[0];
        assert_eq!(r.bbox, Some(BBox::new(10.0, 20.0, 110.0, 220.0).unwrap()));
        assert_eq!((r.start_s, r.end_s), (Some(1.0), Some(3.5)));
        assert_eq!(r.split.as_deref(), Some("train"));
        assert_eq!(got.rejects[0].reason, "BadBbox");
    }

    #[test]
    fn schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "SENTENCE_NAME,SENTENCE\na,b\n");
        assert!(matches!(
            ingest("how2sign_csv", &p, &Params::new()),
            Err(ManifestError::SchemaError(_))
        ));
        let p = write(dir.path(), "b.csv", "SENTENCE_NAME,VIDEO_NAME\na,v\na,v\n");
        assert!(matches!(
            ingest("how2sign_csv", &p, &Params::new()),
            Err(ManifestError::SchemaError(_))
        ));
        assert!(matches!(
            ingest("how2sign_csv", &dir.path().join("none.csv"), &Params::new()),
            Err(ManifestError::SourceUnreadable { .. })
        ));
        match ingest("how2sing_csv", &p, &Params::new()) {
            Err(ManifestError::UnknownAdapter { suggestions, .. }) => assert_eq!(suggestions[0], "how2sign_csv"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn alias_override_param() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "clip,movie\na,v\n");
        let mut params = Params::new();
        params.insert(
            "aliases".into(),
            serde_json::json!({"clip": "sample_id", "MOVIE": "video_id"}),
        );
        let got = ingest("delimited", &p, &params).unwrap();
        assert_eq!(got.manifest.records[0].video_id, "v");
    }

    #[test]
    fn transcript_json_durations() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "t.json",
            r#"{"segments": [{"id": "s1", "video": "v", "start": 1.0, "duration": 2.5, "text": "hi", "camera": 3},
                             {"id": "s2", "video": "v", "start": 1.0, "end": 0.5}, 7]}"#,
        );
        let got = ingest("transcript_json", &p, &Params::new()).unwrap();
        assert_eq!(got.rows, 3);
        let r = &got.manifest.records[0];
        assert_eq!(r.end_s, Some(3.5));
        assert_eq!(r.extras.get("camera").map(String::as_str), Some("3"));
        assert_eq!(got.rejects.len(), 2);
    }

    fn rec(id: &str, start: Option<f64>, end: Option<f64>, text: Option<&str>) -> ManifestRecord {
        let mut r = ManifestRecord::new(id, "v");
        r.start_s = start;
        r.end_s = end;
        r.text = text.map(str::to_string);
        r
    }

    fn manifest(records: Vec<ManifestRecord>) -> Manifest {
        Manifest {
            records,
            source_path: "m.csv".into(),
            adapter_name: "delimited".into(),
        }
    }

    #[test]
    fn filter_examples() {
        let m = manifest(vec![
            rec("a", Some(0.0), Some(0.2), Some("x")),
            rec("b", Some(0.0), Some(2.0), Some(" \t ")),
            rec("c", None, Some(2.0), Some("x")),
            rec("d", Some(0.0), Some(100.0), Some("x")),
            rec("e", Some(0.0), Some(2.0), Some("  ok  then ")),
        ]);
        let (kept, rejects) = filter_segments(&m, &FilterConfig::default());
        let reasons: Vec<_> = rejects
            .iter()
            .map(|r| (r.sample_id.as_str(), r.reason.as_str()))
            .collect();
        assert_eq!(
            reasons,
            vec![
                ("a", "TooShort"),
                ("b", "MissingText"),
                ("c", "MissingTiming"),
                ("d", "TooLong")
            ]
        );
        assert_eq!(kept.records.len(), 1);
        assert_eq!(kept.records[0].text.as_deref(), Some("ok then"));
        let (again, none) = filter_segments(&kept, &FilterConfig::default());
        assert_eq!(again, kept);
        assert!(none.is_empty());
    }

    #[test]
    fn hash_examples() {
        // sha256 of the empty string, from an independent implementation
        assert_eq!(
            manifest_hash(&manifest(vec![])).to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        let a = rec("a", Some(0.0), Some(1.0), Some("x"));
        let b = rec("b", None, None, None);
        assert_eq!(
            manifest_hash(&manifest(vec![a.clone(), b.clone()])),
            manifest_hash(&manifest(vec![b.clone(), a.clone()]))
        );
        let mut a2 = a.clone();
        a2.text = Some("y".into());
        assert_ne!(
            manifest_hash(&manifest(vec![a, b.clone()])),
            manifest_hash(&manifest(vec![a2, b]))
        );
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rec("a/1", Some(0.1), Some(1.0 / 3.0), Some("he said \"hi\", then\tleft"));
        r.bbox = Some(BBox::new(0.5, 1.0, 2.25, 3.0).unwrap());
        r.extras.insert("CAMERA".into(), "front".into());
        r.split = Some("dev".into());
        let m = manifest(vec![r, rec("b", None, None, None)]);
        let p = dir.path().join("manifest.csv");
        write_manifest_csv(&p, &m).unwrap();
        let back = read_manifest_csv(&p).unwrap();
        assert!(back.rejects.is_empty());
        assert_eq!(back.manifest.records, m.records);
        assert_eq!(manifest_hash(&back.manifest), manifest_hash(&m));
    }

    #[test]
    fn keys_and_paths() {
        assert_eq!(sanitize_key("a b/c.d-e_f"), "a_b_c_d-e_f");
        let m = manifest(vec![rec("a.b", None, None, None), rec("a_b", None, None, None)]);
        assert_eq!(key_collisions(&m), vec!["a_b".to_string()]);
        let mut params = Params::new();
        assert_eq!(
            video_path(Path::new("/d/m.csv"), &params, "v"),
            PathBuf::from("/d/v.mp4")
        );
        params.insert("video_dir".into(), "vids".into());
        params.insert("video_extension".into(), ".synth.json".into());
        assert_eq!(
            video_path(Path::new("/d/m.csv"), &params, "v"),
            PathBuf::from("/d/vids/v.synth.json")
        );
    }

    #[test]
    fn stats() {
        let empty = manifest_stats(&manifest(vec![]));
        assert_eq!(empty.records, 0);
        assert!(empty.duration_quartiles.is_none());
        let m = manifest(
            (0..5)
                .map(|i| rec(&format!("s{i}"), Some(0.0), Some(i as f64 + 1.0), None))
                .collect(),
        );
        let s = manifest_stats(&m);
        assert_eq!(s.duration_quartiles, Some([1.0, 2.0, 3.0, 4.0, 5.0]));
        assert_eq!(s.missing["text"], 5);
        assert_eq!(s.splits["(none)"], 5);
    }

    proptest! {
        #[test]
        fn normalize_text_idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }
    }
}
