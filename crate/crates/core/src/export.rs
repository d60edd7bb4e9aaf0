//! WebDataset-style tar shards and NPY array payloads.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::config::canonical_json;

pub const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";
const TAR_BLOCK: usize = 512;
const TAR_TRAILER: usize = 2 * TAR_BLOCK;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExportError {
    #[error("duplicate sample key `{0}`")]
    DuplicateKey(String),
    #[error("write failed for {path}: {message}")]
    WriteFailure { path: String, message: String },
    #[error("malformed shard {path}: {message}")]
    MalformedShard { path: String, message: String },
    #[error("bad npy data: {0}")]
    BadArray(String),
    #[error("bad shard spec: {0}")]
    BadSpec(String),
}

// ---------------------------------------------------------------------------
// npy

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Element {
    F4,
    F8,
}

impl Element {
    pub fn descr(self) -> &'static str {
        match self {
            Element::F4 => "<f4",
            Element::F8 => "<f8",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Element::F4 => 4,
            Element::F8 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub element: Element,
    pub data: Vec<f64>,
}

fn shape_repr(shape: &[usize]) -> String {
    match shape {
        [] => "()".into(),
        [n] => format!("({n},)"),
        _ => format!(
            "({})",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    }
}

/// NPY v1.0 header laid out exactly as numpy writes it, including the
/// spare room numpy leaves for growing the first axis.
pub fn npy_header(shape: &[usize], element: Element) -> Vec<u8> {
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        element.descr(),
        shape_repr(shape)
    );
    if let Some(first) = shape.first() {
        dict.push_str(&" ".repeat(21usize.saturating_sub(first.to_string().len())));
    }
    let pad = 64 - (10 + dict.len() + 1) % 64;
    dict.push_str(&" ".repeat(pad));
    dict.push('\n');
    let mut out = Vec::with_capacity(10 + dict.len());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

/// Row-major little-endian array bytes behind an NPY v1.0 header.
pub fn encode_array(data: &[f64], shape: &[usize], element: Element) -> Result<Vec<u8>, ExportError> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(ExportError::BadArray(format!(
            "shape {shape:?} needs {n} values, got {}",
            data.len()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ExportError::BadArray("non-finite value".into()));
    }
    let mut out = npy_header(shape, element);
    out.reserve(n * element.size());
    match element {
        Element::F4 => data
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Element::F8 => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

fn dict_value<'a>(dict: &'a str, key: &str) -> Option<&'a str> {
    let start = dict.find(&format!("'{key}':"))? + key.len() + 3;
    Some(dict[start..].trim_start())
}

pub fn decode_array(bytes: &[u8]) -> Result<NpyArray, ExportError> {
    let bad = |m: &str| ExportError::BadArray(m.to_string());
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(bad("missing magic"));
    }
    if bytes[6] != 1 {
        return Err(bad("only version 1.0 is supported"));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?;
    let dict = std::str::from_utf8(header).map_err(|_| bad("header not ascii"))?;
    let descr = dict_value(dict, "descr").ok_or_else(|| bad("no descr"))?;
    let element = if descr.starts_with("'<f4'") {
        Element::F4
    } else if descr.starts_with("'<f8'") {
        Element::F8
    } else {
        return Err(bad("unsupported descr"));
    };
    if !dict_value(dict, "fortran_order").is_some_and(|v| v.starts_with("False")) {
        return Err(bad("fortran order unsupported"));
    }
    let shape_src = dict_value(dict, "shape").ok_or_else(|| bad("no shape"))?;
    let close = shape_src.find(')').ok_or_else(|| bad("bad shape"))?;
    let shape: Vec<usize> = shape_src[1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("bad shape")))
        .collect::<Result<_, _>>()?;
    let n: usize = shape.iter().product();
    let body = &bytes[10 + hlen..];
    if body.len() != n * element.size() {
        return Err(bad("data length does not match shape"));
    }
    let data = match element {
        Element::F4 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
            .collect(),
        Element::F8 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect(),
    };
    Ok(NpyArray { shape, element, data })
}

// ---------------------------------------------------------------------------
// samples

/// Minimal per-sample metadata written as the `json` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    pub video_id: String,
    pub start_s: Option<f64>,
    pub end_s: Option<f64>,
    pub processor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl SampleMeta {
    /// Sorted keys, no whitespace.
    pub fn to_bytes(&self) -> Vec<u8> {
        canonical_json(&serde_json::to_value(self).expect("meta serializes"))
    }
}

/// One exported sample: a key and its payloads by extension.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub key: String,
    pub payloads: BTreeMap<String, Vec<u8>>,
}

impl SampleRecord {
    /// `json` metadata, `txt` caption when non-empty, plus extra payloads.
    pub fn new(key: &str, meta: &SampleMeta, caption: Option<&str>, extra: BTreeMap<String, Vec<u8>>) -> Self {
        let mut payloads = extra;
        payloads.insert("json".into(), meta.to_bytes());
        if let Some(c) = caption.filter(|c| !c.is_empty()) {
            payloads.insert("txt".into(), c.as_bytes().to_vec());
        }
        SampleRecord {
            key: key.to_string(),
            payloads,
        }
    }

    pub fn metadata(&self) -> Option<SampleMeta> {
        serde_json::from_slice(self.payloads.get("json")?).ok()
    }

    pub fn caption(&self) -> Option<&str> {
        std::str::from_utf8(self.payloads.get("txt")?).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardSpec {
    pub max_samples: u64,
    pub max_bytes: u64,
    pub worker_id: u32,
}

impl ShardSpec {
    pub fn shard_name(&self, seq: u32) -> String {
        format!("shard-{:02}-{:06}.tar", self.worker_id, seq)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    /// Relative to the shard directory.
    pub path: String,
    pub count: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardIndex {
    pub shards: Vec<ShardEntry>,
}

impl ShardIndex {
    pub const FILE_NAME: &'static str = "shards.json";

    pub fn total_count(&self) -> u64 {
        self.shards.iter().map(|s| s.count).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(&serde_json::to_value(self).expect("index serializes"))
            .expect("index serializes");
        v.push(b'\n');
        v
    }

    pub fn write(&self, dir: &Path) -> Result<(), ExportError> {
        let path = dir.join(Self::FILE_NAME);
        std::fs::write(&path, self.to_bytes()).map_err(|e| write_err(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self, ExportError> {
        let path = dir.join(Self::FILE_NAME);
        let bytes = std::fs::read(&path).map_err(|e| malformed(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| malformed(&path, e))
    }
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> ExportError {
    ExportError::WriteFailure {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn malformed(path: &Path, e: impl std::fmt::Display) -> ExportError {
    ExportError::MalformedShard {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Tar blocks for one sample: entries sorted by extension, fixed metadata,
/// no end-of-archive trailer.
pub fn sample_tar_bytes(sample: &SampleRecord) -> std::io::Result<Vec<u8>> {
    let mut b = tar::Builder::new(Vec::new());
    b.mode(tar::HeaderMode::Deterministic);
    for (ext, data) in &sample.payloads {
        let mut h = tar::Header::new_ustar();
        h.set_size(data.len() as u64);
        h.set_mode(0o644);
        h.set_mtime(0);
        h.set_uid(0);
        h.set_gid(0);
        h.set_entry_type(tar::EntryType::Regular);
        b.append_data(&mut h, format!("{}.{}", sample.key, ext), data.as_slice())?;
    }
    let mut bytes = b.into_inner()?;
    bytes.truncate(bytes.len() - TAR_TRAILER);
    Ok(bytes)
}

struct OpenShard {
    name: String,
    path: PathBuf,
    out: BufWriter<File>,
    count: u64,
    bytes: u64,
}

impl OpenShard {
    fn close(mut self) -> Result<ShardEntry, ExportError> {
        self.out
            .write_all(&[0u8; TAR_TRAILER])
            .map_err(|e| write_err(&self.path, e))?;
        self.out.flush().map_err(|e| write_err(&self.path, e))?;
        Ok(ShardEntry {
            path: self.name,
            count: self.count,
            bytes: self.bytes + TAR_TRAILER as u64,
        })
    }
}

/// Pack samples into `shard-{worker:02}-{seq:06}.tar` files under `out_dir`.
///
/// A shard is closed when the next sample would push it past either limit;
/// a sample bigger than `max_bytes` on its own still gets a shard.
pub fn write_shards<I>(samples: I, spec: &ShardSpec, out_dir: &Path) -> Result<ShardIndex, ExportError>
where
    I: IntoIterator<Item = SampleRecord>,
{
    if spec.max_samples == 0 || spec.max_bytes == 0 {
        return Err(ExportError::BadSpec("shard limits must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| write_err(out_dir, e))?;
    let mut keys = BTreeSet::new();
    let mut index = ShardIndex::default();
    let mut current: Option<OpenShard> = None;
    let mut seq = 0;
    for sample in samples {
        if !keys.insert(sample.key.clone()) {
            return Err(ExportError::DuplicateKey(sample.key));
        }
        let block = sample_tar_bytes(&sample).map_err(|e| write_err(out_dir, e))?;
        let size = block.len() as u64;
        let full = current
            .as_ref()
            .is_some_and(|s| s.count + 1 > spec.max_samples || s.bytes + size + TAR_TRAILER as u64 > spec.max_bytes);
        if full {
            index.shards.push(current.take().expect("open").close()?);
        }
        let shard = match current.as_mut() {
            Some(s) => s,
            None => {
                let name = spec.shard_name(seq);
                seq += 1;
                let path = out_dir.join(&name);
                let file = File::create(&path).map_err(|e| write_err(&path, e))?;
                current.insert(OpenShard {
                    name,
                    path,
                    out: BufWriter::new(file),
                    count: 0,
                    bytes: 0,
                })
            }
        };
        shard.out.write_all(&block).map_err(|e| write_err(&shard.path, e))?;
        shard.count += 1;
        shard.bytes += size;
    }
    if let Some(s) = current {
        index.shards.push(s.close()?);
    }
    Ok(index)
}

fn split_entry_name(name: &str) -> Option<(&str, &str)> {
    let dot = name.find('.')?;
    let (key, ext) = (&name[..dot], &name[dot + 1..]);
    (!key.is_empty() && !ext.is_empty()).then_some((key, ext))
}

/// Samples of one shard in file order.
pub fn read_shard(path: &Path) -> Result<Vec<SampleRecord>, ExportError> {
    let mut file = File::open(path).map_err(|e| malformed(path, e))?;
    let len = file.metadata().map_err(|e| malformed(path, e))?.len();
    if len < TAR_TRAILER as u64 || len % TAR_BLOCK as u64 != 0 {
        return Err(malformed(path, format!("truncated ({len} bytes)")));
    }
    let mut tail = [0u8; TAR_TRAILER];
    file.seek(SeekFrom::End(-(TAR_TRAILER as i64)))
        .map_err(|e| malformed(path, e))?;
    file.read_exact(&mut tail).map_err(|e| malformed(path, e))?;
    if tail.iter().any(|b| *b != 0) {
        return Err(malformed(path, "missing end-of-archive blocks"));
    }
    file.seek(SeekFrom::Start(0)).map_err(|e| malformed(path, e))?;

    let mut archive = tar::Archive::new(file);
    let mut out: Vec<SampleRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    for entry in archive.entries().map_err(|e| malformed(path, e))? {
        let mut entry = entry.map_err(|e| malformed(path, e))?;
        let name = entry
            .path()
            .map_err(|e| malformed(path, e))?
            .to_string_lossy()
            .into_owned();
        let (key, ext) = split_entry_name(&name).ok_or_else(|| malformed(path, format!("bad entry name {name:?}")))?;
        let mut data = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut data).map_err(|e| malformed(path, e))?;
        if data.len() as u64 != entry.size() {
            return Err(malformed(path, format!("entry {name} truncated")));
        }
        match out.last_mut() {
            Some(last) if last.key == key => {
                if last.payloads.insert(ext.to_string(), data).is_some() {
                    return Err(malformed(path, format!("entry {name} repeated")));
                }
            }
            _ => {
                if !seen.insert(key.to_string()) {
                    return Err(malformed(path, format!("key {key} is not contiguous")));
                }
                out.push(SampleRecord {
                    key: key.to_string(),
                    payloads: BTreeMap::from([(ext.to_string(), data)]),
                });
            }
        }
    }
    Ok(out)
}

/// All samples of the given shards, in order. A key may not span shards.
pub fn read_shards(paths: &[PathBuf]) -> Result<Vec<SampleRecord>, ExportError> {
    let mut out = Vec::new();
    let mut keys = BTreeSet::new();
    for p in paths {
        for s in read_shard(p)? {
            if !keys.insert(s.key.clone()) {
                return Err(malformed(p, format!("key {} appears in more than one place", s.key)));
            }
            out.push(s);
        }
    }
    Ok(out)
}

/// Outcome of checking a shard directory against its index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub shards: usize,
    pub samples: u64,
    pub problems: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Re-read every indexed shard: adjacency, key uniqueness, and agreement of
/// counts and sizes with `shards.json`.
pub fn verify_shards(dir: &Path) -> VerifyReport {
    let mut report = VerifyReport::default();
    let index = match ShardIndex::read(dir) {
        Ok(i) => i,
        Err(e) => {
            report.problems.push(format!("{}: {e}", ShardIndex::FILE_NAME));
            return report;
        }
    };
    let mut keys = BTreeSet::new();
    let mut listed = BTreeSet::new();
    for entry in &index.shards {
        report.shards += 1;
        if !listed.insert(entry.path.clone()) {
            report.problems.push(format!("{}: listed twice", entry.path));
            continue;
        }
        let path = dir.join(&entry.path);
        match std::fs::metadata(&path) {
            Ok(m) if m.len() != entry.bytes => report.problems.push(format!(
                "{}: index says {} bytes, file has {}",
                entry.path,
                entry.bytes,
                m.len()
            )),
            Ok(_) => {}
            Err(e) => {
                report.problems.push(format!("{}: {e}", entry.path));
                continue;
            }
        }
        match read_shard(&path) {
            Ok(samples) => {
                if samples.len() as u64 != entry.count {
                    report.problems.push(format!(
                        "{}: index says {} samples, shard has {}",
                        entry.path,
                        entry.count,
                        samples.len()
                    ));
                }
                for s in samples {
                    report.samples += 1;
                    if !keys.insert(s.key.clone()) {
                        report
                            .problems
                            .push(format!("{}: key {} also in another shard", entry.path, s.key));
                    }
                    if !s.payloads.contains_key("json") {
                        report
                            .problems
                            .push(format!("{}: sample {} has no json metadata", entry.path, s.key));
                    }
                }
            }
            Err(e) => report.problems.push(format!("{}: {e}", entry.path)),
        }
    }
    if let Ok(rd) = std::fs::read_dir(dir) {
        let mut stray: Vec<String> = rd
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".tar") && !listed.contains(n))
            .collect();
        stray.sort();
        for n in stray {
            report.problems.push(format!("{n}: shard not listed in index"));
        }
    }
    report
}

/// Parsed `json` payload of a sample, for inspection.
pub fn metadata_value(sample: &SampleRecord) -> Option<Value> {
    serde_json::from_slice(sample.payloads.get("json")?).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // numpy.save(np.zeros((4, 85, 4), dtype='<f4')), first 128 bytes
    const GOLDEN_HEADER_4_85_4: &str =
        "934e554d5059010076007b276465736372273a20273c6634272c2027666f727472616e5f6f72646572273a2046616c73652c\
        20277368617065273a2028342c2038352c2034292c207d202020202020202020202020202020202020202020202020202020\
        2020202020202020202020202020202020202020202020202020200a";
    // numpy.save(np.array([[1, 2]], dtype='<f4')), whole file
    const GOLDEN_1X2: &str =
        "934e554d5059010076007b276465736372273a20273c6634272c2027666f727472616e5f6f72646572273a2046616c73652c\
        20277368617065273a2028312c2032292c207d20202020202020202020202020202020202020202020202020202020202020\
        2020202020202020202020202020202020202020202020202020200a0000803f00000040";

    #[test]
    fn npy_goldens() {
        let h = npy_header(&[4, 85, 4], Element::F4);
        assert_eq!(hex::encode(&h), GOLDEN_HEADER_4_85_4);
        assert_eq!(h.len(), 128);
        let full = encode_array(&[1.0, 2.0], &[1, 2], Element::F4).unwrap();
        assert_eq!(hex::encode(&full), GOLDEN_1X2);
    }

    #[test]
    fn npy_roundtrip_and_empty() {
        let a = decode_array(&encode_array(&[1.0, 2.0], &[1, 2], Element::F4).unwrap()).unwrap();
        assert_eq!(a.data, vec![1.0, 2.0]);
        assert_eq!(a.shape, vec![1, 2]);
        let e = encode_array(&[], &[0, 85, 4], Element::F4).unwrap();
        assert_eq!(e.len() % 64, 0);
        assert_eq!(decode_array(&e).unwrap().shape, vec![0, 85, 4]);
        let x = [0.1, -3.25, 1e300];
        assert_eq!(
            decode_array(&encode_array(&x, &[3], Element::F8).unwrap())
                .unwrap()
                .data,
            x.to_vec()
        );
        assert!(encode_array(&[1.0], &[2], Element::F4).is_err());
        assert!(encode_array(&[f64::NAN], &[1], Element::F4).is_err());
        assert!(decode_array(b"garbage").is_err());
    }

    fn sample(key: &str, size: usize) -> SampleRecord {
        let meta = SampleMeta {
            sample_id: key.into(),
            video_id: "v".into(),
            start_s: Some(0.0),
            end_s: Some(1.5),
            processor: "pose:synthetic".into(),
            split: None,
        };
        SampleRecord::new(
            key,
            &meta,
            Some("hello"),
            BTreeMap::from([("pose.npy".to_string(), vec![7u8; size])]),
        )
    }

    #[test]
    fn metadata_bytes_sorted_compact() {
        let s = sample("k", 1);
        assert_eq!(
            std::str::from_utf8(&s.payloads["json"]).unwrap(),
            r#"{"end_s":1.5,"processor":"pose:synthetic","sample_id":"k","start_s":0.0,"video_id":"v"}"#
        );
    }

    fn paths(dir: &Path, index: &ShardIndex) -> Vec<PathBuf> {
        index.shards.iter().map(|s| dir.join(&s.path)).collect()
    }

    #[test]
    fn entry_order_and_names() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ShardSpec {
            max_samples: 10,
            max_bytes: 1 << 30,
            worker_id: 3,
        };
        let index = write_shards(vec![sample("k", 3)], &spec, dir.path()).unwrap();
        assert_eq!(index.shards[0].path, "shard-03-000000.tar");
        let mut ar = tar::Archive::new(File::open(dir.path().join("shard-03-000000.tar")).unwrap());
        let names: Vec<String> = ar
            .entries()
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                assert_eq!(e.header().mtime().unwrap(), 0);
                assert_eq!(e.header().mode().unwrap(), 0o644);
                assert_eq!(e.header().uid().unwrap(), 0);
                e.path().unwrap().to_string_lossy().into_owned()
            })
            .collect();
        assert_eq!(names, vec!["k.json", "k.pose.npy", "k.txt"]);
    }

    #[test]
    fn packing_by_count_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ShardSpec {
            max_samples: 100,
            max_bytes: 1 << 30,
            worker_id: 0,
        };
        let samples: Vec<_> = (0..257).map(|i| sample(&format!("s{i:04}"), 16)).collect();
        let index = write_shards(samples.clone(), &spec, dir.path()).unwrap();
        assert_eq!(
            index.shards.iter().map(|s| s.count).collect::<Vec<_>>(),
            vec![100, 100, 57]
        );
        assert_eq!(read_shards(&paths(dir.path(), &index)).unwrap(), samples);
        index.write(dir.path()).unwrap();
        assert!(verify_shards(dir.path()).ok());

        let dir2 = tempfile::tempdir().unwrap();
        let one = sample_tar_bytes(&samples[0]).unwrap().len() as u64;
        let spec = ShardSpec {
            max_samples: 100,
            max_bytes: 2 * one + 1024,
            worker_id: 0,
        };
        let index = write_shards(samples[..5].to_vec(), &spec, dir2.path()).unwrap();
        assert_eq!(index.shards.iter().map(|s| s.count).collect::<Vec<_>>(), vec![2, 2, 1]);
        for s in &index.shards {
            assert!(s.bytes <= spec.max_bytes);
            assert_eq!(std::fs::metadata(dir2.path().join(&s.path)).unwrap().len(), s.bytes);
        }
        let spec = ShardSpec {
            max_samples: 100,
            max_bytes: 10,
            worker_id: 0,
        };
        let dir3 = tempfile::tempdir().unwrap();
        let index = write_shards(samples[..2].to_vec(), &spec, dir3.path()).unwrap();
        assert_eq!(index.shards.len(), 2);
    }

    #[test]
    fn duplicate_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ShardSpec {
            max_samples: 10,
            max_bytes: 1 << 30,
            worker_id: 0,
        };
        assert_eq!(
            write_shards(vec![sample("a", 1), sample("a", 1)], &spec, dir.path()),
            Err(ExportError::DuplicateKey("a".into()))
        );
    }

    #[test]
    fn interleaved_keys_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tar");
        let mut b = tar::Builder::new(File::create(&path).unwrap());
        for name in ["a.json", "b.json", "a.txt"] {
            let mut h = tar::Header::new_ustar();
            h.set_size(1);
            h.set_mode(0o644);
            b.append_data(&mut h, name, &b"x"[..]).unwrap();
        }
        b.finish().unwrap();
        drop(b);
        assert!(matches!(read_shards(&[path]), Err(ExportError::MalformedShard { .. })));
        assert!(read_shards(&[]).unwrap().is_empty());
    }

    #[test]
    fn verify_flags_truncation_and_bad_index() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ShardSpec {
            max_samples: 2,
            max_bytes: 1 << 30,
            worker_id: 0,
        };
        let samples: Vec<_> = (0..4).map(|i| sample(&format!("s{i}"), 600)).collect();
        let index = write_shards(samples, &spec, dir.path()).unwrap();
        index.write(dir.path()).unwrap();
        assert!(verify_shards(dir.path()).ok());

        let mut edited = index.clone();
        edited.shards[0].count = 3;
        edited.write(dir.path()).unwrap();
        let r = verify_shards(dir.path());
        assert!(!r.ok());
        assert!(r.problems[0].contains("shard-00-000000.tar"));
        index.write(dir.path()).unwrap();

        let p = dir.path().join("shard-00-000001.tar");
        let len = std::fs::metadata(&p).unwrap().len();
        let f = std::fs::OpenOptions::new().write(true).open(&p).unwrap();
        f.set_len(len / 2).unwrap();
        let r = verify_shards(dir.path());
        assert!(r.problems.iter().all(|m| m.contains("shard-00-000001.tar")));
        assert!(!r.ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn shard_roundtrip(
            sizes in proptest::collection::vec((0usize..2000, any::<u8>(), proptest::option::of("[ -~]{0,40}")), 0..40),
            max_samples in 1u64..10,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let samples: Vec<SampleRecord> = sizes
                .iter()
                .enumerate()
                .map(|(i, (n, b, cap))| {
                    let meta = SampleMeta {
                        sample_id: format!("id{i}"),
                        video_id: "v".into(),
                        start_s: None,
                        end_s: Some(*n as f64 / 7.0),
                        processor: "p".into(),
                        split: cap.clone(),
                    };
                    SampleRecord::new(&format!("k{i}"), &meta, cap.as_deref(), BTreeMap::from([("pose.npy".to_string(), vec![*b; *n])]))
                })
                .collect();
            let spec = ShardSpec { max_samples, max_bytes: 1 << 20, worker_id: 1 };
            let index = write_shards(samples.clone(), &spec, dir.path()).unwrap();
            prop_assert_eq!(index.total_count(), samples.len() as u64);
            prop_assert_eq!(read_shards(&paths(dir.path(), &index)).unwrap(), samples);
        }
    }
}
