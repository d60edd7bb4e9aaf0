//! Shared fixture builders for integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use signpipe::config::{self, JobConfig};

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_signpipe"))
}

pub fn signpipe(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("SIGNPIPE_OUTPUT_ROOT")
        .output()
        .expect("spawn signpipe")
}

/// What happens inside a synthetic segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scene {
    OnePerson,
    TwoPeople,
    Empty,
}

pub struct SynthSpec {
    pub segments: usize,
    pub videos: usize,
    /// Segment length in seconds.
    pub seg_len_s: f64,
    /// Scene per segment index; unlisted segments get one person.
    pub scenes: BTreeMap<usize, Scene>,
    pub with_bbox: bool,
}

impl SynthSpec {
    pub fn new(segments: usize) -> Self {
        SynthSpec {
            segments,
            videos: segments.div_ceil(5).max(1),
            seg_len_s: 1.0,
            scenes: BTreeMap::new(),
            with_bbox: false,
        }
    }
}

/// Write `videos/*.synth.json` and `manifest.csv` under `dir`; returns the
/// manifest path. Segment `i` lives in video `i % videos`, slot `i / videos`.
pub fn synthetic_dataset(dir: &Path, spec: &SynthSpec) -> PathBuf {
    let vdir = dir.join("videos");
    fs::create_dir_all(&vdir).unwrap();
    let per_video = spec.segments.div_ceil(spec.videos);
    let slot = spec.seg_len_s + 0.5;
    for v in 0..spec.videos {
        let mut scene = Vec::new();
        for s in 0..per_video {
            let i = s * spec.videos + v;
            if i >= spec.segments {
                break;
            }
            let start = s as f64 * slot;
            let one = format!(
                r#"{{"bbox":[{},{},{},{}]}}"#,
                160 + (i % 7) * 4,
                60 + (i % 5) * 3,
                420 + (i % 3) * 10,
                470
            );
            let persons = match spec.scenes.get(&i).copied().unwrap_or(Scene::OnePerson) {
                Scene::OnePerson => format!("[{one}]"),
                Scene::TwoPeople => format!(r#"[{one},{{"bbox":[10,10,200,300],"score":0.9}}]"#),
                Scene::Empty => "[]".into(),
            };
            scene.push(format!(
                r#"{{"start_s":{start},"end_s":{},"persons":{persons}}}"#,
                start + slot
            ));
        }
        let body = format!(
            r#"{{"duration_s":{},"fps":30.0,"width":640,"height":480,"scene":[{}]}}"#,
            per_video as f64 * slot + 1.0,
            scene.join(",")
        );
        fs::write(vdir.join(format!("vid{v:03}.synth.json")), body).unwrap();
    }
    let mut w = csv::Writer::from_path(dir.join("manifest.csv")).unwrap();
    w.write_record(["sample_id", "video_id", "start_s", "end_s", "text", "split", "bbox"])
        .unwrap();
    for i in 0..spec.segments {
        let (v, s) = (i % spec.videos, i / spec.videos);
        let start = s as f64 * slot + 0.25;
        let bbox = if spec.with_bbox { "150,50,450,470" } else { "" };
        w.write_record([
            format!("seg.{i:04}"),
            format!("vid{v:03}"),
            format!("{start}"),
            format!("{}", start + spec.seg_len_s),
            format!("sign number {i}"),
            ["train", "dev", "test"][i % 3].to_string(),
            bbox.to_string(),
        ])
        .unwrap();
    }
    w.flush().unwrap();
    dir.join("manifest.csv")
}

/// YAML for a pose job over a synthetic dataset.
pub fn pose_job_yaml(name: &str, manifest: &Path, output_root: &Path) -> String {
    format!(
        r#"job_name: {name}
dataset:
  adapter_name: canonical_csv
  source_path: {manifest}
  params:
    video_dir: videos
    video_extension: .synth.json
processing:
  mode: pose
  frame_rate_hz: 10
  extractor:
    backend_name: synthetic
    expected_keypoints: 33
    channels: 4
postprocess:
  enabled: true
  normalize:
    scope: per_clip
filter:
  require_text: true
output:
  max_samples_per_shard: 8
runtime:
  workers: 2
  seed: 1234
  output_root: {root}
"#,
        manifest = manifest.display(),
        root = output_root.display()
    )
}

/// YAML for a video job; detection runs on scripted people.
pub fn video_job_yaml(name: &str, manifest: &Path, output_root: &Path) -> String {
    format!(
        r#"job_name: {name}
dataset:
  adapter_name: canonical_csv
  source_path: {manifest}
  params:
    video_dir: videos
    video_extension: .synth.json
processing:
  mode: video
  frame_rate_hz: 5
  detector:
    backend_name: scripted
    sample_stride: 2
  crop:
    pad_fraction: 0.1
    target_aspect: 1.0
    resize: {{width: 224, height: 224}}
output:
  max_samples_per_shard: 4
runtime:
  workers: 2
  output_root: {root}
"#,
        manifest = manifest.display(),
        root = output_root.display()
    )
}

pub fn parse_job(yaml: &str) -> JobConfig {
    config::from_tree(config::parse_tree(yaml, "test").unwrap()).unwrap()
}

pub fn write_job(dir: &Path, file: &str, yaml: &str) -> PathBuf {
    let p = dir.join(file);
    fs::write(&p, yaml).unwrap();
    p
}

/// Every file under `root`, keyed by relative path.
pub fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let e = e.unwrap();
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Write an executable shell script.
#[cfg(unix)]
pub fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    use std::os::unix::fs::PermissionsExt;
    let p = dir.join(name);
    fs::write(&p, format!("#!/bin/sh\n{body}")).unwrap();
    fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).unwrap();
    p
}
