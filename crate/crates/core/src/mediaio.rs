//! Video probing, frame sampling and clip rendering.
//!
//! Two backends: `synthetic` reads `.synth.json` descriptors that script
//! where people stand over time, and `command` shells out to configurable
//! probe/render command templates (ffprobe/ffmpeg by default).

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, CropPlan};

pub const SYNTHETIC_EXTENSION: &str = ".synth.json";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MediaError {
    #[error("cannot read {path}: {message}")]
    Unreadable { path: String, message: String },
    #[error("bad media metadata in {path}: {message}")]
    BadMetadata { path: String, message: String },
    #[error("invalid time range [{start}, {end})")]
    InvalidRange { start: f64, end: f64 },
    #[error("cannot decode {path} at {time}s: {message}")]
    DecodeFailure { path: String, time: f64, message: String },
    #[error("command `{command}` failed ({status}): {output}")]
    CommandFailure {
        command: String,
        status: String,
        output: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MediaInfo {
    pub duration_s: f64,
    pub fps: f64,
    pub width: u32,
    pub height: u32,
}

impl MediaInfo {
    fn check(&self, path: &Path) -> Result<(), MediaError> {
        let ok = self.duration_s.is_finite()
            && self.duration_s > 0.0
            && self.fps.is_finite()
            && self.fps > 0.0
            && self.width > 0
            && self.height > 0;
        if ok {
            Ok(())
        } else {
            Err(MediaError::BadMetadata {
                path: path.display().to_string(),
                message: format!("non-positive field in {self:?}"),
            })
        }
    }

    pub fn frame_count(&self) -> u64 {
        ((self.duration_s * self.fps).ceil() as u64).max(1)
    }
}

/// A person scripted into a synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedPerson {
    pub bbox: BBox,
    #[serde(default = "full_score")]
    pub score: f64,
}

fn full_score() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpan {
    pub start_s: f64,
    pub end_s: f64,
    pub persons: Vec<ScriptedPerson>,
}

/// Contents of a `.synth.json` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticMedia {
    pub duration_s: f64,
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub scene: Vec<SceneSpan>,
}

impl SyntheticMedia {
    pub fn info(&self) -> MediaInfo {
        MediaInfo {
            duration_s: self.duration_s,
            fps: self.fps,
            width: self.width,
            height: self.height,
        }
    }

    pub fn persons_at(&self, t: f64) -> Vec<ScriptedPerson> {
        self.scene
            .iter()
            .filter(|s| s.start_s <= t && t < s.end_s)
            .flat_map(|s| s.persons.iter().copied())
            .collect()
    }
}

/// One sampled frame. Pixels stay in the file; backends get a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Position within the clip's sample sequence.
    pub index: usize,
    pub time_s: f64,
    /// Nearest source frame.
    pub frame_index: u64,
    pub width: u32,
    pub height: u32,
    pub path: PathBuf,
    /// Scripted detections; only synthetic media carries them.
    pub scripted: Vec<ScriptedPerson>,
}

/// What a render produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedClip {
    pub input: PathBuf,
    pub start_s: f64,
    pub end_s: f64,
    pub plan: CropPlan,
    pub output: PathBuf,
}

pub trait MediaBackend: Send + Sync {
    fn probe(&self, path: &Path) -> Result<MediaInfo, MediaError>;
    fn decode_frames(&self, path: &Path, times: &[f64]) -> Result<Vec<Frame>, MediaError>;
    fn render_clip(
        &self,
        path: &Path,
        start_s: f64,
        end_s: f64,
        plan: &CropPlan,
        out_path: &Path,
    ) -> Result<RenderedClip, MediaError>;
    /// Extension of rendered clips, used as the export payload key.
    fn clip_extension(&self) -> &'static str;
}

/// `start + i / rate` for every `i` with the timestamp still before `end`.
pub fn sample_times(start_s: f64, end_s: f64, rate_hz: f64) -> Result<Vec<f64>, MediaError> {
    if !(start_s.is_finite() && end_s.is_finite() && start_s < end_s && rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(MediaError::InvalidRange {
            start: start_s,
            end: end_s,
        });
    }
    let bound = ((end_s - start_s) * rate_hz).floor() as usize + 1;
    let mut out = Vec::with_capacity(bound);
    for i in 0..=bound {
        let t = start_s + i as f64 / rate_hz;
        if t >= end_s {
            break;
        }
        out.push(t);
    }
    Ok(out)
}

fn nearest_frames(path: &Path, info: &MediaInfo, times: &[f64]) -> Result<Vec<(f64, u64)>, MediaError> {
    let last = info.frame_count() - 1;
    times
        .iter()
        .map(|&t| {
            if !(t.is_finite() && t >= 0.0 && t <= info.duration_s) {
                return Err(MediaError::DecodeFailure {
                    path: path.display().to_string(),
                    time: t,
                    message: format!("outside media duration {}s", info.duration_s),
                });
            }
            Ok((t, ((t * info.fps).round() as u64).min(last)))
        })
        .collect()
}

fn check_range(start_s: f64, end_s: f64) -> Result<(), MediaError> {
    if start_s.is_finite() && end_s.is_finite() && start_s >= 0.0 && start_s < end_s {
        Ok(())
    } else {
        Err(MediaError::InvalidRange {
            start: start_s,
            end: end_s,
        })
    }
}

// ---------------------------------------------------------------------------

pub struct SyntheticMediaBackend;

impl SyntheticMediaBackend {
    pub fn load(path: &Path) -> Result<SyntheticMedia, MediaError> {
        let text = std::fs::read_to_string(path).map_err(|e| MediaError::Unreadable {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let media: SyntheticMedia = serde_json::from_str(&text).map_err(|e| MediaError::BadMetadata {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        media.info().check(path)?;
        for span in &media.scene {
            for p in &span.persons {
                if !p.bbox.within_frame(media.width, media.height) || !(0.0..=1.0).contains(&p.score) {
                    return Err(MediaError::BadMetadata {
                        path: path.display().to_string(),
                        message: format!("scripted person {:?} outside frame or bad score", p.bbox),
                    });
                }
            }
        }
        Ok(media)
    }
}

impl MediaBackend for SyntheticMediaBackend {
    fn probe(&self, path: &Path) -> Result<MediaInfo, MediaError> {
        Ok(Self::load(path)?.info())
    }

    fn decode_frames(&self, path: &Path, times: &[f64]) -> Result<Vec<Frame>, MediaError> {
        if times.is_empty() {
            return Ok(Vec::new());
        }
        let media = Self::load(path)?;
        let info = media.info();
        Ok(nearest_frames(path, &info, times)?
            .into_iter()
            .enumerate()
            .map(|(index, (t, frame_index))| Frame {
                index,
                time_s: t,
                frame_index,
                width: info.width,
                height: info.height,
                path: path.to_path_buf(),
                scripted: media.persons_at(t),
            })
            .collect())
    }

    /// Writes a JSON descriptor of the render instead of video.
    fn render_clip(
        &self,
        path: &Path,
        start_s: f64,
        end_s: f64,
        plan: &CropPlan,
        out_path: &Path,
    ) -> Result<RenderedClip, MediaError> {
        check_range(start_s, end_s)?;
        let rendered = RenderedClip {
            input: path.to_path_buf(),
            start_s,
            end_s,
            plan: *plan,
            output: out_path.to_path_buf(),
        };
        let bytes = serde_json::to_vec(&rendered).expect("descriptor serializes");
        std::fs::write(out_path, bytes).map_err(|e| MediaError::Unreadable {
            path: out_path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(rendered)
    }

    fn clip_extension(&self) -> &'static str {
        "clip.json"
    }
}

// ---------------------------------------------------------------------------

pub fn default_probe_command() -> Vec<String> {
    [
        "ffprobe",
        "-v",
        "error",
        "-select_streams",
        "v:0",
        "-show_entries",
        "stream=width,height,r_frame_rate:format=duration",
        "-of",
        "json",
        "{input}",
    ]
    .map(String::from)
    .to_vec()
}

pub fn default_render_command() -> Vec<String> {
    [
        "ffmpeg",
        "-nostdin",
        "-y",
        "-loglevel",
        "error",
        "-ss",
        "{start}",
        "-to",
        "{end}",
        "-i",
        "{input}",
        "-vf",
        "crop={w}:{h}:{x}:{y},scale={out_w}:{out_h}",
        "-an",
        "{output}",
    ]
    .map(String::from)
    .to_vec()
}

/// Substitute `{token}` occurrences in every argument.
pub fn fill_template(template: &[String], tokens: &[(&str, String)]) -> Vec<String> {
    template
        .iter()
        .map(|arg| {
            tokens.iter().fold(arg.clone(), |acc, (name, value)| {
                acc.replace(&format!("{{{name}}}"), value)
            })
        })
        .collect()
}

fn run(argv: &[String]) -> Result<String, MediaError> {
    let command = argv.join(" ");
    let (program, args) = argv.split_first().ok_or_else(|| MediaError::CommandFailure {
        command: command.clone(),
        status: "not started".into(),
        output: "empty command template".into(),
    })?;
    let out = Command::new(program)
        .args(args)
        .output()
        .map_err(|e| MediaError::CommandFailure {
            command: command.clone(),
            status: "not started".into(),
            output: e.to_string(),
        })?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        let mut output = stdout;
        output.push_str(&String::from_utf8_lossy(&out.stderr));
        return Err(MediaError::CommandFailure {
            command,
            status: out.status.to_string(),
            output: output.trim().to_string(),
        });
    }
    Ok(stdout)
}

/// External tools driven by argument-vector templates.
pub struct CommandMediaBackend {
    pub probe_command: Vec<String>,
    pub render_command: Vec<String>,
}

impl Default for CommandMediaBackend {
    fn default() -> Self {
        CommandMediaBackend {
            probe_command: default_probe_command(),
            render_command: default_render_command(),
        }
    }
}

#[derive(Deserialize)]
struct ProbeOutput {
    #[serde(default)]
    streams: Vec<ProbeStream>,
    #[serde(default)]
    format: Option<ProbeFormat>,
}

#[derive(Deserialize)]
struct ProbeStream {
    width: Option<u32>,
    height: Option<u32>,
    r_frame_rate: Option<String>,
}

#[derive(Deserialize)]
struct ProbeFormat {
    duration: Option<String>,
}

fn parse_rate(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((n, d)) => {
            let (n, d): (f64, f64) = (n.trim().parse().ok()?, d.trim().parse().ok()?);
            (d != 0.0).then(|| n / d)
        }
        None => s.trim().parse().ok(),
    }
}

/// Parse ffprobe-style JSON into media info.
pub fn parse_probe_json(path: &Path, text: &str) -> Result<MediaInfo, MediaError> {
    let bad = |message: String| MediaError::BadMetadata {
        path: path.display().to_string(),
        message,
    };
    let out: ProbeOutput = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let stream = out.streams.first().ok_or_else(|| bad("no video stream".into()))?;
    let info = MediaInfo {
        duration_s: out
            .format
            .and_then(|f| f.duration)
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| bad("missing duration".into()))?,
        fps: stream
            .r_frame_rate
            .as_deref()
            .and_then(parse_rate)
            .ok_or_else(|| bad("missing frame rate".into()))?,
        width: stream.width.ok_or_else(|| bad("missing width".into()))?,
        height: stream.height.ok_or_else(|| bad("missing height".into()))?,
    };
    info.check(path)?;
    Ok(info)
}

impl MediaBackend for CommandMediaBackend {
    fn probe(&self, path: &Path) -> Result<MediaInfo, MediaError> {
        if !path.exists() {
            return Err(MediaError::Unreadable {
                path: path.display().to_string(),
                message: "no such file".into(),
            });
        }
        let argv = fill_template(&self.probe_command, &[("input", path.display().to_string())]);
        let text = run(&argv)?;
        parse_probe_json(path, &text)
    }

    fn decode_frames(&self, path: &Path, times: &[f64]) -> Result<Vec<Frame>, MediaError> {
        if times.is_empty() {
            return Ok(Vec::new());
        }
        let info = self.probe(path)?;
        Ok(nearest_frames(path, &info, times)?
            .into_iter()
            .enumerate()
            .map(|(index, (t, frame_index))| Frame {
                index,
                time_s: t,
                frame_index,
                width: info.width,
                height: info.height,
                path: path.to_path_buf(),
                scripted: Vec::new(),
            })
            .collect())
    }

    fn render_clip(
        &self,
        path: &Path,
        start_s: f64,
        end_s: f64,
        plan: &CropPlan,
        out_path: &Path,
    ) -> Result<RenderedClip, MediaError> {
        check_range(start_s, end_s)?;
        let argv = fill_template(
            &self.render_command,
            &[
                ("input", path.display().to_string()),
                ("start", start_s.to_string()),
                ("end", end_s.to_string()),
                ("x", plan.x.to_string()),
                ("y", plan.y.to_string()),
                ("w", plan.w.to_string()),
                ("h", plan.h.to_string()),
                ("out_w", plan.out_w.to_string()),
                ("out_h", plan.out_h.to_string()),
                ("output", out_path.display().to_string()),
            ],
        );
        run(&argv)?;
        Ok(RenderedClip {
            input: path.to_path_buf(),
            start_s,
            end_s,
            plan: *plan,
            output: out_path.to_path_buf(),
        })
    }

    fn clip_extension(&self) -> &'static str {
        "mp4"
    }
}
