//! Landmark clip post-processing: preset reduction, visibility masking,
//! unit bounding-box normalization, depth dropping and flattening.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::NormalizeScope;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PosepostError {
    #[error("preset `{preset}` targets backend `{preset_backend}`, clip comes from `{clip_backend}`")]
    BackendMismatch {
        preset: String,
        preset_backend: String,
        clip_backend: String,
    },
    #[error("preset index {index} out of range for {keypoints} keypoints")]
    IndexOutOfRange { index: usize, keypoints: usize },
    #[error("no valid points in {0}")]
    NoValidPoints(String),
    #[error("clip has no depth channel")]
    NoDepthChannel,
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("invalid preset: {0}")]
    InvalidPreset(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    X,
    Y,
    Z,
    Visibility,
}

impl Channel {
    /// Conventional layout for a channel count: 2 → xy, 3 → xy+vis, 4 → xyz+vis.
    pub fn layout(channels: usize) -> Option<Vec<Channel>> {
        use Channel::*;
        match channels {
            2 => Some(vec![X, Y]),
            3 => Some(vec![X, Y, Visibility]),
            4 => Some(vec![X, Y, Z, Visibility]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateSpace {
    Pixel,
    FrameNormalized,
    UnitBbox,
}

/// A (frames × keypoints × channels) landmark array, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkClip {
    pub sample_id: String,
    pub backend_name: String,
    pub fps: f64,
    pub space: CoordinateSpace,
    pub channels: Vec<Channel>,
    pub frames: usize,
    pub keypoints: usize,
    pub data: Vec<f64>,
}

impl LandmarkClip {
    pub fn validate(&self) -> Result<(), PosepostError> {
        let bad = |m: &str| Err(PosepostError::InvalidClip(m.to_string()));
        if self.frames == 0 || self.keypoints == 0 || self.channels.is_empty() {
            return bad("dimensions must be positive");
        }
        if self.data.len() != self.frames * self.keypoints * self.channels.len() {
            return bad("data length does not match shape");
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return bad("values must be finite");
        }
        if let Some(v) = self.channel_index(Channel::Visibility) {
            if self.points().any(|p| !(0.0..=1.0).contains(&p[v])) {
                return bad("visibility outside [0, 1]");
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.keypoints, self.channels.len()]
    }

    pub fn channel_index(&self, ch: Channel) -> Option<usize> {
        self.channels.iter().position(|c| *c == ch)
    }

    pub fn point(&self, t: usize, k: usize) -> &[f64] {
        let c = self.channels.len();
        let start = (t * self.keypoints + k) * c;
        &self.data[start..start + c]
    }

    fn point_mut(&mut self, t: usize, k: usize) -> &mut [f64] {
        let c = self.channels.len();
        let start = (t * self.keypoints + k) * c;
        &mut self.data[start..start + c]
    }

    fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels.len())
    }
}

/// Named keypoint subset for one backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointPreset {
    pub name: String,
    pub backend: String,
    pub indices: Vec<usize>,
}

const BUILTIN_PRESETS: &[(&str, &str)] = &[
    ("holistic_85", include_str!("../data/presets/holistic_85.json")),
    ("synthetic_85", include_str!("../data/presets/synthetic_85.json")),
];

impl KeypointPreset {
    pub fn identity(backend: &str, keypoints: usize) -> Self {
        KeypointPreset {
            name: "identity".into(),
            backend: backend.into(),
            indices: (0..keypoints).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PosepostError> {
        let preset: KeypointPreset =
            serde_json::from_str(text).map_err(|e| PosepostError::InvalidPreset(e.to_string()))?;
        preset.check()?;
        Ok(preset)
    }

    fn check(&self) -> Result<(), PosepostError> {
        if self.indices.is_empty() {
            return Err(PosepostError::InvalidPreset(format!("`{}` has no indices", self.name)));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.indices.iter().find(|i| !seen.insert(**i)) {
            return Err(PosepostError::InvalidPreset(format!(
                "`{}` repeats index {dup}",
                self.name
            )));
        }
        Ok(())
    }

    /// Resolve a builtin preset by name, or load a JSON preset file when the
    /// name looks like a path.
    pub fn resolve(name: &str) -> Result<Self, PosepostError> {
        if let Some((_, text)) = BUILTIN_PRESETS.iter().find(|(n, _)| *n == name) {
            return Self::from_json(text);
        }
        if name.ends_with(".json") || name.contains('/') {
            let text = std::fs::read_to_string(Path::new(name))
                .map_err(|e| PosepostError::InvalidPreset(format!("{name}: {e}")))?;
            return Self::from_json(&text);
        }
        Err(PosepostError::UnknownPreset(name.to_string()))
    }

    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN_PRESETS.iter().map(|(n, _)| *n).collect()
    }

    /// Stable bytes for hashing: the preset serialized as compact JSON.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("preset serializes")
    }
}

pub fn reduce_keypoints(clip: &LandmarkClip, preset: &KeypointPreset) -> Result<LandmarkClip, PosepostError> {
    if preset.backend != clip.backend_name {
        return Err(PosepostError::BackendMismatch {
            preset: preset.name.clone(),
            preset_backend: preset.backend.clone(),
            clip_backend: clip.backend_name.clone(),
        });
    }
    if let Some(&index) = preset.indices.iter().find(|&&i| i >= clip.keypoints) {
        return Err(PosepostError::IndexOutOfRange {
            index,
            keypoints: clip.keypoints,
        });
    }
    let mut data = Vec::with_capacity(clip.frames * preset.indices.len() * clip.channels.len());
    for t in 0..clip.frames {
        for &k in &preset.indices {
            data.extend_from_slice(clip.point(t, k));
        }
    }
    Ok(LandmarkClip {
        keypoints: preset.indices.len(),
        data,
        ..clip.clone()
    })
}

/// `mask[t * K + k]` is true when the point has no visibility channel or its
/// visibility reaches the threshold.
pub fn compute_valid_mask(clip: &LandmarkClip, visibility_threshold: f64) -> Vec<bool> {
    match clip.channel_index(Channel::Visibility) {
        None => vec![true; clip.frames * clip.keypoints],
        Some(v) => clip.points().map(|p| p[v] >= visibility_threshold).collect(),
    }
}

pub fn mask_invisible(clip: &LandmarkClip, visibility_threshold: f64) -> LandmarkClip {
    let mut out = clip.clone();
    let mask = compute_valid_mask(clip, visibility_threshold);
    for (p, valid) in out.data.chunks_exact_mut(clip.channels.len()).zip(mask) {
        if !valid {
            p.fill(0.0);
        }
    }
    out
}

/// Result of a normalization pass. `empty_frames` lists frames zeroed under
/// per-frame scope because they had no valid point.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub clip: LandmarkClip,
    pub empty_frames: Vec<usize>,
}

/// Map valid x/y onto the unit square spanned by their bounding box.
///
/// A degenerate axis collapses to 0 through the `epsilon` floor on the
/// denominator; z is divided by the larger planar extent, or left as is when
/// both axes are degenerate. Invalid points are zeroed, visibility included.
pub fn unit_bbox_normalize(
    clip: &LandmarkClip,
    scope: NormalizeScope,
    visibility_threshold: f64,
    epsilon: f64,
) -> Result<Normalized, PosepostError> {
    let (xi, yi) = match (clip.channel_index(Channel::X), clip.channel_index(Channel::Y)) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(PosepostError::InvalidClip("x and y channels are required".into())),
    };
    let zi = clip.channel_index(Channel::Z);
    let mask = compute_valid_mask(clip, visibility_threshold);
    let k = clip.keypoints;
    let mut out = clip.clone();
    out.space = CoordinateSpace::UnitBbox;

    let units: Vec<std::ops::Range<usize>> = match scope {
        NormalizeScope::PerClip => vec![0..clip.frames],
        NormalizeScope::PerFrame => (0..clip.frames).map(|t| t..t + 1).collect(),
    };
    let mut empty_frames = Vec::new();
    for frames in units {
        let mut bounds: Option<[f64; 4]> = None;
        for t in frames.clone() {
            for kk in 0..k {
                if !mask[t * k + kk] {
                    continue;
                }
                let p = clip.point(t, kk);
                let b = bounds.get_or_insert([p[xi], p[xi], p[yi], p[yi]]);
                b[0] = b[0].min(p[xi]);
                b[1] = b[1].max(p[xi]);
                b[2] = b[2].min(p[yi]);
                b[3] = b[3].max(p[yi]);
            }
        }
        let Some([xmin, xmax, ymin, ymax]) = bounds else {
            match scope {
                NormalizeScope::PerClip => {
                    return Err(PosepostError::NoValidPoints(format!("clip {}", clip.sample_id)));
                }
                NormalizeScope::PerFrame => {
                    for t in frames {
                        for kk in 0..k {
                            out.point_mut(t, kk).fill(0.0);
                        }
                        empty_frames.push(t);
                    }
                    continue;
                }
            }
        };
        let sx = (xmax - xmin).max(epsilon);
        let sy = (ymax - ymin).max(epsilon);
        let planar = (xmax - xmin).max(ymax - ymin);
        let sz = if planar >= epsilon { planar } else { 1.0 };
        for t in frames {
            for kk in 0..k {
                let p = out.point_mut(t, kk);
                if !mask[t * k + kk] {
                    p.fill(0.0);
                    continue;
                }
                p[xi] = (p[xi] - xmin) / sx;
                p[yi] = (p[yi] - ymin) / sy;
                if let Some(z) = zi {
                    p[z] /= sz;
                }
            }
        }
    }
    Ok(Normalized {
        clip: out,
        empty_frames,
    })
}

pub fn drop_depth(clip: &LandmarkClip) -> Result<LandmarkClip, PosepostError> {
    let z = clip.channel_index(Channel::Z).ok_or(PosepostError::NoDepthChannel)?;
    let c = clip.channels.len();
    let data = clip
        .data
        .chunks_exact(c)
        .flat_map(|p| p.iter().enumerate().filter(|(i, _)| *i != z).map(|(_, v)| *v))
        .collect();
    let mut channels = clip.channels.clone();
    channels.remove(z);
    Ok(LandmarkClip {
        channels,
        data,
        ..clip.clone()
    })
}

/// A 2-D row-major array, `rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// `(t, k, c)` lands in column `k * C + c` of row `t`.
pub fn flatten(clip: &LandmarkClip) -> Matrix {
    // row-major (T, K, C) is already (T, K*C) in memory
    Matrix {
        rows: clip.frames,
        cols: clip.keypoints * clip.channels.len(),
        data: clip.data.clone(),
    }
}

pub fn unflatten(m: &Matrix, keypoints: usize, channels: usize) -> Option<Vec<f64>> {
    (m.cols == keypoints * channels).then(|| m.data.clone())
}
