//! Backend-agnostic landmark extraction.

pub mod command;
pub mod protocol;
pub mod synthetic;

use std::collections::BTreeSet;

use thiserror::Error;

use crate::config::{ExtractorConfig, Params};
use crate::posepost::{Channel, CoordinateSpace, LandmarkClip};
use protocol::{FrameRequest, Response};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtractorError {
    #[error("failed to start backend: {0}")]
    SpawnFailure(String),
    #[error("backend reports {got_keypoints}x{got_channels}, config expects {want_keypoints}x{want_channels}")]
    HandshakeMismatch {
        want_keypoints: usize,
        want_channels: usize,
        got_keypoints: usize,
        got_channels: usize,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend exited with {status}: {stderr}")]
    BackendCrash { status: String, stderr: String },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("unsupported channel count {0}")]
    UnsupportedChannels(usize),
}

/// Everything needed to open a backend session.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorSpec {
    pub backend_name: String,
    pub command: Option<Vec<String>>,
    pub params: Params,
    pub expected_keypoints: usize,
    pub channels: usize,
    pub seed: u64,
}

impl ExtractorSpec {
    pub fn from_config(cfg: &ExtractorConfig, seed: u64) -> Self {
        ExtractorSpec {
            backend_name: cfg.backend_name.clone(),
            command: cfg.command.clone(),
            params: cfg.params.clone(),
            expected_keypoints: cfg.expected_keypoints as usize,
            channels: cfg.channels as usize,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandshakeInfo {
    pub num_keypoints: usize,
    pub channels: usize,
    pub backend: String,
    pub space: CoordinateSpace,
}

/// One live conversation with a backend.
pub trait LandmarkBackend: Send {
    fn handshake(&mut self) -> Result<HandshakeInfo, ExtractorError>;
    /// Send one clip's frames and collect responses up to `done`.
    fn run_clip(&mut self, frames: &[FrameRequest]) -> Result<Vec<Response>, ExtractorError>;
}

/// Opens backend sessions; registered under the `extractor` kind.
pub trait ExtractorFactory: Send + Sync {
    fn open(&self, spec: &ExtractorSpec) -> Result<Box<dyn LandmarkBackend>, ExtractorError>;
}

pub struct SyntheticFactory;

impl ExtractorFactory for SyntheticFactory {
    fn open(&self, spec: &ExtractorSpec) -> Result<Box<dyn LandmarkBackend>, ExtractorError> {
        Ok(Box::new(synthetic::SyntheticBackend::new(spec)))
    }
}

/// Spawns `argv` for every session.
pub struct CommandFactory {
    pub argv: Vec<String>,
}

impl ExtractorFactory for CommandFactory {
    fn open(&self, spec: &ExtractorSpec) -> Result<Box<dyn LandmarkBackend>, ExtractorError> {
        Ok(Box::new(command::CommandBackend::spawn(spec, &self.argv)?))
    }
}

/// A backend that has completed its handshake.
pub struct Session {
    backend: Box<dyn LandmarkBackend>,
    pub info: HandshakeInfo,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("info", &self.info).finish()
    }
}

/// Open a session and check the backend's reported dimensions.
pub fn handshake(factory: &dyn ExtractorFactory, spec: &ExtractorSpec) -> Result<Session, ExtractorError> {
    let mut backend = factory.open(spec)?;
    let info = backend.handshake()?;
    if info.num_keypoints != spec.expected_keypoints || info.channels != spec.channels {
        return Err(ExtractorError::HandshakeMismatch {
            want_keypoints: spec.expected_keypoints,
            want_channels: spec.channels,
            got_keypoints: info.num_keypoints,
            got_channels: info.channels,
        });
    }
    if Channel::layout(info.channels).is_none() {
        return Err(ExtractorError::UnsupportedChannels(info.channels));
    }
    Ok(Session { backend, info })
}

/// Run one clip through the session.
///
/// Responses may arrive in any order; they are matched to requests by
/// index. Frames answered with `no_detection` become all-zero points.
pub fn extract_clip(
    session: &mut Session,
    sample_id: &str,
    frames: &[FrameRequest],
    fps: f64,
) -> Result<LandmarkClip, ExtractorError> {
    for f in frames {
        f.check_payload().map_err(ExtractorError::Protocol)?;
    }
    let wanted: BTreeSet<usize> = frames.iter().map(|f| f.index).collect();
    if wanted.len() != frames.len() {
        return Err(ExtractorError::Protocol("duplicate frame index in request".into()));
    }
    let position: std::collections::BTreeMap<usize, usize> =
        frames.iter().enumerate().map(|(pos, f)| (f.index, pos)).collect();

    let responses = session.backend.run_clip(frames)?;
    let (k, c) = (session.info.num_keypoints, session.info.channels);
    let mut data = vec![0.0; frames.len() * k * c];
    let mut seen = BTreeSet::new();
    let vis = Channel::layout(c)
        .ok_or(ExtractorError::UnsupportedChannels(c))?
        .iter()
        .position(|ch| *ch == Channel::Visibility);
    for r in responses {
        let (index, points) = match r {
            Response::Landmarks { index, keypoints } => (index, Some(keypoints)),
            Response::NoDetection { index } => (index, None),
            other => return Err(ExtractorError::Protocol(format!("unexpected {other:?}"))),
        };
        let Some(&pos) = position.get(&index) else {
            return Err(ExtractorError::Protocol(format!("response for unknown frame {index}")));
        };
        if !seen.insert(index) {
            return Err(ExtractorError::Protocol(format!("frame {index} answered twice")));
        }
        let Some(points) = points else { continue };
        if points.len() != k {
            return Err(ExtractorError::Protocol(format!(
                "frame {index}: {} keypoints, expected {k}",
                points.len()
            )));
        }
        let row = &mut data[pos * k * c..(pos + 1) * k * c];
        for (kk, p) in points.iter().enumerate() {
            if p.len() != c || p.iter().any(|v| !v.is_finite()) {
                return Err(ExtractorError::Protocol(format!("frame {index}: bad point {kk}")));
            }
            if let Some(v) = vis {
                if !(0.0..=1.0).contains(&p[v]) {
                    return Err(ExtractorError::Protocol(format!(
                        "frame {index}: visibility out of range"
                    )));
                }
            }
            row[kk * c..(kk + 1) * c].copy_from_slice(p);
        }
    }
    if seen != wanted {
        let missing: Vec<_> = wanted.difference(&seen).collect();
        return Err(ExtractorError::Protocol(format!("no response for frames {missing:?}")));
    }
    Ok(LandmarkClip {
        sample_id: sample_id.to_string(),
        backend_name: session.info.backend.clone(),
        fps,
        space: session.info.space,
        channels: Channel::layout(c).expect("checked above"),
        frames: frames.len(),
        keypoints: k,
        data,
    })
}
