//! Line-delimited JSON messages exchanged with landmark backends.
//!
//! One compact JSON object per line, UTF-8, `\n` terminated. The engine
//! sends `init` once per session, then for each clip a run of `frame`
//! messages closed by `end`. The backend answers `ready`, one `landmarks` or
//! `no_detection` per frame (any order), and `done` after the clip. Closing
//! the backend's stdin ends the session.

use std::path::PathBuf;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::config::Params;
use crate::geometry::BBox;
use crate::posepost::CoordinateSpace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transport", content = "payload", rename_all = "snake_case")]
pub enum FramePayload {
    /// Base64 of `width * height * 3` raw RGB bytes.
    InlineRgb(String),
    FileRef {
        path: PathBuf,
        frame_index: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRequest {
    pub index: usize,
    pub sample_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub bbox: Option<BBox>,
    #[serde(flatten)]
    pub payload: FramePayload,
}

impl FrameRequest {
    /// Inline payloads must decode to exactly `width * height * 3` bytes.
    pub fn check_payload(&self) -> Result<(), String> {
        if let FramePayload::InlineRgb(b64) = &self.payload {
            let raw = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| format!("frame {}: bad base64: {e}", self.index))?;
            let want = self.width as usize * self.height as usize * 3;
            if raw.len() != want {
                return Err(format!(
                    "frame {}: inline payload has {} bytes, expected {want}",
                    self.index,
                    raw.len()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    Init {
        backend: String,
        expected_keypoints: usize,
        channels: usize,
        #[serde(default)]
        params: Params,
        #[serde(default)]
        seed: u64,
    },
    Frame(FrameRequest),
    End,
}

fn frame_normalized() -> CoordinateSpace {
    CoordinateSpace::FrameNormalized
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Ready {
        backend: String,
        num_keypoints: usize,
        channels: usize,
        #[serde(default = "frame_normalized")]
        space: CoordinateSpace,
    },
    Landmarks {
        index: usize,
        keypoints: Vec<Vec<f64>>,
    },
    NoDetection {
        index: usize,
    },
    Done,
    Error {
        message: String,
    },
}

pub fn encode<T: Serialize>(msg: &T) -> String {
    let mut line = serde_json::to_string(msg).expect("protocol messages serialize");
    line.push('\n');
    line
}

pub fn decode_request(line: &str) -> Result<Request, serde_json::Error> {
    serde_json::from_str(line.trim_end_matches(['\n', '\r']))
}

pub fn decode_response(line: &str) -> Result<Response, serde_json::Error> {
    serde_json::from_str(line.trim_end_matches(['\n', '\r']))
}
