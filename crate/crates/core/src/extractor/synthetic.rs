//! Deterministic hash-derived landmarks. Pixels are never read.

use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use super::protocol::{self, FrameRequest, Request, Response};
use super::{ExtractorError, ExtractorSpec, HandshakeInfo, LandmarkBackend};
use crate::posepost::CoordinateSpace;

pub const BACKEND_NAME: &str = "synthetic";

/// Value in `[0, 1)` from SHA-256 over `seed␟sample_id␟frame␟k␟c`
/// (0x1F separators, decimal integers): the first eight digest bytes read as
/// a big-endian integer, divided by 2^64.
pub fn synthetic_keypoint(seed: u64, sample_id: &str, frame: usize, k: usize, c: usize) -> f64 {
    let mut h = Sha256::new();
    h.update(format!("{seed}\x1f{sample_id}\x1f{frame}\x1f{k}\x1f{c}").as_bytes());
    let digest = h.finalize();
    let u = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
    // u64 -> f64 rounds to nearest; the top 1024 values would round to 1.0
    (u as f64 / 18_446_744_073_709_551_616.0).min(1.0 - f64::EPSILON / 2.0)
}

pub fn synthetic_frame(seed: u64, sample_id: &str, frame: usize, keypoints: usize, channels: usize) -> Vec<Vec<f64>> {
    (0..keypoints)
        .map(|k| {
            (0..channels)
                .map(|c| synthetic_keypoint(seed, sample_id, frame, k, c))
                .collect()
        })
        .collect()
}

/// In-process synthetic backend. Reports whatever dimensions it is asked for.
pub struct SyntheticBackend {
    seed: u64,
    keypoints: usize,
    channels: usize,
}

impl SyntheticBackend {
    pub fn new(spec: &ExtractorSpec) -> Self {
        SyntheticBackend {
            seed: spec.seed,
            keypoints: spec.expected_keypoints,
            channels: spec.channels,
        }
    }

    fn answer(&self, f: &FrameRequest) -> Response {
        Response::Landmarks {
            index: f.index,
            keypoints: synthetic_frame(self.seed, &f.sample_id, f.index, self.keypoints, self.channels),
        }
    }
}

impl LandmarkBackend for SyntheticBackend {
    fn handshake(&mut self) -> Result<HandshakeInfo, ExtractorError> {
        Ok(HandshakeInfo {
            num_keypoints: self.keypoints,
            channels: self.channels,
            backend: BACKEND_NAME.to_string(),
            space: CoordinateSpace::FrameNormalized,
        })
    }

    fn run_clip(&mut self, frames: &[FrameRequest]) -> Result<Vec<Response>, ExtractorError> {
        Ok(frames.iter().map(|f| self.answer(f)).collect())
    }
}

/// Serve the synthetic backend over the line protocol on the given streams.
/// Returns when the input reaches EOF.
pub fn serve<R: BufRead, W: Write>(input: R, mut output: W) -> std::io::Result<()> {
    let mut backend: Option<SyntheticBackend> = None;
    let mut pending = Vec::new();
    let reply = |out: &mut W, r: &Response| -> std::io::Result<()> {
        out.write_all(protocol::encode(r).as_bytes())?;
        out.flush()
    };
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req = match protocol::decode_request(&line) {
            Ok(r) => r,
            Err(e) => {
                reply(&mut output, &Response::Error { message: e.to_string() })?;
                continue;
            }
        };
        match (req, backend.as_ref()) {
            (
                Request::Init {
                    expected_keypoints,
                    channels,
                    seed,
                    ..
                },
                _,
            ) => {
                let b = SyntheticBackend {
                    seed,
                    keypoints: expected_keypoints,
                    channels,
                };
                reply(
                    &mut output,
                    &Response::Ready {
                        backend: BACKEND_NAME.into(),
                        num_keypoints: b.keypoints,
                        channels: b.channels,
                        space: CoordinateSpace::FrameNormalized,
                    },
                )?;
                backend = Some(b);
            }
            (Request::Frame(f), Some(b)) => {
                pending.push(b.answer(&f));
            }
            (Request::End, Some(_)) => {
                for r in pending.drain(..) {
                    reply(&mut output, &r)?;
                }
                reply(&mut output, &Response::Done)?;
            }
            (_, None) => {
                reply(
                    &mut output,
                    &Response::Error {
                        message: "init must come first".into(),
                    },
                )?;
            }
        }
    }
    Ok(())
}
