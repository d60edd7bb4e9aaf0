//! signpipe: config-driven preprocessing for sign-language video corpora.
//!
//! A job ingests a segment manifest, turns each segment into pose landmarks
//! or a signer-cropped clip, optionally normalizes landmarks, and writes
//! tar shards. Each stage is checkpointed by content hash.

pub mod cli;
pub mod config;
pub mod export;
pub mod extractor;
pub mod geometry;
pub mod manifest;
pub mod mediaio;
pub mod pipeline;
pub mod posepost;
pub mod registry;
