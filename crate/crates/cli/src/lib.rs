//! Batch front-end for the two-phase pipeline: offline data collection and
//! identification, then online prescribed-time control runs.

pub mod commands;
pub mod config;
pub mod dataio;
