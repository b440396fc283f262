//! End-to-end helpers: synthetic scenes, metrics and file codecs.

pub mod io;
pub mod metrics;
pub mod render;
pub mod synth;
