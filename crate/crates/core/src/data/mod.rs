//! Datasets and localization metrics.

pub mod ingest;
pub mod manifest;
pub mod metrics;
pub mod synth;

pub use ingest::{ingest_yto, SplitSpec};
pub use manifest::{FrameEntry, FrameKey, ShotEntry, Split, VideoEntry, VideoManifest};
pub use metrics::{cl_accuracy, corloc, evaluate, LocalizationReport, Prediction};
pub use synth::{generate_synthetic, SynthConfig};
