//! Tools for following buildings (and other entities) through a series of
//! historical map tiles.
//!
//! * [`synth`] turns single tiles with pseudo-masks into two-frame training videos.
//! * [`linker`] chains per-frame detections into tracks with the
//!   "approximately within" relation between consecutive frames.
//! * [`eval`] scores predicted tracks against ground truth with
//!   spatio-temporal IoU, AP over ten IoU thresholds, and precision/recall/F1.
//! * [`io`] reads and writes YouTube-VIS style manifests and detection files.
//! * [`mask`] holds the run-length codec and mask algebra everything else uses.

pub mod cli;
pub mod eval;
pub mod io;
pub mod linker;
pub mod mask;
pub mod model;
pub mod synth;

pub use model::{
    validate_manifest, Category, DatasetManifest, Detection, Fraction, FrameDetections,
    InstanceTrack, RleMask, Timestamp, VideoRecord, Violation,
};
