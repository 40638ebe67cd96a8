//! Metrics, the triplet probing protocol and synthetic fixtures.

pub mod fixture;
pub mod metrics;
pub mod protocol;
pub mod triplet;

pub use fixture::{generate_cbm_fixture, generate_fixture, Fixture, FixtureSpec};
pub use metrics::{
    auroc, average_precision, detect, mean_iou, mean_seg, pixel_accuracy, segment, DetectionResult,
    SegResult,
};
pub use protocol::{calibrate_labelled, detection, segmentation, split_all, SegmentationReport};
pub use triplet::{draw_repetitions, run_triplet, Repetition, TripletResult, TripletScenario};
