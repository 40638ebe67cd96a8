use std::path::PathBuf;

use chili_core::Component;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "chili",
    version,
    about = "Split CLIP concept scores into object, context and pseudo-register parts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit per-head object weights on a probe manifest.
    Calibrate(CalibrateArgs),
    /// Score every sample against every concept.
    Score(ScoreArgs),
    /// AUROC of each score component at concept detection.
    Detect(DetectArgs),
    /// Segmentation quality of the object map against the raw map.
    Segment(SegmentArgs),
    /// Present / absent / other-class probing over repeated draws.
    Triplet(TripletArgs),
    /// Train a concept-bottleneck classifier.
    #[command(name = "cbm-train")]
    CbmTrain(CbmTrainArgs),
    /// Concept-level Shapley values and heatmaps for CBM predictions.
    Explain(ExplainArgs),
    /// Run the end-to-end checks on generated fixtures.
    Selftest(SelftestArgs),
    /// Write a synthetic fixture to disk.
    Fixture(FixtureArgs),
}

/// Where images are encoded from. Manifests that list precomputed maps
/// files need none of these.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Weight archive (safetensors).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Concept embeddings JSON.
    #[arg(long)]
    pub concepts: Option<PathBuf>,
    /// Replaces the archive's logit scale.
    #[arg(long)]
    pub logit_scale: Option<f32>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutArgs {
    /// Directory for the JSON report.
    #[arg(long, default_value = "chili-out")]
    pub out_dir: PathBuf,
}

fn parse_component(s: &str) -> Result<Component, String> {
    s.parse::<Component>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = chili_core::disentangle::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Calibration file to write (default: OUT_DIR/calibration.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// With a calibration, the object, context and register parts are reported too.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Also write each sample's maps and a manifest listing them.
    #[arg(long)]
    pub save_maps: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub calibration: PathBuf,
    /// Only use samples of this class.
    #[arg(long)]
    pub class: Option<String>,
    /// Components to report; repeatable (default: all).
    #[arg(long, value_parser = parse_component)]
    pub component: Vec<Component>,
    #[command(flatten)]
    pub output: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SegmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub calibration: PathBuf,
    #[command(flatten)]
    pub output: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TripletArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// `C1:C2:K`; repeatable.
    #[arg(long, required = true)]
    pub scenario: Vec<String>,
    #[arg(long, default_value = "S", value_parser = parse_component)]
    pub component: Component,
    /// Images drawn per subset and repetition.
    #[arg(long)]
    pub samples: usize,
    #[arg(long, default_value_t = 10)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CbmTrainArgs {
    /// Training manifest; every sample needs a class.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long, default_value = "S", value_parser = parse_component)]
    pub component: Component,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    /// z-score concept columns before training.
    #[arg(long)]
    pub standardize: bool,
    /// Model file to write (default: OUT_DIR/cbm_model.json).
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExplainArgs {
    /// Model file written by `cbm-train`.
    #[arg(long)]
    pub cbm: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub calibration: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Pixels per grid cell for samples without a picture.
    #[arg(long, default_value_t = 16)]
    pub cell_size: usize,
    #[command(flatten)]
    pub output: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelftestArgs {
    #[arg(long, default_value = "chili-selftest")]
    pub out_dir: PathBuf,
    /// Seed of the fixture written to disk.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fixture seeds swept by the calibration and detection checks.
    #[arg(long, default_value_t = 20)]
    pub sweep: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureKind {
    Detection,
    Cbm,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = FixtureKind::Detection)]
    pub kind: FixtureKind,
}
