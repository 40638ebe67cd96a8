//! Decomposing ViT concept scores into per-head spatial maps and separating
//! object, context and register contributions.

pub mod cbm;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod explain;
pub mod io;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod vit;

pub use cbm::{accuracy, predict, train, CbmModel, ConceptMatrix, Hyper};
pub use disentangle::{
    calibrate, decompose_maps, score_split, split_scored, CalibrationWeights, Component, ProbeItem,
    ScoreSplit, SplitMaps,
};
pub use error::{Error, Result};
pub use io::{
    load_concept_embeddings, load_image, load_mask, load_probe_manifest, load_weight_archive,
    ConceptEmbeddingSet, Manifest, ModelSpec, ProbeSample, WeightArchive,
};
pub use pipeline::ImageMaps;
pub use tensor::{GridMap, Tensor};
pub use vit::{
    decompose, encode_image, score_concept, spatial_maps, ContributionRecord, HeadMaps,
    ResidualRecord, ScoredMaps,
};
