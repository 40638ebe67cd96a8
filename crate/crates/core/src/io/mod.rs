//! Loading weights, images, masks, text embeddings and manifests.

pub mod archive;
pub mod concepts;
pub mod image;
pub mod manifest;

pub use archive::{load_weight_archive, Activation, BlockWeights, ModelSpec, WeightArchive};
pub use concepts::{load_concept_embeddings, ConceptEmbeddingSet};
pub use image::{load_image, load_mask, GrayImage, RgbImage};
pub use manifest::{load_probe_manifest, Manifest, ProbeSample};
