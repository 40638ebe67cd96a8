//! Per-image scored maps and the glue from manifest samples to them.
//!
//! A sample's `image` is either a picture, which is encoded with the weight
//! archive and scored against every concept, or a precomputed maps file:
//!
//! ```json
//! {"model_id": "...", "layers": L, "heads": H, "grid": [R, C],
//!  "maps": [{"concept": "...", "layers": L, "heads": H, "tokens": N+1,
//!            "a": [...], "eps": 0.0, "s": 0.0}]}
//! ```

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disentangle::{CalibrationWeights, ProbeItem};
use crate::error::{Error, Result};
use crate::io::{load_image, load_mask, ConceptEmbeddingSet, Manifest, ProbeSample, WeightArchive};
use crate::tensor::{GridMap, Tensor};
use crate::vit::{decompose, encode_image, score_concept, spatial_maps, HeadMaps, ScoredMaps};

/// Scored maps of one image for every concept of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMaps {
    pub model_id: String,
    pub layers: usize,
    pub heads: usize,
    pub grid: (usize, usize),
    pub maps: Vec<ScoredMaps>,
}

impl ImageMaps {
    pub fn get(&self, concept: &str) -> Option<&ScoredMaps> {
        self.maps.iter().find(|m| m.concept == concept)
    }

    pub fn require(&self, concept: &str) -> Result<&ScoredMaps> {
        self.get(concept)
            .ok_or_else(|| Error::Invalid(format!("no maps for concept `{concept}`")))
    }

    pub fn head_maps(&self, concept: &str) -> Result<HeadMaps> {
        spatial_maps(self.require(concept)?, self.grid)
    }

    pub fn validate(&self) -> Result<()> {
        let tokens = self.grid.0 * self.grid.1 + 1;
        for m in &self.maps {
            if m.layers != self.layers || m.heads != self.heads || m.tokens != tokens {
                return Err(Error::Shape(format!(
                    "maps for `{}` are {}×{}×{}, expected {}×{}×{tokens}",
                    m.concept, m.layers, m.heads, m.tokens, self.layers, self.heads
                )));
            }
            m.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("maps serialize")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let maps: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        maps.validate()?;
        Ok(maps)
    }
}

/// Encodes an image tensor and scores it against every concept.
pub fn image_maps(
    weights: &WeightArchive,
    concepts: &ConceptEmbeddingSet,
    image: &Tensor,
) -> Result<ImageMaps> {
    let spec = &weights.spec;
    if concepts.dim() != spec.d_embed {
        return Err(Error::Shape(format!(
            "concept width {} vs model embedding width {}",
            concepts.dim(),
            spec.d_embed
        )));
    }
    let (_, record) = encode_image(weights, image)?;
    let contrib = decompose(weights, &record)?;
    let maps = concepts
        .iter()
        .map(|(name, t)| score_concept(&contrib, name, t, spec.logit_scale))
        .collect::<Result<_>>()?;
    Ok(ImageMaps {
        model_id: spec.model_id.clone(),
        layers: spec.layers,
        heads: spec.heads,
        grid: spec.grid(),
        maps,
    })
}

/// Maps of one image together with what is known about it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledMaps {
    pub id: String,
    pub class: Option<String>,
    /// The concept the sample is about.
    pub concept: String,
    pub present: bool,
    /// Ground truth on the patch grid, when the concept is present.
    pub mask: Option<GridMap>,
    pub maps: ImageMaps,
}

/// A weight archive and concept set, used when samples reference images.
#[derive(Clone, Copy)]
pub struct Model<'a> {
    pub weights: &'a WeightArchive,
    pub concepts: &'a ConceptEmbeddingSet,
}

fn is_maps_file(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Maps for one manifest sample, computed or loaded.
pub fn sample_maps(sample: &ProbeSample, model: Option<Model<'_>>) -> Result<ImageMaps> {
    if is_maps_file(&sample.image) {
        return ImageMaps::load(&sample.image);
    }
    let model = model.ok_or_else(|| {
        Error::Invalid(format!(
            "{} is an image; scoring it needs weights and concept embeddings",
            sample.image.display()
        ))
    })?;
    let image = load_image(&sample.image, model.weights.spec.image_size)?;
    image_maps(model.weights, model.concepts, &image)
}

/// Maps for every sample, in manifest order.
pub fn manifest_maps(manifest: &Manifest, model: Option<Model<'_>>) -> Result<Vec<ImageMaps>> {
    let maps: Vec<ImageMaps> = manifest
        .samples
        .par_iter()
        .map(|s| sample_maps(s, model))
        .collect::<Result<_>>()?;
    for (m, s) in maps.iter().zip(&manifest.samples) {
        if m.grid != manifest.grid {
            return Err(Error::Shape(format!(
                "{}: maps grid {:?}, manifest grid {:?}",
                s.image.display(),
                m.grid,
                manifest.grid
            )));
        }
    }
    Ok(maps)
}

/// Checks that every maps set came from one model and returns its id.
pub fn common_model_id(maps: &[ImageMaps]) -> Result<String> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Invalid("no samples".into()))?;
    if let Some(other) = maps.iter().find(|m| m.model_id != first.model_id) {
        return Err(Error::Invalid(format!(
            "samples come from models `{}` and `{}`",
            first.model_id, other.model_id
        )));
    }
    Ok(first.model_id.clone())
}

pub fn check_model_id(weights: &CalibrationWeights, model_id: &str) -> Result<()> {
    if weights.model_id != model_id {
        return Err(Error::Invalid(format!(
            "calibration was built for model `{}`, data comes from `{model_id}`",
            weights.model_id
        )));
    }
    Ok(())
}

/// The ground-truth mask of a sample pooled onto the patch grid.
pub fn sample_mask(sample: &ProbeSample, grid: (usize, usize)) -> Result<GridMap> {
    let path = sample.mask.as_ref().ok_or_else(|| {
        Error::Invalid(format!("{} has no mask", sample.image.display()))
    })?;
    load_mask(path, grid.0, grid.1)
}

/// Maps and masks for every sample of a manifest, in manifest order.
pub fn labelled_maps(manifest: &Manifest, model: Option<Model<'_>>) -> Result<Vec<LabelledMaps>> {
    let maps = manifest_maps(manifest, model)?;
    manifest
        .samples
        .iter()
        .zip(maps)
        .map(|(s, m)| {
            let mask = match (&s.mask, s.present) {
                (Some(_), _) => Some(sample_mask(s, manifest.grid)?),
                (None, true) => {
                    return Err(Error::Invalid(format!(
                        "{} has the concept present but no mask",
                        s.image.display()
                    )))
                }
                (None, false) => None,
            };
            Ok(LabelledMaps {
                id: s.image.display().to_string(),
                class: s.class.clone(),
                concept: s.concept.clone(),
                present: s.present,
                mask,
                maps: m,
            })
        })
        .collect()
}

/// Probe items for the present samples of a manifest.
pub fn probe_items(manifest: &Manifest, maps: &[ImageMaps]) -> Result<Vec<ProbeItem>> {
    manifest
        .samples
        .iter()
        .zip(maps)
        .filter(|(s, _)| s.present)
        .map(|(s, m)| {
            Ok(ProbeItem {
                maps: m.head_maps(&s.concept)?,
                mask: sample_mask(s, manifest.grid)?,
            })
        })
        .collect()
}
