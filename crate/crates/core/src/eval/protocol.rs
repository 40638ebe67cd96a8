//! Calibration, detection and segmentation runs over labelled maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disentangle::{calibrate, split_scored, CalibrationWeights, Component, ProbeItem, ScoreSplit};
use crate::error::{Error, Result};
use crate::eval::metrics::{detect, mean_seg, segment, DetectionResult, SegResult};
use crate::pipeline::{check_model_id, LabelledMaps};
use crate::tensor::GridMap;

fn model_id_of(items: &[LabelledMaps]) -> Result<&str> {
    let first = items
        .first()
        .ok_or_else(|| Error::Invalid("no samples".into()))?;
    let id = first.maps.model_id.as_str();
    if let Some(other) = items.iter().find(|s| s.maps.model_id != id) {
        return Err(Error::Invalid(format!(
            "samples come from models `{id}` and `{}`",
            other.maps.model_id
        )));
    }
    Ok(id)
}

/// Calibrates on the concept-present samples.
pub fn calibrate_labelled(items: &[LabelledMaps], alpha: f64) -> Result<CalibrationWeights> {
    let model_id = model_id_of(items)?;
    let probe: Vec<ProbeItem> = items
        .iter()
        .filter(|s| s.present)
        .map(|s| {
            Ok(ProbeItem {
                maps: s.maps.head_maps(&s.concept)?,
                mask: s
                    .mask
                    .clone()
                    .ok_or_else(|| Error::Invalid(format!("{} has no mask", s.id)))?,
            })
        })
        .collect::<Result<_>>()?;
    calibrate(&probe, alpha, model_id)
}

/// Score split of every sample's own concept, in input order.
pub fn split_all(items: &[LabelledMaps], weights: &CalibrationWeights) -> Result<Vec<ScoreSplit>> {
    check_model_id(weights, model_id_of(items)?)?;
    items
        .par_iter()
        .map(|s| Ok(split_scored(s.maps.require(&s.concept)?, weights)?.2))
        .collect()
}

/// AUROC of each component at telling concept-present from concept-absent
/// samples, optionally restricted to one class.
pub fn detection(
    items: &[LabelledMaps],
    weights: &CalibrationWeights,
    class: Option<&str>,
) -> Result<DetectionResult> {
    let chosen: Vec<LabelledMaps> = items
        .iter()
        .filter(|s| class.is_none() || s.class.as_deref() == class)
        .cloned()
        .collect();
    let splits = split_all(&chosen, weights)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (s, sp) in chosen.iter().zip(splits) {
        if s.present { pos.push(sp) } else { neg.push(sp) }
    }
    detect(&pos, &neg, &Component::ALL)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    /// Summed object map `A^Object`.
    pub object: SegResult,
    /// Summed raw map `A`.
    pub raw: SegResult,
    pub images: usize,
}

/// Segmentation quality of the summed object map and of the raw summed map
/// on every sample with a mask.
pub fn segmentation(items: &[LabelledMaps], weights: &CalibrationWeights) -> Result<SegmentationReport> {
    check_model_id(weights, model_id_of(items)?)?;
    let masked: Vec<&LabelledMaps> = items.iter().filter(|s| s.present && s.mask.is_some()).collect();
    let per_image: Vec<(SegResult, SegResult)> = masked
        .par_iter()
        .map(|s| {
            let (maps, splits, _) = split_scored(s.maps.require(&s.concept)?, weights)?;
            let gt = s.mask.as_ref().expect("filtered on masks");
            Ok((segment(&splits.object_sum, gt)?, segment(&maps.summed(), gt)?))
        })
        .collect::<Result<_>>()?;
    let (object, raw): (Vec<SegResult>, Vec<SegResult>) = per_image.into_iter().unzip();
    Ok(SegmentationReport {
        object: mean_seg(&object)?,
        raw: mean_seg(&raw)?,
        images: masked.len(),
    })
}

/// Summed object map of a sample's concept.
pub fn object_map(sample: &LabelledMaps, concept: &str, weights: &CalibrationWeights) -> Result<GridMap> {
    Ok(split_scored(sample.maps.require(concept)?, weights)?.1.object_sum)
}
