//! Detection and segmentation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::disentangle::{binarize_mean, Component, ScoreSplit};
use crate::error::{Error, Result};
use crate::tensor::GridMap;

/// Mann–Whitney AUROC: the probability that a positive outscores a
/// negative, with ties counted as one half.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Invalid("AUROC needs positive and negative scores".into()));
    }
    if pos.iter().chain(neg).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("AUROC scores".into()));
    }
    let mut sorted = neg.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Twice the U statistic, kept integral.
    let mut twice_u: u64 = 0;
    for &p in pos {
        let below = sorted.partition_point(|&n| n < p);
        let upto = sorted.partition_point(|&n| n <= p);
        twice_u += (2 * below + (upto - below)) as u64;
    }
    Ok(twice_u as f64 / (2 * pos.len() * neg.len()) as f64)
}

fn binary_pair<'a>(
    pred: &'a GridMap,
    gt: &'a GridMap,
) -> Result<impl Iterator<Item = (bool, bool)> + 'a> {
    pred.same_shape(gt)?;
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| (p != 0.0, g != 0.0)))
}

/// Fraction of cells where `pred` and `gt` agree.
pub fn pixel_accuracy(pred: &GridMap, gt: &GridMap) -> Result<f64> {
    let n = pred.len();
    let hits = binary_pair(pred, gt)?.filter(|(p, g)| p == g).count();
    Ok(hits as f64 / n as f64)
}

/// Mean of foreground and background IoU. A class absent from both masks
/// is left out of the mean.
pub fn mean_iou(pred: &GridMap, gt: &GridMap) -> Result<f64> {
    let mut inter = [0usize; 2];
    let mut union = [0usize; 2];
    for (p, g) in binary_pair(pred, gt)? {
        for (k, class) in [true, false].into_iter().enumerate() {
            inter[k] += (p == class && g == class) as usize;
            union[k] += (p == class || g == class) as usize;
        }
    }
    let ious: Vec<f64> = (0..2)
        .filter(|&k| union[k] > 0)
        .map(|k| inter[k] as f64 / union[k] as f64)
        .collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Area under the step precision–recall curve, cells ranked by descending
/// score. Each run of tied scores is a single threshold, so a constant map
/// scores the foreground fraction.
pub fn average_precision(scores: &GridMap, gt: &GridMap) -> Result<f64> {
    scores.same_shape(gt)?;
    let positives = gt.count_nonzero();
    if positives == 0 {
        return Err(Error::Invalid("average precision needs a nonempty mask".into()));
    }
    let mut order: Vec<(f64, bool)> = scores
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&s, &g)| (s, g != 0.0))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = order[i].0;
        while i < order.len() && order[i].0 == s {
            if order[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Segmentation scores of one soft map against its mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegResult {
    pub pixel_acc: f64,
    pub miou: f64,
    pub map: f64,
}

/// Thresholds `scores` at its mean for accuracy and mIoU; AP uses the raw
/// values.
pub fn segment(scores: &GridMap, gt: &GridMap) -> Result<SegResult> {
    let pred = binarize_mean(scores);
    Ok(SegResult {
        pixel_acc: pixel_accuracy(&pred, gt)?,
        miou: mean_iou(&pred, gt)?,
        map: average_precision(scores, gt)?,
    })
}

/// Per-image results averaged over a dataset.
pub fn mean_seg(results: &[SegResult]) -> Result<SegResult> {
    if results.is_empty() {
        return Err(Error::Invalid("no segmentation results to average".into()));
    }
    let n = results.len() as f64;
    let sum = |f: fn(&SegResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    Ok(SegResult {
        pixel_acc: sum(|r| r.pixel_acc),
        miou: sum(|r| r.miou),
        map: sum(|r| r.map),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub auroc: BTreeMap<Component, f64>,
    pub positives: usize,
    pub negatives: usize,
}

impl DetectionResult {
    pub fn get(&self, c: Component) -> Option<f64> {
        self.auroc.get(&c).copied()
    }
}

/// AUROC of every component at separating concept-present from
/// concept-absent images.
pub fn detect(present: &[ScoreSplit], absent: &[ScoreSplit], components: &[Component]) -> Result<DetectionResult> {
    let auroc = components
        .iter()
        .map(|&c| {
            let pos: Vec<f64> = present.iter().map(|s| s.component(c)).collect();
            let neg: Vec<f64> = absent.iter().map(|s| s.component(c)).collect();
            Ok((c, auroc(&pos, &neg)?))
        })
        .collect::<Result<_>>()?;
    Ok(DetectionResult {
        auroc,
        positives: present.len(),
        negatives: absent.len(),
    })
}
