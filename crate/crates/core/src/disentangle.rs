//! Object/context disentanglement of the per-head maps.
//!
//! Each `A_{l,h}` is split by a 3×3 median filter into a pseudo-register
//! residue and a filtered map. The filtered map is shared between object and
//! context in proportion to a per-head weight
//! `w_{l,h} = E[1 − exp(−α · IoU(h_m(A_{l,h}), G))]` calibrated on a probe set
//! of maps with ground-truth concept masks.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{median_filter_2d, GridMap};
use crate::vit::{spatial_maps, HeadMaps, ScoredMaps};

pub const DEFAULT_ALPHA: f64 = 3.0;

/// `(map − f_m(map), f_m(map))`.
///
/// The two parts add back to `map` bit for bit whenever the cells are f32
/// values, as they are for scored maps: each filtered cell is one of the
/// inputs, and the difference of two f32 values is exact in f64.
pub fn split_pseudo_register(map: &GridMap) -> (GridMap, GridMap) {
    let filtered = median_filter_2d(map);
    let register = map
        .zip_with(&filtered, |a, f| a - f)
        .expect("median filter keeps the shape");
    (register, filtered)
}

/// `h_m`: 1 where a cell strictly exceeds the map mean.
pub fn binarize_mean(filtered: &GridMap) -> GridMap {
    let mean = filtered.mean();
    filtered.map(|v| if v > mean { 1.0 } else { 0.0 })
}

/// Intersection over union of two binary grids. Two empty grids give 1.
pub fn iou(a: &GridMap, b: &GridMap) -> Result<f64> {
    a.same_shape(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x != 0.0, y != 0.0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// `1 − exp(−α · IoU)`.
pub fn iou_weight(iou: f64, alpha: f64) -> f64 {
    1.0 - (-alpha * iou).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationWeights {
    pub model_id: String,
    pub alpha: f64,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    pub grid: (usize, usize),
    /// `weights[l][h]`.
    pub weights: Vec<Vec<f64>>,
    pub sample_count: usize,
}

impl CalibrationWeights {
    pub fn get(&self, l: usize, h: usize) -> f64 {
        self.weights[l][h]
    }

    /// A table with every weight equal to `w`; handy for boundary cases.
    pub fn uniform(model_id: &str, layers: usize, heads: usize, grid: (usize, usize), w: f64) -> Self {
        Self {
            model_id: model_id.to_string(),
            alpha: DEFAULT_ALPHA,
            layers,
            heads,
            grid,
            weights: vec![vec![w; heads]; layers],
            sample_count: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Invalid(format!("alpha {} must be > 0", self.alpha)));
        }
        if self.weights.len() != self.layers || self.weights.iter().any(|r| r.len() != self.heads) {
            return Err(Error::Shape(format!(
                "calibration table is not {}×{}",
                self.layers, self.heads
            )));
        }
        let cap = 1.0 - (-self.alpha).exp();
        for (l, row) in self.weights.iter().enumerate() {
            for (h, &w) in row.iter().enumerate() {
                if !(w.is_finite() && (0.0..=cap + 1e-12).contains(&w)) {
                    return Err(Error::Invalid(format!(
                        "w[{l}][{h}] = {w} outside [0, 1 − e^(−α)]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: Self = serde_json::from_str(text)
            .map_err(|e| Error::Invalid(format!("calibration file: {e}")))?;
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// One probe element: the maps of an image for its present concept, and the
/// concept's ground-truth mask on the patch grid.
#[derive(Debug, Clone)]
pub struct ProbeItem {
    pub maps: HeadMaps,
    pub mask: GridMap,
}

/// Per-head IoU weights for one probe item, indexed `l·H + h`.
fn item_weights(item: &ProbeItem, alpha: f64) -> Result<Vec<f64>> {
    item.maps
        .maps
        .iter()
        .map(|m| {
            let (_, filtered) = split_pseudo_register(m);
            Ok(iou_weight(iou(&binarize_mean(&filtered), &item.mask)?, alpha))
        })
        .collect()
}

/// Averages the per-head IoU weights over the probe set. Items are processed
/// in parallel and reduced in input order, so the table is bit-identical for
/// any thread count.
pub fn calibrate(probe: &[ProbeItem], alpha: f64, model_id: &str) -> Result<CalibrationWeights> {
    let first = probe
        .first()
        .ok_or_else(|| Error::Invalid("calibration needs a nonempty probe set".into()))?;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Invalid(format!("alpha {alpha} must be > 0")));
    }
    let (layers, heads) = (first.maps.layers, first.maps.heads);
    let grid = first.maps.grid();
    for (i, item) in probe.iter().enumerate() {
        if item.maps.layers != layers || item.maps.heads != heads || item.maps.grid() != grid {
            return Err(Error::Shape(format!("probe item {i} has a different model layout")));
        }
        if item.mask.dims() != grid {
            return Err(Error::Shape(format!(
                "probe item {i}: mask {:?} vs grid {grid:?}",
                item.mask.dims()
            )));
        }
        if item.mask.count_nonzero() == 0 {
            return Err(Error::Invalid(format!("probe item {i} has an empty mask")));
        }
    }
    let per_item: Vec<Vec<f64>> = probe
        .par_iter()
        .map(|item| item_weights(item, alpha))
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0f64; layers * heads];
    for w in &per_item {
        for (a, &x) in acc.iter_mut().zip(w) {
            *a += x;
        }
    }
    let n = probe.len() as f64;
    Ok(CalibrationWeights {
        model_id: model_id.to_string(),
        alpha,
        layers,
        heads,
        grid,
        weights: acc.chunks(heads).map(|r| r.iter().map(|x| x / n).collect()).collect(),
        sample_count: probe.len(),
    })
}

/// Per-head pieces and their `(l, h)` sums.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitMaps {
    pub concept: String,
    pub layers: usize,
    pub heads: usize,
    pub register: Vec<GridMap>,
    pub filtered: Vec<GridMap>,
    pub object: Vec<GridMap>,
    pub context: Vec<GridMap>,
    pub object_sum: GridMap,
    pub context_sum: GridMap,
    pub register_sum: GridMap,
    /// [`HeadMaps::digest`] of the maps this split came from.
    pub source: u64,
}

impl SplitMaps {
    pub fn grid(&self) -> (usize, usize) {
        self.object_sum.dims()
    }
}

/// `A^Object = w·f_m(A)`, `A^Context = (1 − w)·f_m(A)`, register residue
/// kept separately.
pub fn decompose_maps(maps: &HeadMaps, weights: &CalibrationWeights) -> Result<SplitMaps> {
    if weights.layers != maps.layers || weights.heads != maps.heads {
        return Err(Error::Shape(format!(
            "calibration is {}×{}, maps are {}×{}",
            weights.layers, weights.heads, maps.layers, maps.heads
        )));
    }
    if weights.grid != maps.grid() {
        return Err(Error::Shape(format!(
            "calibration grid {:?}, maps grid {:?}",
            weights.grid,
            maps.grid()
        )));
    }
    let (rows, cols) = maps.grid();
    let n = maps.layers * maps.heads;
    let mut out = SplitMaps {
        concept: maps.concept.clone(),
        layers: maps.layers,
        heads: maps.heads,
        register: Vec::with_capacity(n),
        filtered: Vec::with_capacity(n),
        object: Vec::with_capacity(n),
        context: Vec::with_capacity(n),
        object_sum: GridMap::zeros(rows, cols),
        context_sum: GridMap::zeros(rows, cols),
        register_sum: GridMap::zeros(rows, cols),
        source: maps.digest(),
    };
    for l in 0..maps.layers {
        for h in 0..maps.heads {
            let w = weights.get(l, h);
            let (register, filtered) = split_pseudo_register(maps.map(l, h));
            let object = filtered.map(|v| w * v);
            let context = filtered.map(|v| (1.0 - w) * v);
            out.object_sum.accumulate(&object)?;
            out.context_sum.accumulate(&context)?;
            out.register_sum.accumulate(&register)?;
            out.register.push(register);
            out.filtered.push(filtered);
            out.object.push(object);
            out.context.push(context);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSplit {
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "S_object")]
    pub s_object: f64,
    #[serde(rename = "S_context")]
    pub s_context: f64,
    #[serde(rename = "S_register")]
    pub s_register: f64,
    #[serde(rename = "S_cls")]
    pub s_cls: f64,
    pub eps: f64,
}

impl ScoreSplit {
    /// `S_object + S_context + S_register + S_cls + ε`.
    pub fn recombined(&self) -> f64 {
        self.s_object + self.s_context + self.s_register + self.s_cls + self.eps
    }
}

/// A score component selected for detection, classification or reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "S")]
    S,
    #[serde(rename = "S_object")]
    Object,
    #[serde(rename = "S_context")]
    Context,
    #[serde(rename = "S_register")]
    Register,
}

impl Component {
    pub const ALL: [Component; 4] = [Self::S, Self::Object, Self::Context, Self::Register];

    pub fn name(self) -> &'static str {
        match self {
            Self::S => "S",
            Self::Object => "S_object",
            Self::Context => "S_context",
            Self::Register => "S_register",
        }
    }

    /// Whether the component needs a calibration table.
    pub fn needs_calibration(self) -> bool {
        self != Self::S
    }
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown component `{s}`")))
    }
}

impl ScoreSplit {
    pub fn component(&self, c: Component) -> f64 {
        match c {
            Component::S => self.s,
            Component::Object => self.s_object,
            Component::Context => self.s_context,
            Component::Register => self.s_register,
        }
    }
}

/// One score component of a scored pair. `S` needs no calibration.
pub fn component_score(
    sm: &ScoredMaps,
    weights: Option<&CalibrationWeights>,
    component: Component,
) -> Result<f64> {
    match (component, weights) {
        (Component::S, _) => Ok(sm.s),
        (c, None) => Err(Error::Invalid(format!("{c} needs a calibration table"))),
        (c, Some(w)) => Ok(split_scored(sm, w)?.2.component(c)),
    }
}

/// Resums the split maps into score components.
pub fn score_split(sm: &ScoredMaps, splits: &SplitMaps) -> Result<ScoreSplit> {
    let maps = spatial_maps(sm, splits.grid())?;
    if maps.digest() != splits.source {
        return Err(Error::Invalid(format!(
            "split maps for `{}` were not derived from scored maps for `{}`",
            splits.concept, sm.concept
        )));
    }
    Ok(ScoreSplit {
        s: sm.s,
        s_object: splits.object_sum.sum(),
        s_context: splits.context_sum.sum(),
        s_register: splits.register_sum.sum(),
        s_cls: maps.cls.iter().sum(),
        eps: sm.eps,
    })
}

/// Splits one scored pair end to end.
pub fn split_scored(
    sm: &ScoredMaps,
    weights: &CalibrationWeights,
) -> Result<(HeadMaps, SplitMaps, ScoreSplit)> {
    let maps = spatial_maps(sm, weights.grid)?;
    let splits = decompose_maps(&maps, weights)?;
    let score = score_split(sm, &splits)?;
    Ok((maps, splits, score))
}
