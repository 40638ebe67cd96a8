//! Concept-level Shapley attributions for the bottleneck head and heatmap
//! rendering of the object maps behind them.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbm::{predict, CbmModel};
use crate::error::{Error, Result};
use crate::io::{GrayImage, RgbImage};
use crate::tensor::GridMap;

/// Exact Shapley values of the class-`class` logit of a linear head:
/// `φ_j = W_{class,j}·(row_j − background_j)`.
pub fn shap_linear(model: &CbmModel, class: usize, row: &[f64], background: &[f64]) -> Result<Vec<f64>> {
    let k = model.concepts.len();
    if row.len() != k || background.len() != k {
        return Err(Error::Shape(format!(
            "row {} and background {} vs {k} concepts",
            row.len(),
            background.len()
        )));
    }
    if class >= model.classes.len() {
        return Err(Error::Invalid(format!("class index {class} out of range")));
    }
    let (w, _) = model.effective_weights(class);
    Ok(w.iter()
        .zip(row.iter().zip(background))
        .map(|(w, (x, b))| w * (x - b))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapEstimate {
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Mean marginal contributions over `permutations` random feature orders,
/// each walked from `background` to `row`.
pub fn shap_permutation(
    f: impl Fn(&[f64]) -> f64,
    row: &[f64],
    background: &[f64],
    permutations: usize,
    seed: u64,
) -> Result<ShapEstimate> {
    let d = row.len();
    if background.len() != d {
        return Err(Error::Shape(format!("row {d} vs background {}", background.len())));
    }
    if permutations == 0 {
        return Err(Error::Invalid("at least one permutation is needed".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..d).collect();
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for _ in 0..permutations {
        order.shuffle(&mut rng);
        let mut z = background.to_vec();
        let mut prev = f(&z);
        for &j in &order {
            z[j] = row[j];
            let cur = f(&z);
            let delta = cur - prev;
            sum[j] += delta;
            sum_sq[j] += delta * delta;
            prev = cur;
        }
    }
    let p = permutations as f64;
    let values: Vec<f64> = sum.iter().map(|s| s / p).collect();
    let stderr = if permutations < 2 {
        vec![0.0; d]
    } else {
        sum_sq
            .iter()
            .zip(&values)
            .map(|(sq, m)| ((sq / p - m * m).max(0.0) * p / (p - 1.0) / p).sqrt())
            .collect()
    };
    Ok(ShapEstimate { values, stderr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedConcept {
    pub concept: String,
    pub shap: f64,
}

/// The `k` entries of largest magnitude, ties broken by name.
pub fn top_k(values: &[RankedConcept], k: usize) -> Result<Vec<RankedConcept>> {
    if k == 0 || k > values.len() {
        return Err(Error::Invalid(format!("k = {k} with {} concepts", values.len())));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| {
        b.shap
            .abs()
            .total_cmp(&a.shap.abs())
            .then_with(|| a.concept.cmp(&b.concept))
    });
    v.truncate(k);
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub class: String,
    pub logit: f64,
    pub background_logit: f64,
    /// Every concept, strongest first.
    pub ranking: Vec<RankedConcept>,
    pub background: Vec<f64>,
    /// Object map per concept, in model concept order.
    pub maps: Vec<(String, GridMap)>,
}

/// Attributes the predicted class of `row` to the concepts.
pub fn explain(
    model: &CbmModel,
    row: &[f64],
    background: &[f64],
    maps: Vec<(String, GridMap)>,
) -> Result<Explanation> {
    let pred = predict(model, row)?;
    let phi = shap_linear(model, pred.class, row, background)?;
    if maps.len() != model.concepts.len()
        || maps.iter().zip(&model.concepts).any(|((a, _), b)| a != b)
    {
        return Err(Error::Invalid("object maps do not follow the model's concepts".into()));
    }
    let values: Vec<RankedConcept> = model
        .concepts
        .iter()
        .zip(phi)
        .map(|(c, shap)| RankedConcept {
            concept: c.clone(),
            shap,
        })
        .collect();
    Ok(Explanation {
        class: model.classes[pred.class].clone(),
        logit: model.logits(row)?[pred.class],
        background_logit: model.logits(background)?[pred.class],
        ranking: top_k(&values, values.len())?,
        background: background.to_vec(),
        maps,
    })
}

/// Min-max scales a map to 0–255 and upsamples it by nearest neighbour.
/// A constant map renders as mid-gray.
pub fn heatmap(map: &GridMap, width: usize, height: usize) -> GrayImage {
    let (lo, hi) = map.min_max();
    let level = |v: f64| -> u8 {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            128
        }
    };
    let (rows, cols) = map.dims();
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let r = y * rows / height;
        for x in 0..width {
            data.push(level(map.get(r, x * cols / width)));
        }
    }
    GrayImage {
        width,
        height,
        data,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub concept: String,
    pub shap: f64,
    pub abs_shap: f64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub class: String,
    pub logit: f64,
    pub background_logit: f64,
    pub concepts: Vec<SidecarEntry>,
    pub contact_sheet: String,
}

impl Sidecar {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn ranking(&self) -> Vec<RankedConcept> {
        self.concepts
            .iter()
            .map(|e| RankedConcept {
                concept: e.concept.clone(),
                shap: e.shap,
            })
            .collect()
    }
}

fn file_stem(concept: &str) -> String {
    concept
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes one heatmap per top-`k` concept, `explanation.json` and a contact
/// sheet with the image (or a black panel) followed by the heatmaps.
pub fn render_explanation(
    expl: &Explanation,
    image: Option<&RgbImage>,
    size: (usize, usize),
    k: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (w, h) = image.map_or(size, |im| (im.width, im.height));
    let top = top_k(&expl.ranking, k)?;
    let mut written = Vec::new();
    let mut panels = Vec::new();
    let mut entries = Vec::new();
    for (rank, rc) in top.iter().enumerate() {
        let map = &expl
            .maps
            .iter()
            .find(|(c, _)| *c == rc.concept)
            .ok_or_else(|| Error::Invalid(format!("no map for `{}`", rc.concept)))?
            .1;
        let file = format!("{:02}_{}.pgm", rank + 1, file_stem(&rc.concept));
        let img = heatmap(map, w, h);
        let path = out_dir.join(&file);
        img.write(&path)?;
        written.push(path);
        panels.push(img);
        entries.push(SidecarEntry {
            concept: rc.concept.clone(),
            shap: rc.shap,
            abs_shap: rc.shap.abs(),
            file,
        });
    }
    let sheet_name = "contact_sheet.ppm";
    let cols = panels.len() + 1;
    let mut sheet = RgbImage {
        width: w * cols,
        height: h,
        data: vec![0; 3 * w * cols * h],
    };
    for y in 0..h {
        for p in 0..cols {
            for x in 0..w {
                let px = match (p, image) {
                    (0, Some(im)) => {
                        let o = 3 * (y * w + x);
                        [im.data[o], im.data[o + 1], im.data[o + 2]]
                    }
                    (0, None) => [0; 3],
                    (p, _) => [panels[p - 1].data[y * w + x]; 3],
                };
                let o = 3 * (y * w * cols + p * w + x);
                sheet.data[o..o + 3].copy_from_slice(&px);
            }
        }
    }
    let sheet_path = out_dir.join(sheet_name);
    sheet.write(&sheet_path)?;
    written.push(sheet_path);
    let sidecar = Sidecar {
        class: expl.class.clone(),
        logit: expl.logit,
        background_logit: expl.background_logit,
        concepts: entries,
        contact_sheet: sheet_name.into(),
    };
    let path = out_dir.join("explanation.json");
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
