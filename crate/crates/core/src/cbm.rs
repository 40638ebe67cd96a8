//! Concept-bottleneck classifier: multinomial logistic regression over
//! concept-score vectors.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disentangle::{component_score, CalibrationWeights, Component};
use crate::error::{Error, Result};
use crate::io::ConceptEmbeddingSet;
use crate::pipeline::ImageMaps;
use crate::vit::{score_concept, ContributionRecord};

/// Concept scores, one row per image, with a class label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMatrix {
    pub concepts: Vec<String>,
    pub classes: Vec<String>,
    pub component: Component,
    /// Row-major `rows × concepts`.
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ConceptMatrix {
    /// Builds a matrix from rows of scores and class names. The class
    /// vocabulary is the sorted set of names.
    pub fn new(
        concepts: Vec<String>,
        component: Component,
        rows: Vec<Vec<f64>>,
        labels: &[String],
    ) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Shape(format!("{} rows, {} labels", rows.len(), labels.len())));
        }
        let mut classes: Vec<String> = labels.to_vec();
        classes.sort();
        classes.dedup();
        let mut values = Vec::with_capacity(rows.len() * concepts.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != concepts.len() {
                return Err(Error::Shape(format!(
                    "row {i} has {} scores, expected {}",
                    r.len(),
                    concepts.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("concept scores of row {i}")));
            }
            values.extend_from_slice(r);
        }
        let labels = labels
            .iter()
            .map(|l| classes.binary_search(l).expect("label is in the vocabulary"))
            .collect();
        Ok(Self {
            concepts,
            classes,
            component,
            values,
            labels,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn cols(&self) -> usize {
        self.concepts.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.cols();
        &self.values[i * k..(i + 1) * k]
    }

    /// Column means, the usual Shapley background.
    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols()];
        for i in 0..self.rows() {
            for (a, v) in m.iter_mut().zip(self.row(i)) {
                *a += v;
            }
        }
        m.iter().map(|v| v / self.rows().max(1) as f64).collect()
    }

    /// Rows `idx`, keeping the vocabulary.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            concepts: self.concepts.clone(),
            classes: self.classes.clone(),
            component: self.component,
            values: idx.iter().flat_map(|&i| self.row(i).to_vec()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn check_calibration(component: Component, weights: Option<&CalibrationWeights>) -> Result<()> {
    if component.needs_calibration() && weights.is_none() {
        return Err(Error::Invalid(format!("{component} scores need a calibration table")));
    }
    Ok(())
}

/// Scores decomposed images against every concept.
pub fn build_concept_matrix(
    records: &[ContributionRecord],
    concepts: &ConceptEmbeddingSet,
    logit_scale: f32,
    weights: Option<&CalibrationWeights>,
    component: Component,
    labels: &[String],
) -> Result<ConceptMatrix> {
    check_calibration(component, weights)?;
    let rows: Vec<Vec<f64>> = records
        .par_iter()
        .map(|rec| {
            concepts
                .iter()
                .map(|(name, t)| {
                    let sm = score_concept(rec, name, t, logit_scale)?;
                    component_score(&sm, weights, component)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    ConceptMatrix::new(concepts.names().map(String::from).collect(), component, rows, labels)
}

/// As [`build_concept_matrix`], from already scored maps.
pub fn matrix_from_maps(
    maps: &[ImageMaps],
    concepts: &[String],
    weights: Option<&CalibrationWeights>,
    component: Component,
    labels: &[String],
) -> Result<ConceptMatrix> {
    check_calibration(component, weights)?;
    let rows: Vec<Vec<f64>> = maps
        .par_iter()
        .map(|m| {
            concepts
                .iter()
                .map(|c| component_score(m.require(c)?, weights, component))
                .collect()
        })
        .collect::<Result<_>>()?;
    ConceptMatrix::new(concepts.to_vec(), component, rows, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub l2: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// z-score each concept column before training.
    pub standardize: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            epochs: 500,
            learning_rate: 0.1,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbmModel {
    pub classes: Vec<String>,
    pub concepts: Vec<String>,
    /// `classes × concepts`, acting on scaled scores when `scaling` is set.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub component: Component,
    pub hyper: Hyper,
    pub scaling: Option<Scaling>,
    /// Mean training row, the reference point for attributions.
    #[serde(default)]
    pub background: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Objective before the first epoch and after each one.
    pub losses: Vec<f64>,
    /// Step size in use after the last epoch.
    pub final_learning_rate: f64,
}

struct Problem<'a> {
    x: &'a [f64],
    y: &'a [usize],
    n: usize,
    k: usize,
    c: usize,
    l2: f64,
}

impl Problem<'_> {
    fn logits(&self, w: &[f64], b: &[f64], row: &[f64]) -> Vec<f64> {
        (0..self.c)
            .map(|j| b[j] + w[j * self.k..(j + 1) * self.k].iter().zip(row).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }

    fn loss(&self, w: &[f64], b: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.n {
            let z = self.logits(w, b, &self.x[i * self.k..(i + 1) * self.k]);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[self.y[i]];
        }
        total / self.n as f64 + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, w: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; self.c];
        for i in 0..self.n {
            let row = &self.x[i * self.k..(i + 1) * self.k];
            let p = softmax(&self.logits(w, b, row));
            for j in 0..self.c {
                let d = p[j] - (j == self.y[i]) as u8 as f64;
                gb[j] += d;
                for (g, x) in gw[j * self.k..(j + 1) * self.k].iter_mut().zip(row) {
                    *g += d * x;
                }
            }
        }
        let n = self.n as f64;
        for (g, wv) in gw.iter_mut().zip(w) {
            *g = *g / n + self.l2 * wv;
        }
        gb.iter_mut().for_each(|g| *g /= n);
        (gw, gb)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn scaling_of(m: &ConceptMatrix) -> Scaling {
    let mean = m.column_means();
    let n = m.rows() as f64;
    let std = (0..m.cols())
        .map(|j| {
            let var = (0..m.rows()).map(|i| (m.row(i)[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 { var.sqrt() } else { 1.0 }
        })
        .collect();
    Scaling { mean, std }
}

fn scaled(row: &[f64], s: Option<&Scaling>) -> Vec<f64> {
    match s {
        None => row.to_vec(),
        Some(s) => row
            .iter()
            .zip(s.mean.iter().zip(&s.std))
            .map(|(v, (m, d))| (v - m) / d)
            .collect(),
    }
}

/// Full-batch gradient descent from zero. A step that would raise the
/// objective is retried at half the step size, and the smaller step size is
/// kept for later epochs, so the recorded losses never increase.
pub fn train(matrix: &ConceptMatrix, hyper: &Hyper) -> Result<(CbmModel, TrainReport)> {
    let c = matrix.classes.len();
    if c < 2 {
        return Err(Error::Invalid(format!("training needs ≥ 2 classes, found {c}")));
    }
    if matrix.rows() == 0 || matrix.cols() == 0 {
        return Err(Error::Invalid("empty concept matrix".into()));
    }
    if !(hyper.learning_rate > 0.0 && hyper.l2 >= 0.0) {
        return Err(Error::Invalid("learning rate must be > 0 and l2 ≥ 0".into()));
    }
    let scaling = hyper.standardize.then(|| scaling_of(matrix));
    let x: Vec<f64> = (0..matrix.rows())
        .flat_map(|i| scaled(matrix.row(i), scaling.as_ref()))
        .collect();
    let k = matrix.cols();
    let p = Problem {
        x: &x,
        y: &matrix.labels,
        n: matrix.rows(),
        k,
        c,
        l2: hyper.l2,
    };
    let mut w = vec![0.0; c * k];
    let mut b = vec![0.0; c];
    let mut lr = hyper.learning_rate;
    let mut loss = p.loss(&w, &b);
    let mut losses = Vec::with_capacity(hyper.epochs + 1);
    losses.push(loss);
    for _ in 0..hyper.epochs {
        let (gw, gb) = p.gradient(&w, &b);
        loop {
            let w2: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - lr * g).collect();
            let b2: Vec<f64> = b.iter().zip(&gb).map(|(a, g)| a - lr * g).collect();
            let l2 = p.loss(&w2, &b2);
            if l2 <= loss {
                (w, b, loss) = (w2, b2, l2);
                break;
            }
            lr *= 0.5;
            if lr < 1e-300 {
                break;
            }
        }
        losses.push(loss);
    }
    let model = CbmModel {
        classes: matrix.classes.clone(),
        concepts: matrix.concepts.clone(),
        weights: w.chunks(k).map(<[f64]>::to_vec).collect(),
        bias: b,
        component: matrix.component,
        hyper: *hyper,
        scaling,
        background: matrix.column_means(),
    };
    Ok((
        model,
        TrainReport {
            losses,
            final_learning_rate: lr,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

impl CbmModel {
    /// Class logits for a raw (unscaled) score row.
    pub fn logits(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.concepts.len() {
            return Err(Error::Shape(format!(
                "row has {} scores, model expects {}",
                row.len(),
                self.concepts.len()
            )));
        }
        let x = scaled(row, self.scaling.as_ref());
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>())
            .collect())
    }

    /// Weights of class `c` on raw scores, with the scaling folded in:
    /// `logit_c(x) = Σ_j effective[j]·x_j + effective_bias`.
    pub fn effective_weights(&self, c: usize) -> (Vec<f64>, f64) {
        match &self.scaling {
            None => (self.weights[c].clone(), self.bias[c]),
            Some(s) => {
                let w: Vec<f64> = self.weights[c].iter().zip(&s.std).map(|(a, d)| a / d).collect();
                let b = self.bias[c] - w.iter().zip(&s.mean).map(|(a, m)| a * m).sum::<f64>();
                (w, b)
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self =
            serde_json::from_str(text).map_err(|e| Error::Invalid(format!("model file: {e}")))?;
        let k = m.concepts.len();
        if m.weights.len() != m.classes.len()
            || m.bias.len() != m.classes.len()
            || m.weights.iter().any(|r| r.len() != k)
        {
            return Err(Error::Shape("model weights disagree with its vocabularies".into()));
        }
        Ok(m)
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

/// Softmax over the class logits; ties in the argmax go to the lowest
/// class index.
pub fn predict(model: &CbmModel, row: &[f64]) -> Result<Prediction> {
    let probabilities = softmax(&model.logits(row)?);
    let mut class = 0;
    for (j, &p) in probabilities.iter().enumerate() {
        if p > probabilities[class] {
            class = j;
        }
    }
    Ok(Prediction {
        class,
        probabilities,
    })
}

/// Fraction of rows whose predicted class matches the label.
pub fn accuracy(model: &CbmModel, matrix: &ConceptMatrix) -> Result<f64> {
    if matrix.rows() == 0 {
        return Err(Error::Invalid("accuracy of an empty matrix".into()));
    }
    let mut hits = 0;
    for i in 0..matrix.rows() {
        let pred = predict(model, matrix.row(i))?;
        hits += (model.classes[pred.class] == matrix.classes[matrix.labels[i]]) as usize;
    }
    Ok(hits as f64 / matrix.rows() as f64)
}
