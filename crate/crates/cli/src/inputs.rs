//! Loading manifests, models and calibration files for a command.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Result;
use chili_core::io::{load_concept_embeddings, load_probe_manifest, load_weight_archive};
use chili_core::pipeline::{common_model_id, labelled_maps, LabelledMaps, Model};
use chili_core::{CalibrationWeights, ConceptEmbeddingSet, Manifest, WeightArchive};

use crate::args::ModelArgs;

/// A configuration problem caught before any work starts.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} does not exist", path.display())))
    }
}

/// Refuses to write over an input file.
pub fn guard_output(output: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| std::fs::canonicalize(p).ok();
    if let Some(out) = canon(output) {
        if inputs.iter().any(|i| canon(i).as_ref() == Some(&out)) {
            return Err(invalid(format!("{} is an input of this run", output.display())));
        }
    }
    Ok(())
}

pub struct LoadedModel {
    pub weights: WeightArchive,
    pub concepts: ConceptEmbeddingSet,
}

impl LoadedModel {
    pub fn as_model(&self) -> Model<'_> {
        Model {
            weights: &self.weights,
            concepts: &self.concepts,
        }
    }
}

pub fn load_model(args: &ModelArgs) -> Result<Option<LoadedModel>> {
    match (&args.weights, &args.concepts) {
        (None, None) => {
            if args.logit_scale.is_some() {
                return Err(invalid("--logit-scale only applies together with --weights"));
            }
            Ok(None)
        }
        (Some(w), Some(c)) => {
            require_file(w, "weight archive")?;
            require_file(c, "concept embeddings")?;
            let mut weights = load_weight_archive(w)?;
            if let Some(scale) = args.logit_scale {
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(invalid(format!("--logit-scale must be positive, got {scale}")));
                }
                weights.spec.logit_scale = scale;
            }
            let concepts = load_concept_embeddings(c, Some(weights.spec.d_embed))?;
            Ok(Some(LoadedModel { weights, concepts }))
        }
        _ => Err(invalid("--weights and --concepts go together")),
    }
}

pub struct Samples {
    pub manifest: Manifest,
    pub items: Vec<LabelledMaps>,
    pub model_id: String,
}

/// Sample ids are image paths relative to the manifest, so reports do not
/// depend on where the data sits.
fn relative_id(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).display().to_string()
}

pub fn load_samples(manifest_path: &Path, model: Option<&LoadedModel>) -> Result<Samples> {
    require_file(manifest_path, "manifest")?;
    let manifest = load_probe_manifest(manifest_path)?;
    if manifest.samples.is_empty() {
        return Err(invalid(format!("{} lists no samples", manifest_path.display())));
    }
    let mut items = labelled_maps(&manifest, model.map(LoadedModel::as_model))?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    for item in &mut items {
        item.id = relative_id(Path::new(&item.id), base);
    }
    let maps: Vec<_> = items.iter().map(|s| s.maps.clone()).collect();
    let model_id = common_model_id(&maps)?;
    if let Some(m) = model {
        if m.weights.spec.model_id != model_id {
            return Err(invalid(format!(
                "manifest maps come from `{model_id}`, weights are `{}`",
                m.weights.spec.model_id
            )));
        }
    }
    Ok(Samples {
        manifest,
        items,
        model_id,
    })
}

pub fn load_calibration(path: &Path, model_id: &str) -> Result<CalibrationWeights> {
    require_file(path, "calibration")?;
    let w = CalibrationWeights::load(path)?;
    chili_core::pipeline::check_model_id(&w, model_id)?;
    Ok(w)
}

pub fn default_path(explicit: &Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| dir.join(name))
}
