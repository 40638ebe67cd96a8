use anyhow::Result;
use chili_core::cbm::{matrix_from_maps, TrainReport};
use chili_core::{accuracy, train, CalibrationWeights, Component, ConceptMatrix, Hyper};
use serde::Serialize;

use crate::args::CbmTrainArgs;
use crate::inputs::{default_path, guard_output, invalid, load_calibration, load_model, load_samples, LoadedModel, Samples};
use crate::report::{table, write_file, Report};

#[derive(Serialize)]
struct Split {
    rows: usize,
    accuracy: f64,
}

#[derive(Serialize)]
struct Results {
    model_file: String,
    classes: Vec<String>,
    concepts: Vec<String>,
    train: Split,
    test: Option<Split>,
    initial_loss: f64,
    final_loss: f64,
    final_learning_rate: f64,
}

/// Concept columns: the embedding set when images are encoded, otherwise the
/// concepts of the first sample's maps.
pub fn concept_names(model: Option<&LoadedModel>, samples: &Samples) -> Vec<String> {
    match model {
        Some(m) => m.concepts.names().map(String::from).collect(),
        None => samples.items[0].maps.maps.iter().map(|m| m.concept.clone()).collect(),
    }
}

pub fn concept_matrix(
    samples: &Samples,
    concepts: &[String],
    weights: Option<&CalibrationWeights>,
    component: Component,
) -> Result<ConceptMatrix> {
    let labels = samples
        .items
        .iter()
        .map(|s| s.class.clone().ok_or_else(|| invalid(format!("{} has no class", s.id))))
        .collect::<Result<Vec<_>>>()?;
    let maps: Vec<_> = samples.items.iter().map(|s| s.maps.clone()).collect();
    Ok(matrix_from_maps(&maps, concepts, weights, component, &labels)?)
}

pub fn run(args: &CbmTrainArgs) -> Result<()> {
    let hyper = Hyper {
        l2: args.l2,
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        standardize: args.standardize,
    };
    let model_out = default_path(&args.model_out, &args.output.out_dir, "cbm_model.json");
    let mut inputs = vec![args.manifest.as_path()];
    inputs.extend(args.test_manifest.as_deref());
    guard_output(&model_out, &inputs)?;

    let model = load_model(&args.model)?;
    let train_set = load_samples(&args.manifest, model.as_ref())?;
    let weights = match &args.calibration {
        Some(p) => Some(load_calibration(p, &train_set.model_id)?),
        None if args.component.needs_calibration() => {
            return Err(invalid(format!("{} scores need --calibration", args.component)));
        }
        None => None,
    };
    let concepts = concept_names(model.as_ref(), &train_set);
    let matrix = concept_matrix(&train_set, &concepts, weights.as_ref(), args.component)?;
    let (cbm, TrainReport { losses, final_learning_rate }) = train(&matrix, &hyper)?;
    write_file(&model_out, cbm.to_json())?;

    let train_split = Split {
        rows: matrix.rows(),
        accuracy: accuracy(&cbm, &matrix)?,
    };
    let test_split = match &args.test_manifest {
        Some(p) => {
            let test_set = load_samples(p, model.as_ref())?;
            if test_set.model_id != train_set.model_id {
                return Err(invalid(format!(
                    "test data comes from `{}`, training data from `{}`",
                    test_set.model_id, train_set.model_id
                )));
            }
            let m = concept_matrix(&test_set, &concepts, weights.as_ref(), args.component)?;
            Some(Split {
                rows: m.rows(),
                accuracy: accuracy(&cbm, &m)?,
            })
        }
        None => None,
    };

    let mut rows = vec![
        ("component".to_string(), args.component.to_string()),
        ("train accuracy".into(), format!("{:.4} ({} rows)", train_split.accuracy, train_split.rows)),
    ];
    if let Some(t) = &test_split {
        rows.push(("test accuracy".into(), format!("{:.4} ({} rows)", t.accuracy, t.rows)));
    }
    rows.push(("loss".into(), format!("{:.6} -> {:.6}", losses[0], losses[losses.len() - 1])));
    rows.push(("final learning rate".into(), format!("{final_learning_rate:e}")));
    table("concept bottleneck", &rows);

    let results = Results {
        model_file: model_out.display().to_string(),
        classes: cbm.classes.clone(),
        concepts,
        train: train_split,
        test: test_split,
        initial_loss: losses[0],
        final_loss: losses[losses.len() - 1],
        final_learning_rate,
    };
    let path = Report::new("cbm-train", Some(&train_set.model_id), args, results).emit(&args.output.out_dir)?;
    println!("wrote {} and {}", model_out.display(), path.display());
    Ok(())
}
