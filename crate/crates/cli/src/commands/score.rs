use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use chili_core::disentangle::split_scored;
use chili_core::io::{Manifest, ProbeSample};
use chili_core::ScoreSplit;
use serde::Serialize;

use crate::args::ScoreArgs;
use crate::inputs::{load_calibration, load_model, load_samples, Samples};
use crate::report::{write_file, Report};

#[derive(Serialize)]
#[serde(untagged)]
enum Scores {
    Split(ScoreSplit),
    Raw {
        #[serde(rename = "S")]
        s: f64,
    },
}

#[derive(Serialize)]
struct Row {
    id: String,
    class: Option<String>,
    concept: String,
    present: bool,
    scores: BTreeMap<String, Scores>,
}

pub fn run(args: &ScoreArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let samples = load_samples(&args.manifest, model.as_ref())?;
    let calibration = args
        .calibration
        .as_deref()
        .map(|p| load_calibration(p, &samples.model_id))
        .transpose()?;

    let mut rows = Vec::with_capacity(samples.items.len());
    for s in &samples.items {
        let mut scores = BTreeMap::new();
        for sm in &s.maps.maps {
            let entry = match &calibration {
                Some(w) => Scores::Split(split_scored(sm, w)?.2),
                None => Scores::Raw { s: sm.s },
            };
            scores.insert(sm.concept.clone(), entry);
        }
        rows.push(Row {
            id: s.id.clone(),
            class: s.class.clone(),
            concept: s.concept.clone(),
            present: s.present,
            scores,
        });
    }

    println!("{:<32} {:<12} {:>12} {:>12} {:>12} {:>12}", "sample", "concept", "S", "S_object", "S_context", "S_register");
    for r in &rows {
        let (s, rest) = match &r.scores[&r.concept] {
            Scores::Split(sp) => (sp.s, format!("{:>12.4} {:>12.4} {:>12.4}", sp.s_object, sp.s_context, sp.s_register)),
            Scores::Raw { s } => (*s, String::new()),
        };
        println!("{:<32} {:<12} {:>12.4} {rest}", r.id, r.concept, s);
    }

    if let Some(dir) = &args.save_maps {
        save_maps(dir, &samples)?;
        println!("maps written under {}", dir.display());
    }
    let path = Report::new("score", Some(&samples.model_id), args, rows).emit(&args.output.out_dir)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Writes `maps/NNNN.json` per sample and a `manifest.json` that lists them
/// in place of the images.
fn save_maps(dir: &Path, samples: &Samples) -> Result<()> {
    let mut listed = Vec::with_capacity(samples.items.len());
    for (i, (item, sample)) in samples.items.iter().zip(&samples.manifest.samples).enumerate() {
        let rel = PathBuf::from("maps").join(format!("{i:04}.json"));
        write_file(&dir.join(&rel), item.maps.to_json())?;
        let mask = sample.mask.as_ref().map(|m| std::fs::canonicalize(m).unwrap_or_else(|_| m.clone()));
        listed.push(ProbeSample {
            image: rel,
            mask,
            ..sample.clone()
        });
    }
    let manifest = Manifest {
        grid: samples.manifest.grid,
        samples: listed,
    };
    write_file(&dir.join("manifest.json"), manifest.to_json())
}
