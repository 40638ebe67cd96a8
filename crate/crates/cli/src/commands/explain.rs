use anyhow::{Context, Result};
use chili_core::disentangle::component_score;
use chili_core::eval::protocol::object_map;
use chili_core::explain::{explain, render_explanation, top_k, RankedConcept};
use chili_core::io::RgbImage;
use chili_core::CbmModel;
use serde::Serialize;

use crate::args::ExplainArgs;
use crate::inputs::{invalid, load_calibration, load_model, load_samples, require_file};
use crate::report::Report;

#[derive(Serialize)]
struct Row {
    id: String,
    label: Option<String>,
    predicted: String,
    logit: f64,
    background_logit: f64,
    top: Vec<RankedConcept>,
    dir: String,
}

pub fn run(args: &ExplainArgs) -> Result<()> {
    require_file(&args.cbm, "CBM model")?;
    let cbm = CbmModel::load(&args.cbm)?;
    if cbm.background.len() != cbm.concepts.len() {
        return Err(invalid(format!(
            "{} stores no training mean; retrain it with cbm-train",
            args.cbm.display()
        )));
    }
    if args.top_k == 0 || args.top_k > cbm.concepts.len() {
        return Err(invalid(format!(
            "--top-k must be between 1 and {}, got {}",
            cbm.concepts.len(),
            args.top_k
        )));
    }
    if args.cell_size == 0 {
        return Err(invalid("--cell-size must be positive"));
    }
    let model = load_model(&args.model)?;
    let samples = load_samples(&args.manifest, model.as_ref())?;
    let weights = load_calibration(&args.calibration, &samples.model_id)?;
    let (gr, gc) = weights.grid;
    let size = (gc * args.cell_size, gr * args.cell_size);

    let mut rows = Vec::with_capacity(samples.items.len());
    for (i, (item, sample)) in samples.items.iter().zip(&samples.manifest.samples).enumerate() {
        let row = cbm
            .concepts
            .iter()
            .map(|c| component_score(item.maps.require(c)?, Some(&weights), cbm.component))
            .collect::<chili_core::Result<Vec<f64>>>()?;
        let maps = cbm
            .concepts
            .iter()
            .map(|c| Ok((c.clone(), object_map(item, c, &weights)?)))
            .collect::<chili_core::Result<Vec<_>>>()?;
        let expl = explain(&cbm, &row, &cbm.background, maps)?;
        let is_maps_file = sample.image.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let image = if is_maps_file {
            None
        } else {
            Some(RgbImage::read(&sample.image).with_context(|| format!("reading {}", sample.image.display()))?)
        };
        let dir = args.output.out_dir.join("explain").join(format!("{i:04}"));
        render_explanation(&expl, image.as_ref(), size, args.top_k, &dir)?;
        rows.push(Row {
            id: item.id.clone(),
            label: item.class.clone(),
            predicted: expl.class.clone(),
            logit: expl.logit,
            background_logit: expl.background_logit,
            top: top_k(&expl.ranking, args.top_k)?,
            dir: dir.display().to_string(),
        });
    }

    for r in &rows {
        let top: Vec<String> = r.top.iter().map(|c| format!("{} {:+.3}", c.concept, c.shap)).collect();
        println!("{:<28} -> {:<10} {}", r.id, r.predicted, top.join(", "));
    }
    let path = Report::new("explain", Some(&samples.model_id), args, rows).emit(&args.output.out_dir)?;
    println!("wrote {}", path.display());
    Ok(())
}
