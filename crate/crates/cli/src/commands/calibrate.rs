use anyhow::Result;
use chili_core::eval::calibrate_labelled;
use serde::Serialize;

use crate::args::CalibrateArgs;
use crate::inputs::{default_path, guard_output, invalid, load_model, load_samples};
use crate::report::{table, write_file, Report};

#[derive(Serialize)]
struct Results {
    calibration: String,
    probe_samples: usize,
    alpha: f64,
    weights: Vec<Vec<f64>>,
}

pub fn run(args: &CalibrateArgs) -> Result<()> {
    if !(args.alpha.is_finite() && args.alpha > 0.0) {
        return Err(invalid(format!("--alpha must be positive, got {}", args.alpha)));
    }
    let out = default_path(&args.out, &args.output.out_dir, "calibration.json");
    guard_output(&out, &[&args.manifest])?;
    let model = load_model(&args.model)?;
    let samples = load_samples(&args.manifest, model.as_ref())?;
    let weights = calibrate_labelled(&samples.items, args.alpha)?;
    write_file(&out, weights.to_json())?;

    let rows: Vec<(String, String)> = (0..weights.layers)
        .flat_map(|l| (0..weights.heads).map(move |h| (l, h)))
        .map(|(l, h)| (format!("layer {l} head {h}"), format!("{:.4}", weights.get(l, h))))
        .collect();
    table(
        &format!("w per head ({} probe images, alpha {})", weights.sample_count, weights.alpha),
        &rows,
    );
    let results = Results {
        calibration: out.display().to_string(),
        probe_samples: weights.sample_count,
        alpha: weights.alpha,
        weights: weights.weights.clone(),
    };
    let path = Report::new("calibrate", Some(&samples.model_id), args, results).emit(&args.output.out_dir)?;
    println!("wrote {} and {}", out.display(), path.display());
    Ok(())
}
