use anyhow::Result;
use chili_core::disentangle::component_score;
use chili_core::eval::triplet::mean_failure_rate;
use chili_core::eval::{draw_repetitions, run_triplet, TripletResult, TripletScenario};
use chili_core::pipeline::LabelledMaps;
use chili_core::CalibrationWeights;
use serde::Serialize;

use crate::args::TripletArgs;
use crate::inputs::{invalid, load_calibration, load_model, load_samples};
use crate::report::Report;

#[derive(Serialize)]
struct Results {
    scenarios: Vec<TripletResult>,
    mean_failure_rate: Option<f64>,
}

fn parse_scenario(text: &str, args: &TripletArgs) -> Result<TripletScenario> {
    let parts: Vec<&str> = text.split(':').collect();
    let [c1, c2, k] = parts[..] else {
        return Err(invalid(format!("scenario `{text}` is not C1:C2:K")));
    };
    let s = TripletScenario {
        c1: c1.into(),
        c2: c2.into(),
        k: k.into(),
        samples: args.samples,
        repetitions: args.repetitions,
    };
    s.validate()?;
    Ok(s)
}

/// Scores of concept `k` on the k-present `c1`, k-absent `c1` and `c2` images.
fn pools(
    items: &[LabelledMaps],
    s: &TripletScenario,
    weights: Option<&CalibrationWeights>,
    args: &TripletArgs,
) -> Result<[Vec<f64>; 3]> {
    let mut pools: [Vec<f64>; 3] = Default::default();
    for item in items {
        let class = item.class.as_deref();
        let slot = if class == Some(&s.c1) && item.concept == s.k {
            if item.present { 0 } else { 1 }
        } else if class == Some(&s.c2) {
            2
        } else {
            continue;
        };
        pools[slot].push(component_score(item.maps.require(&s.k)?, weights, args.component)?);
    }
    Ok(pools)
}

pub fn run(args: &TripletArgs) -> Result<()> {
    let scenarios: Vec<TripletScenario> =
        args.scenario.iter().map(|t| parse_scenario(t, args)).collect::<Result<_>>()?;
    let model = load_model(&args.model)?;
    let samples = load_samples(&args.manifest, model.as_ref())?;
    let weights = match &args.calibration {
        Some(p) => Some(load_calibration(p, &samples.model_id)?),
        None if args.component.needs_calibration() => {
            return Err(invalid(format!("{} needs --calibration", args.component)));
        }
        None => None,
    };
    let mut results = Vec::with_capacity(scenarios.len());
    for (i, s) in scenarios.iter().enumerate() {
        let [a, b, c] = pools(&samples.items, s, weights.as_ref(), args)?;
        let reps = draw_repetitions(s, [&a, &b, &c], args.seed.wrapping_add(i as u64))?;
        results.push(run_triplet(s, &reps)?);
    }

    println!(
        "{:<24} {:>18} {:>18} {:>18} {:>10}",
        "scenario", "k in c1", "k not in c1", "c2", "fail rate"
    );
    for r in &results {
        let cell = |j: usize| format!("{:.3} ± {:.3}", r.means[j], r.stds[j]);
        println!(
            "{:<24} {:>18} {:>18} {:>18} {:>10.2}",
            format!("{} / {} / {}", r.scenario.c1, r.scenario.c2, r.scenario.k),
            cell(0),
            cell(1),
            cell(2),
            r.failure_rate
        );
    }
    let mean = mean_failure_rate(&results);
    if let Some(m) = mean {
        println!("mean failure rate {m:.3}");
    }
    let report = Results {
        scenarios: results,
        mean_failure_rate: mean,
    };
    let path = Report::new("triplet", Some(&samples.model_id), args, report).emit(&args.output.out_dir)?;
    println!("wrote {}", path.display());
    Ok(())
}
