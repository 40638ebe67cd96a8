//! End-to-end checks on random tiny encoders and generated fixtures.
//!
//! The report lists every check with the numbers it was decided on. It has
//! no timings or absolute paths, so repeated runs write identical bytes.

use std::collections::BTreeMap;

use anyhow::Result;
use chili_core::cbm::matrix_from_maps;
use chili_core::disentangle::{decompose_maps, iou_weight, score_split, DEFAULT_ALPHA};
use chili_core::eval::{
    auroc, average_precision, calibrate_labelled, detection, generate_cbm_fixture, generate_fixture, mean_iou,
    pixel_accuracy, run_triplet, segmentation, FixtureSpec, Repetition, TripletScenario,
};
use chili_core::explain::{shap_linear, shap_permutation};
use chili_core::pipeline::LabelledMaps;
use chili_core::synth::{random_archive, random_image, random_unit_vector, TinyModelConfig};
use chili_core::vit::{decompose, direct_score, encode_image, score_concept, spatial_maps};
use chili_core::{accuracy, predict, train, CalibrationWeights, Component, GridMap, Hyper, ImageMaps};
use serde::Serialize;

use crate::args::SelftestArgs;
use crate::inputs::load_samples;
use crate::report::Report;

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    pass: bool,
    detail: BTreeMap<&'static str, f64>,
}

#[derive(Serialize)]
struct Results {
    passed: usize,
    failed: usize,
    checks: Vec<Check>,
}

fn check(name: &'static str, pass: bool, detail: &[(&'static str, f64)]) -> Check {
    Check {
        name,
        pass,
        detail: detail.iter().copied().collect(),
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Weights spread over `[0, cap)` without a random source.
fn spread_weights(layers: usize, heads: usize, grid: (usize, usize)) -> CalibrationWeights {
    let cap = 1.0 - (-DEFAULT_ALPHA).exp();
    let mut w = CalibrationWeights::uniform("selftest", layers, heads, grid, 0.0);
    let n = (layers * heads) as f64;
    for l in 0..layers {
        for h in 0..heads {
            w.weights[l][h] = cap * (l * heads + h) as f64 / n;
        }
    }
    w
}

fn decomposition_checks(models: u64) -> Result<Vec<Check>> {
    let (mut worst_identity, mut worst_maps, mut worst_split) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..models {
        let cfg = TinyModelConfig::sample(seed);
        let w = random_archive(seed, &cfg);
        let img = random_image(seed + 7, cfg.image_size());
        let t = random_unit_vector(seed + 13, cfg.d_embed);
        let (emb, rec) = encode_image(&w, &img)?;
        let sm = score_concept(&decompose(&w, &rec)?, "t", &t, w.spec.logit_scale)?;
        let s = direct_score(&emb, &t, w.spec.logit_scale);
        let scale = s.abs().max(1.0);
        worst_identity = worst_identity.max((s - sm.s).abs() / scale);

        let grid = (cfg.grid_side, cfg.grid_side);
        let maps = spatial_maps(&sm, grid)?;
        let splits = decompose_maps(&maps, &spread_weights(cfg.layers, cfg.heads, grid))?;
        for (i, raw) in maps.maps.iter().enumerate() {
            for (j, &v) in raw.values().iter().enumerate() {
                let parts = splits.register[i].values()[j] + splits.object[i].values()[j] + splits.context[i].values()[j];
                worst_maps = worst_maps.max((parts - v).abs());
            }
        }
        worst_split = worst_split.max((score_split(&sm, &splits)?.recombined() - s).abs() / scale);
    }
    Ok(vec![
        check(
            "reconstruction_identity",
            worst_identity <= 1e-4,
            &[("models", models as f64), ("max_relative_error", worst_identity)],
        ),
        check(
            "split_conservation",
            worst_maps <= 1e-6 && worst_split <= 1e-4,
            &[("max_map_error", worst_maps), ("max_relative_score_error", worst_split)],
        ),
    ])
}

fn closed_form_checks() -> Vec<Check> {
    let (w1, w_half, w0) = (iou_weight(1.0, 3.0), iou_weight(0.5, 3.0), iou_weight(0.0, 3.0));
    let alphas: Vec<f64> = (1..=10).map(|a| a as f64 * 0.5).collect();
    let monotone = alphas.windows(2).all(|p| iou_weight(0.5, p[1]) > iou_weight(0.5, p[0]));
    let calib = check(
        "calibration_closed_form",
        w0 == 0.0 && close(w1, 0.950213, 1e-6) && close(w_half, 0.776870, 1e-6) && monotone,
        &[("w_iou_1", w1), ("w_iou_half", w_half), ("w_iou_0", w0)],
    );

    let g = |v: &[f64]| GridMap::new(1, v.len(), v.to_vec()).expect("valid grid");
    let sq = |v: &[f64]| GridMap::new(2, 2, v.to_vec()).expect("valid grid");
    let a = [
        auroc(&[0.9, 0.8], &[0.1, 0.2]),
        auroc(&[0.5], &[0.5]),
        auroc(&[0.9, 0.2], &[0.5]),
    ]
    .map(|r| r.unwrap_or(f64::NAN));
    let ap = average_precision(&g(&[0.9, 0.8, 0.1]), &g(&[1.0, 0.0, 1.0])).unwrap_or(f64::NAN);
    let pa = pixel_accuracy(&sq(&[1.0, 0.0, 0.0, 1.0]), &sq(&[1.0, 0.0, 0.0, 0.0])).unwrap_or(f64::NAN);
    let miou = mean_iou(&sq(&[1.0; 4]), &sq(&[1.0, 1.0, 0.0, 0.0])).unwrap_or(f64::NAN);
    let metrics = check(
        "metric_examples",
        a == [1.0, 0.5, 0.5] && close(ap, (1.0 + 2.0 / 3.0) / 2.0, 1e-12) && pa == 0.75 && miou == 0.25,
        &[("ap", ap), ("pixel_accuracy", pa), ("miou", miou)],
    );

    let scenario = TripletScenario {
        c1: "c1".into(),
        c2: "c2".into(),
        k: "k".into(),
        samples: 2,
        repetitions: 10,
    };
    let rep = |swap: bool| Repetition {
        present: if swap { vec![0.0, 0.2] } else { vec![1.0, 0.8] },
        absent: if swap { vec![1.0, 0.8] } else { vec![0.0, 0.2] },
        other: vec![0.5, 0.5],
    };
    let rates: Vec<f64> = [0, 4, 10]
        .iter()
        .map(|&swapped| {
            let reps: Vec<Repetition> = (0..10).map(|i| rep(i < swapped)).collect();
            run_triplet(&scenario, &reps).map_or(f64::NAN, |r| r.failure_rate)
        })
        .collect();
    let triplet = check(
        "triplet_failure_rates",
        rates == [0.0, 0.4, 1.0],
        &[("none", rates[0]), ("four", rates[1]), ("all", rates[2])],
    );
    vec![calib, metrics, triplet]
}

struct FixtureOutcome {
    ordered: bool,
    auroc_gap: f64,
    auroc_object: f64,
    auroc_context: f64,
    miou_gap: f64,
}

fn fixture_outcome(items_probe: &[LabelledMaps], items_eval: &[LabelledMaps], spec: &FixtureSpec) -> Result<FixtureOutcome> {
    let w = calibrate_labelled(items_probe, DEFAULT_ALPHA)?;
    let mut lowest_object = f64::INFINITY;
    let mut highest_context = f64::NEG_INFINITY;
    for l in 0..spec.layers {
        for h in 0..spec.heads {
            if spec.is_object_head(l, h) {
                lowest_object = lowest_object.min(w.get(l, h));
            } else {
                highest_context = highest_context.max(w.get(l, h));
            }
        }
    }
    let det = detection(items_eval, &w, Some("c1"))?;
    let seg = segmentation(items_eval, &w)?;
    let get = |c| det.get(c).unwrap_or(f64::NAN);
    Ok(FixtureOutcome {
        ordered: lowest_object > highest_context,
        auroc_gap: get(Component::Object) - get(Component::S),
        auroc_object: get(Component::Object),
        auroc_context: get(Component::Context),
        miou_gap: seg.object.miou - seg.raw.miou,
    })
}

fn fixture_checks(seeds: u64) -> Result<Vec<Check>> {
    let spec = FixtureSpec::default();
    let outcomes: Vec<FixtureOutcome> = (0..seeds)
        .map(|seed| {
            let fx = generate_fixture(seed, &spec)?;
            fixture_outcome(&fx.probe, &fx.eval, &spec)
        })
        .collect::<Result<_>>()?;
    let min = |f: &dyn Fn(&FixtureOutcome) -> f64| outcomes.iter().map(f).fold(f64::INFINITY, f64::min);
    let ordered = outcomes.iter().filter(|o| o.ordered).count();
    let min_gap = min(&|o| o.auroc_gap);
    let min_obj_minus_ctx = min(&|o| o.auroc_object - o.auroc_context);
    let min_miou_gap = min(&|o| o.miou_gap);
    Ok(vec![
        check(
            "fixture_head_ordering",
            ordered as u64 == seeds,
            &[("seeds", seeds as f64), ("ordered", ordered as f64)],
        ),
        check(
            "fixture_detection",
            min_gap >= 0.05 && min_obj_minus_ctx > 0.0,
            &[("min_auroc_gain_over_S", min_gap), ("min_auroc_gain_over_context", min_obj_minus_ctx)],
        ),
        check(
            "fixture_segmentation",
            min_miou_gap >= 0.0,
            &[("min_miou_gain_over_raw", min_miou_gap)],
        ),
    ])
}

/// Writes a fixture, reads it back through manifests and compares with the
/// in-memory run.
fn file_round_trip(args: &SelftestArgs) -> Result<Check> {
    let spec = FixtureSpec::default();
    let fx = generate_fixture(args.seed, &spec)?;
    let dir = args.out_dir.join("fixture");
    fx.write(&dir)?;
    let probe = load_samples(&dir.join("probe.json"), None)?;
    let eval = load_samples(&dir.join("eval.json"), None)?;
    let from_disk = fixture_outcome(&probe.items, &eval.items, &spec)?;
    let in_memory = fixture_outcome(&fx.probe, &fx.eval, &spec)?;
    let same = from_disk.auroc_gap == in_memory.auroc_gap && from_disk.miou_gap == in_memory.miou_gap;
    Ok(check(
        "fixture_files",
        same && probe.model_id == fx.model_id,
        &[("auroc_gain_over_S", from_disk.auroc_gap), ("miou_gain_over_raw", from_disk.miou_gap)],
    ))
}

fn cbm_checks(seed: u64) -> Result<Vec<Check>> {
    let spec = FixtureSpec::default();
    let fx = generate_cbm_fixture(seed, &spec)?;
    let w = calibrate_labelled(&fx.probe, DEFAULT_ALPHA)?;
    let (tr, te) = fx.eval.split_at(fx.eval.len() / 2);
    let labels = |s: &[LabelledMaps]| -> Vec<String> { s.iter().map(|x| x.class.clone().unwrap_or_default()).collect() };
    let maps = |s: &[LabelledMaps]| -> Vec<ImageMaps> { s.iter().map(|x| x.maps.clone()).collect() };
    let mut acc = BTreeMap::new();
    let mut monotone = true;
    let mut prob_error = 0.0f64;
    for c in [Component::S, Component::Object] {
        let train_m = matrix_from_maps(&maps(tr), &fx.concepts, Some(&w), c, &labels(tr))?;
        let test_m = matrix_from_maps(&maps(te), &fx.concepts, Some(&w), c, &labels(te))?;
        let (model, report) = train(&train_m, &Hyper::default())?;
        monotone &= report.losses.windows(2).all(|p| p[1] <= p[0]);
        for i in 0..test_m.rows() {
            let p = predict(&model, test_m.row(i))?;
            prob_error = prob_error.max((p.probabilities.iter().sum::<f64>() - 1.0).abs());
        }
        acc.insert(c, accuracy(&model, &test_m)?);
    }
    let (obj, raw) = (acc[&Component::Object], acc[&Component::S]);
    Ok(vec![check(
        "cbm_adversarial_context",
        obj >= raw && monotone && prob_error <= 1e-6,
        &[("accuracy_S_object", obj), ("accuracy_S", raw), ("max_probability_error", prob_error)],
    )])
}

fn shapley_check() -> Result<Check> {
    let model = chili_core::CbmModel {
        classes: vec!["a".into(), "b".into()],
        concepts: vec!["x".into(), "y".into(), "z".into()],
        weights: vec![vec![2.0, 3.0, -1.0], vec![-0.5, 0.25, 1.5]],
        bias: vec![0.1, -0.2],
        component: Component::S,
        hyper: Hyper::default(),
        scaling: None,
        background: vec![0.0; 3],
    };
    let (row, bg) = ([1.0, 1.0, 0.5], [0.0, 0.0, 0.5]);
    let phi = shap_linear(&model, 0, &row, &bg)?;
    let gap = model.logits(&row)?[0] - model.logits(&bg)?[0];
    let efficiency = (phi.iter().sum::<f64>() - gap).abs();
    let f = |x: &[f64]| model.logits(x).map_or(f64::NAN, |z| z[0]);
    let est = shap_permutation(f, &row, &bg, 200, 0)?;
    let sampled = est.values.iter().zip(&phi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(check(
        "shapley",
        efficiency <= 1e-6 && phi == [2.0, 3.0, 0.0] && sampled <= 1e-9,
        &[("efficiency_error", efficiency), ("max_sampled_error", sampled)],
    ))
}

pub fn run(args: &SelftestArgs) -> Result<bool> {
    let mut checks = decomposition_checks(20)?;
    checks.extend(closed_form_checks());
    checks.extend(fixture_checks(args.sweep)?);
    checks.push(file_round_trip(args)?);
    checks.extend(cbm_checks(args.seed)?);
    checks.push(shapley_check()?);

    for c in &checks {
        let detail: Vec<String> = c.detail.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
        println!("{} {:<26} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, detail.join(" "));
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    let results = Results {
        passed: checks.len() - failed,
        failed,
        checks,
    };
    let path = Report::new("selftest", None, args, results).emit(&args.out_dir)?;
    println!("{} checks failed; wrote {}", failed, path.display());
    Ok(failed == 0)
}
