//! Calibration, detection, segmentation and CBM runs on generated fixtures.

use std::time::{Duration, Instant};

use chili_core::cbm::{accuracy, matrix_from_maps, train, Hyper};
use chili_core::disentangle::DEFAULT_ALPHA;
use chili_core::eval::{
    calibrate_labelled, detection, generate_cbm_fixture, generate_fixture, segmentation, FixtureSpec,
};
use chili_core::{CalibrationWeights, Component, ImageMaps};

const SEEDS: std::ops::Range<u64> = 0..20;

fn head_weights(spec: &FixtureSpec, w: &CalibrationWeights) -> (Vec<f64>, Vec<f64>) {
    let (mut object, mut context) = (Vec::new(), Vec::new());
    for l in 0..spec.layers {
        for h in 0..spec.heads {
            if spec.is_object_head(l, h) {
                object.push(w.get(l, h));
            } else {
                context.push(w.get(l, h));
            }
        }
    }
    (object, context)
}

#[test]
fn calibration_and_detection_over_twenty_seeds() {
    let start = Instant::now();
    let spec = FixtureSpec::default();
    for seed in SEEDS {
        let fx = generate_fixture(seed, &spec).unwrap();
        let w = calibrate_labelled(&fx.probe, DEFAULT_ALPHA).unwrap();
        let (object, context) = head_weights(&spec, &w);
        let lowest_object = object.iter().copied().fold(f64::INFINITY, f64::min);
        let highest_context = context.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(
            lowest_object > highest_context,
            "seed {seed}: object {object:?} vs context {context:?}"
        );

        let det = detection(&fx.eval, &w, Some("c1")).unwrap();
        let (obj, raw, ctx) = (
            det.get(Component::Object).unwrap(),
            det.get(Component::S).unwrap(),
            det.get(Component::Context).unwrap(),
        );
        assert!(obj - raw >= 0.05, "seed {seed}: S_object {obj} vs S {raw}");
        assert!(obj > ctx, "seed {seed}: S_object {obj} vs S_context {ctx}");
    }
    assert!(start.elapsed() < Duration::from_secs(60), "took {:?}", start.elapsed());
}

#[test]
fn object_map_segments_at_least_as_well_as_raw_map() {
    let spec = FixtureSpec::default();
    for seed in SEEDS {
        let fx = generate_fixture(seed, &spec).unwrap();
        let w = calibrate_labelled(&fx.probe, DEFAULT_ALPHA).unwrap();
        let seg = segmentation(&fx.eval, &w).unwrap();
        assert_eq!(seg.images, spec.eval_samples);
        assert!(
            seg.object.miou >= seg.raw.miou,
            "seed {seed}: object {:?} vs raw {:?}",
            seg.object,
            seg.raw
        );
    }
}

#[test]
fn object_heads_peak_inside_the_mask() {
    let spec = FixtureSpec::default();
    let fx = generate_fixture(3, &spec).unwrap();
    let mask = &spec.planted_mask;
    for s in fx.eval.iter().filter(|s| s.present) {
        let maps = s.maps.head_maps(&s.concept).unwrap();
        for &(l, h) in &spec.object_heads {
            let (mut inside, mut outside) = ((0.0, 0), (0.0, 0));
            for (v, m) in maps.map(l, h).values().iter().zip(mask.values()) {
                let acc = if *m != 0.0 { &mut inside } else { &mut outside };
                acc.0 += v;
                acc.1 += 1;
            }
            assert!(inside.0 / inside.1 as f64 > outside.0 / outside.1 as f64, "{}", s.id);
        }
    }
}

#[test]
fn fixtures_are_deterministic() {
    let spec = FixtureSpec::default();
    let a = generate_fixture(9, &spec).unwrap();
    let b = generate_fixture(9, &spec).unwrap();
    assert_eq!(a, b);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    a.write(da.path()).unwrap();
    b.write(db.path()).unwrap();
    for name in ["probe.json", "eval.json", "fixture.json", "maps/eval-present-000.json", "masks/probe-000.pgm"] {
        let x = std::fs::read(da.path().join(name)).unwrap();
        let y = std::fs::read(db.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    assert_ne!(generate_fixture(10, &spec).unwrap().eval, a.eval);
}

fn labels(maps: &[chili_core::pipeline::LabelledMaps]) -> Vec<String> {
    maps.iter().map(|s| s.class.clone().unwrap()).collect()
}

#[test]
fn object_scores_classify_better_under_adversarial_context() {
    let spec = FixtureSpec::default();
    for seed in 0..5 {
        let fx = generate_cbm_fixture(seed, &spec).unwrap();
        let w = calibrate_labelled(&fx.probe, DEFAULT_ALPHA).unwrap();
        let (train_set, test_set) = fx.eval.split_at(fx.eval.len() / 2);
        let run = |component: Component| {
            let maps = |s: &[chili_core::pipeline::LabelledMaps]| -> Vec<ImageMaps> {
                s.iter().map(|x| x.maps.clone()).collect()
            };
            let tr = matrix_from_maps(&maps(train_set), &fx.concepts, Some(&w), component, &labels(train_set)).unwrap();
            let te = matrix_from_maps(&maps(test_set), &fx.concepts, Some(&w), component, &labels(test_set)).unwrap();
            let (model, _) = train(&tr, &Hyper::default()).unwrap();
            accuracy(&model, &te).unwrap()
        };
        let (object, raw) = (run(Component::Object), run(Component::S));
        assert!(object >= raw, "seed {seed}: S_object {object} vs S {raw}");
        assert_eq!(object, 1.0, "seed {seed}");
    }
}
