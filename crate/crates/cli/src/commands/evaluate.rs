use std::collections::BTreeMap;

use anyhow::Result;
use chili_core::eval::{detection, segmentation};
use chili_core::Component;
use serde::Serialize;

use crate::args::{DetectArgs, SegmentArgs};
use crate::inputs::{load_calibration, load_model, load_samples};
use crate::report::{table, Report};

#[derive(Serialize)]
struct DetectResults {
    class: Option<String>,
    positives: usize,
    negatives: usize,
    auroc: BTreeMap<Component, f64>,
}

pub fn detect(args: &DetectArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let samples = load_samples(&args.manifest, model.as_ref())?;
    let weights = load_calibration(&args.calibration, &samples.model_id)?;
    let det = detection(&samples.items, &weights, args.class.as_deref())?;
    let wanted: Vec<Component> = if args.component.is_empty() {
        Component::ALL.to_vec()
    } else {
        args.component.clone()
    };
    let auroc: BTreeMap<Component, f64> = det
        .auroc
        .iter()
        .filter(|(c, _)| wanted.contains(c))
        .map(|(&c, &v)| (c, v))
        .collect();
    let rows: Vec<(String, String)> = auroc.iter().map(|(c, v)| (c.to_string(), format!("{v:.4}"))).collect();
    table(
        &format!("AUROC ({} present, {} absent)", det.positives, det.negatives),
        &rows,
    );
    let results = DetectResults {
        class: args.class.clone(),
        positives: det.positives,
        negatives: det.negatives,
        auroc,
    };
    let path = Report::new("detect", Some(&samples.model_id), args, results).emit(&args.output.out_dir)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn segment(args: &SegmentArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let samples = load_samples(&args.manifest, model.as_ref())?;
    let weights = load_calibration(&args.calibration, &samples.model_id)?;
    let seg = segmentation(&samples.items, &weights)?;
    println!("segmentation over {} images", seg.images);
    println!("  {:<8} {:>9} {:>9} {:>9}", "map", "pixel_acc", "mIoU", "mAP");
    for (name, r) in [("object", seg.object), ("raw", seg.raw)] {
        println!("  {name:<8} {:>9.4} {:>9.4} {:>9.4}", r.pixel_acc, r.miou, r.map);
    }
    let path = Report::new("segment", Some(&samples.model_id), args, seg).emit(&args.output.out_dir)?;
    println!("wrote {}", path.display());
    Ok(())
}
