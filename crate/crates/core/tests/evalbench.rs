use std::sync::Arc;

use image::RgbImage;
use polyrnn::annotsim::{instance_mask, Threshold};
use polyrnn::data::{synth_shapes, InstanceRecord, SynthConfig};
use polyrnn::evalbench::{
    class_means, evaluate, mean_iou, per_instance_csv, report_json, size_buckets_csv, squarebox,
    write_report, EvalOptions, MEAN_CONVENTION,
};
use polyrnn::model::{ModelConfig, Models};
use polyrnn::polygeom::{iou, rasterize, BBox, Polygon};
use polyrnn::Exec;
use proptest::prelude::*;

fn record(poly: Polygon) -> InstanceRecord {
    InstanceRecord::new("img", Arc::new(RgbImage::new(200, 200)), "thing", vec![poly]).unwrap()
}

#[test]
fn squarebox_examples() {
    let square = record(BBox::new(10.0, 10.0, 110.0, 110.0).unwrap().to_polygon());
    let sb = squarebox(&square);
    let expect = rasterize(&BBox::new(20.0, 20.0, 100.0, 100.0).unwrap().to_polygon(), 200, 200);
    assert_eq!(sb, expect);
    assert_eq!(sb.count(), 6400);
    assert_eq!(iou(&sb, &instance_mask(&square)).unwrap(), 0.64);
}

#[test]
fn squarebox_of_box_sized_ground_truth_is_exact() {
    let full = BBox::new(10.0, 10.0, 110.0, 110.0).unwrap();
    let gt = BBox::new(20.0, 20.0, 100.0, 100.0).unwrap();
    let rec = record(full.to_polygon());
    assert_eq!(iou(&squarebox(&rec), &rasterize(&gt.to_polygon(), 200, 200)).unwrap(), 1.0);
}

#[test]
fn mean_iou_examples() {
    let m = rasterize(&BBox::new(0.0, 0.0, 10.0, 10.0).unwrap().to_polygon(), 20, 20);
    let (ious, means) = mean_iou(&[m.clone(), m.clone()], &[m.clone(), m.clone()], &["a".into(), "b".into()]).unwrap();
    assert_eq!(ious, vec![1.0, 1.0]);
    assert_eq!(means.overall, 1.0);
    assert!(mean_iou(&[m.clone()], &[], &["a".into()]).is_err());
    let c = class_means(&[0.6, 0.8, 0.8], &["x".into(), "y".into(), "y".into()]).unwrap();
    assert!((c.overall - 0.7).abs() < 1e-15);
}

#[test]
fn baseline_report_and_files() {
    let recs = synth_shapes(3, 20, &SynthConfig::default(), Exec::Parallel);
    let opts = EvalOptions {
        dataset: "synth:3:20".into(),
        models: None,
        checkpoint_sha256: None,
        seed: Some(3),
        thresholds: vec![Threshold::Cells(1)],
    };
    let r = evaluate(&recs, &opts, Exec::Parallel).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.rows[0].method, "squarebox");
    assert!(r.annotator.is_empty());
    assert_eq!(r.metadata.mean_convention, MEAN_CONVENTION);
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &r, true).unwrap();
    for f in ["report.json", "per-instance.csv", "size-buckets.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(size_buckets_csv(&r).starts_with("min_px,max_px,n_instances"));
}

#[test]
fn model_report_is_deterministic_and_recomputes() {
    let recs = synth_shapes(5, 8, &SynthConfig::default(), Exec::Parallel);
    let m = Models::init(&ModelConfig::default(), 2).unwrap();
    let opts = EvalOptions {
        dataset: "synth:5:8".into(),
        models: Some(&m),
        checkpoint_sha256: Some("abc".into()),
        seed: Some(5),
        thresholds: vec![Threshold::Cells(1), Threshold::Cells(2)],
    };
    let a = evaluate(&recs, &opts, Exec::Parallel).unwrap();
    let b = evaluate(&recs, &opts, Exec::Sequential).unwrap();
    assert_eq!(report_json(&a).unwrap(), report_json(&b).unwrap());
    assert_eq!(per_instance_csv(&a), per_instance_csv(&b));

    let classes: Vec<String> = a.instances.iter().map(|r| r.class.clone()).collect();
    let ious: Vec<f64> = a.instances.iter().map(|r| r.iou.unwrap()).collect();
    let model = a.row("model").unwrap();
    let again = class_means(&ious, &classes).unwrap();
    assert_eq!(model.overall, again.overall);
    assert_eq!(model.per_class, again.per_class);
    for (k, row) in a.annotator.iter().enumerate() {
        let n = a.instances.len() as f64;
        let clicks = a.instances.iter().map(|r| r.annotator[k].2 as f64).sum::<f64>() / n;
        assert_eq!(row.mean_clicks, clicks);
    }
    let header = per_instance_csv(&a).lines().next().unwrap().to_string();
    assert_eq!(
        header,
        "instance_id,class,iou,squarebox_iou,quantization_ceiling,iou_T1,clicks_T1,iou_T2,clicks_T2"
    );
}

proptest! {
    #[test]
    fn squarebox_stays_inside_component_boxes(
        pts in prop::collection::vec((0.0f64..200.0, 0.0f64..200.0), 3..10),
    ) {
        let poly = Polygon::from_xy(&pts);
        prop_assume!(poly.signed_area().map(|a| a.abs() > 1.0).unwrap_or(false));
        let rec = record(poly.clone());
        let inside_box = rasterize(&poly.bounds().unwrap().to_polygon(), 200, 200);
        let sb = squarebox(&rec);
        prop_assert_eq!(sb.intersection_count(&inside_box).unwrap(), sb.count());
    }

    #[test]
    fn overall_mean_ignores_class_order(
        vals in prop::collection::vec((0.0f64..1.0, 0usize..4), 1..30),
        seed in any::<u64>(),
    ) {
        let values: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let classes: Vec<String> = vals.iter().map(|v| format!("c{}", v.1)).collect();
        let a = class_means(&values, &classes).unwrap();
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        use rand::{seq::SliceRandom, SeedableRng};
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let b = class_means(
            &idx.iter().map(|&i| values[i]).collect::<Vec<_>>(),
            &idx.iter().map(|&i| classes[i].clone()).collect::<Vec<_>>(),
        ).unwrap();
        prop_assert!((a.overall - b.overall).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.overall));
    }
}
