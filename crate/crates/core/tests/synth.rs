mod common;

use common::bx;
use tta_core::io::{
    write_dataset, CocoCategory, Dataset, DetectionFile, DetectionHeader, DetectionRecord,
};
use tta_core::pipeline::{evaluate_file, fuse_files, run_dataset};
use tta_core::synth::{generate_dataset, synthetic_detections, SyntheticDetector};
use tta_core::tta::box_to_original;
use tta_core::{
    default_view_plan, evaluate, ConfMode, DetectorAdapter, EvalParams, FusionConfig, GroundTruth,
    ImageDims, ImageRecord, NoiseModel, SynthConfig, ViewPlan, ViewSpec,
};

fn image(image_id: u64) -> ImageRecord {
    ImageRecord {
        image_id,
        dims: ImageDims::new(3840, 2160).unwrap(),
        file_name: format!("{image_id}.png"),
    }
}

/// Ten well separated 100 px objects per image, far from the borders.
fn grid_gts(image_id: u64) -> Vec<GroundTruth> {
    (0..10)
        .map(|k| {
            let x = 300.0 + 300.0 * k as f64;
            GroundTruth {
                image_id,
                bbox: bx(x, 1000.0, x + 100.0, 1100.0),
                category_id: 1,
                ignore: false,
            }
        })
        .collect()
}

fn quiet(jitter: f64, miss: f64, rho: f64) -> NoiseModel {
    NoiseModel {
        miss_rate_base: miss,
        jitter_px_at_ref: jitter,
        fp_rate: 0.0,
        view_noise_correlation: rho,
        ..NoiseModel::default()
    }
}

#[test]
fn jitter_scales_inversely_with_resolution() {
    // 2 px at 3200 seen through a 1280 view is 5 px in the original image
    let noise = quiet(2.0, 0.0, 0.5);
    let view = ViewSpec::new(1280, false).unwrap();
    let mut deviations = Vec::with_capacity(10_000);
    for id in 1..=250 {
        let img = image(id);
        let gts = grid_gts(id);
        let dets = synthetic_detections(&img, &gts, &view, &noise, &[1], 42);
        assert_eq!(dets.len(), gts.len());
        for (d, g) in dets.iter().zip(&gts) {
            let back = box_to_original(d.bbox(), &view, img.dims).unwrap();
            for (a, b) in back.to_array().into_iter().zip(g.bbox.to_array()) {
                deviations.push(a - b);
            }
        }
    }
    assert_eq!(deviations.len(), 10_000);
    let n = deviations.len() as f64;
    let mean = deviations.iter().sum::<f64>() / n;
    let sd = (deviations.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd - 5.0).abs() <= 0.25, "sample sd {sd}");
}

fn detected(
    det: &SyntheticDetector,
    view: &ViewSpec,
    ids: std::ops::RangeInclusive<u64>,
) -> Vec<bool> {
    let mut out = Vec::new();
    for id in ids {
        let img = image(id);
        let found = det.detect(&img, view).unwrap();
        let found: Vec<_> = found
            .iter()
            .map(|d| box_to_original(d.bbox(), view, img.dims).unwrap())
            .collect();
        for g in grid_gts(id) {
            out.push(found.iter().any(|b| b.iou(&g.bbox) > 0.5));
        }
    }
    out
}

fn joint_miss(rho: f64) -> (f64, f64) {
    let gts: Vec<GroundTruth> = (1..=300).flat_map(grid_gts).collect();
    let det = SyntheticDetector::new(&gts, quiet(0.0, 0.5, rho), vec![1], 9).unwrap();
    let a = detected(&det, &ViewSpec::new(3200, false).unwrap(), 1..=300);
    let b = detected(&det, &ViewSpec::new(3200, true).unwrap(), 1..=300);
    let n = a.len() as f64;
    let single = a.iter().filter(|x| !**x).count() as f64 / n;
    let both = a.iter().zip(&b).filter(|(x, y)| !**x && !**y).count() as f64 / n;
    (single, both)
}

#[test]
fn view_correlation_extremes() {
    let (single, both) = joint_miss(1.0);
    assert!((single - 0.5).abs() < 0.03, "{single}");
    assert_eq!(
        single, both,
        "fully shared noise misses the same objects in every view"
    );

    let (single, both) = joint_miss(0.0);
    assert!((single - 0.5).abs() < 0.03, "{single}");
    assert!(
        (both - 0.25).abs() < 0.03,
        "independent views miss jointly at p^2, got {both}"
    );
}

#[test]
fn fully_correlated_views_agree_on_boxes() {
    let gts = grid_gts(1);
    let noise = quiet(3.0, 0.0, 1.0);
    let img = image(1);
    let plain = ViewSpec::new(3200, false).unwrap();
    let flipped = ViewSpec::new(3200, true).unwrap();
    let a = synthetic_detections(&img, &gts, &plain, &noise, &[1], 5);
    let b = synthetic_detections(&img, &gts, &flipped, &noise, &[1], 5);
    for (x, y) in a.iter().zip(&b) {
        let xa = box_to_original(x.bbox(), &plain, img.dims).unwrap();
        let yb = box_to_original(y.bbox(), &flipped, img.dims).unwrap();
        for (p, q) in xa.to_array().into_iter().zip(yb.to_array()) {
            assert!((p - q).abs() < 1e-9);
        }
    }
}

fn bench_dataset(seed: u64) -> Dataset {
    let cfg = SynthConfig {
        rng_seed: seed,
        ..SynthConfig::default()
    };
    let (images, ground_truths) = generate_dataset(&cfg).unwrap();
    Dataset {
        images,
        ground_truths,
        categories: vec![CocoCategory {
            id: 1,
            name: "bird".into(),
        }],
    }
}

#[test]
fn single_view_ap_grows_with_resolution() {
    let dataset = bench_dataset(42);
    let det =
        SyntheticDetector::new(&dataset.ground_truths, NoiseModel::default(), vec![1], 42).unwrap();
    let ap = |size| {
        let plan = ViewPlan::single(size).unwrap();
        let (fused, _) =
            run_dataset(&dataset, &plan, &det, &FusionConfig::default(), false).unwrap();
        evaluate(
            &fused.predictions().unwrap(),
            &dataset.ground_truths,
            &EvalParams::default(),
        )
        .unwrap()
        .ap50
    };
    let (a, b, c) = (ap(1280), ap(2560), ap(3200));
    assert!(a < b && b < c, "{a} {b} {c}");
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (p, q) = (dir.path().join("a.json"), dir.path().join("b.json"));
    write_dataset(&p, &bench_dataset(7)).unwrap();
    write_dataset(&q, &bench_dataset(7)).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    write_dataset(&q, &bench_dataset(8)).unwrap();
    assert_ne!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn generated_objects_respect_bounds() {
    let cfg = SynthConfig {
        n_images: 100,
        objects_per_image: [1, 5],
        ..SynthConfig::default()
    };
    let (images, gts) = generate_dataset(&cfg).unwrap();
    assert_eq!(images.len(), 100);
    assert!((100..=500).contains(&gts.len()));
    let [lo, hi] = cfg.object_size_px;
    for g in &gts {
        assert!(g.bbox.x1() >= 0.0 && g.bbox.y1() >= 0.0);
        assert!(g.bbox.x2() <= 3840.0 && g.bbox.y2() <= 2160.0);
        assert!(g.bbox.width() >= lo - 1e-9 && g.bbox.width() <= hi + 1e-9);
    }
}

#[test]
fn fusing_six_views_beats_every_single_file() {
    let dataset = bench_dataset(42);
    let det =
        SyntheticDetector::new(&dataset.ground_truths, NoiseModel::default(), vec![1], 42).unwrap();
    let files: Vec<DetectionFile> = default_view_plan()
        .views()
        .iter()
        .map(|view| DetectionFile {
            header: DetectionHeader::for_view(*view),
            records: dataset
                .images
                .iter()
                .flat_map(|img| {
                    det.detect(img, view)
                        .unwrap()
                        .into_iter()
                        .map(|d| DetectionRecord::from_detection(img.image_id, &d))
                })
                .collect(),
        })
        .collect();
    let params = EvalParams::default();
    let (merged, _) = fuse_files(&files, &dataset, &FusionConfig::default()).unwrap();
    let merged_ap = evaluate_file(&merged, &dataset, &params).unwrap().ap50;
    let single = FusionConfig {
        conf_mode: ConfMode::None,
        ..FusionConfig::default()
    };
    for f in &files {
        let (mapped, _) = fuse_files(std::slice::from_ref(f), &dataset, &single).unwrap();
        let ap = evaluate_file(&mapped, &dataset, &params).unwrap().ap50;
        assert!(merged_ap > ap, "merged {merged_ap} vs {ap}");
    }
}
