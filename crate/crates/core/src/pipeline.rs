//! Dataset-level drivers: fusing detection files, running TTA over every
//! image, and evaluating a detection file. Images are processed in parallel
//! on the current rayon pool; results are always assembled in image-id order.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalParams, EvalReport};
use crate::fusion::{wbf, Detection, FusionConfig};
use crate::io::{Dataset, DetectionFile, DetectionHeader, DetectionRecord, Frame};
use crate::tta::{map_view_detections, run_tta, DetectorAdapter, TtaStats, ViewPlan};

fn check_image_ids<'a>(
    files: impl IntoIterator<Item = &'a DetectionFile>,
    dataset: &Dataset,
) -> Result<()> {
    let known = dataset.dims_by_id();
    let mut unknown: Vec<u64> = files
        .into_iter()
        .flat_map(|f| f.image_ids())
        .filter(|id| !known.contains_key(id))
        .collect();
    unknown.sort_unstable();
    unknown.dedup();
    if unknown.is_empty() {
        return Ok(());
    }
    let shown: Vec<String> = unknown.iter().take(20).map(u64::to_string).collect();
    let more = if unknown.len() > 20 {
        format!(" (and {} more)", unknown.len() - 20)
    } else {
        String::new()
    };
    Err(Error::validation(format!(
        "detections reference {} unknown image_id(s): {}{more}",
        unknown.len(),
        shown.join(", ")
    )))
}

fn to_file(per_image: Vec<(u64, Vec<Detection>)>) -> DetectionFile {
    DetectionFile {
        header: DetectionHeader::original(),
        records: per_image
            .iter()
            .flat_map(|(id, dets)| {
                dets.iter()
                    .map(move |d| DetectionRecord::from_detection(*id, d))
            })
            .collect(),
    }
}

/// Fuses one detection file per view into a single original-frame file.
/// File `i` is source view `i`; `n_views` is the number of files.
pub fn fuse_files(
    inputs: &[DetectionFile],
    dataset: &Dataset,
    cfg: &FusionConfig,
) -> Result<(DetectionFile, TtaStats)> {
    if inputs.is_empty() {
        return Err(Error::invalid("at least one detection file is required"));
    }
    cfg.validate()?;
    if !cfg.view_weights.is_empty() && cfg.view_weights.len() != inputs.len() {
        return Err(Error::invalid(format!(
            "{} view weights given for {} input files",
            cfg.view_weights.len(),
            inputs.len()
        )));
    }
    for f in inputs {
        f.validate()?;
    }
    check_image_ids(inputs, dataset)?;

    let grouped: Vec<BTreeMap<u64, Vec<Detection>>> = inputs
        .iter()
        .map(DetectionFile::by_image)
        .collect::<Result<_>>()?;
    let fused: Vec<(u64, Vec<Detection>, TtaStats)> = dataset
        .images
        .par_iter()
        .map(|img| {
            let mut stats = TtaStats {
                views_ok: inputs.len(),
                ..TtaStats::default()
            };
            let mut mapped = Vec::new();
            for (v, (file, per_image)) in inputs.iter().zip(&grouped).enumerate() {
                let Some(dets) = per_image.get(&img.image_id) else {
                    continue;
                };
                match (file.header.frame, file.header.view) {
                    (Frame::View, Some(view)) => mapped.extend(map_view_detections(
                        dets, &view, v as u32, img.dims, &mut stats,
                    )),
                    _ => {
                        stats.boxes_in += dets.len();
                        mapped.extend(dets.iter().map(|d| d.with_view(Some(v as u32))));
                    }
                }
            }
            let out = wbf(&mapped, inputs.len(), cfg)?;
            stats.boxes_out = out.len();
            Ok((
                img.image_id,
                out.iter().map(|f| f.to_detection()).collect(),
                stats,
            ))
        })
        .collect::<Result<_>>()?;

    let mut total = TtaStats {
        views_ok: inputs.len(),
        ..TtaStats::default()
    };
    let mut per_image = Vec::with_capacity(fused.len());
    for (id, dets, s) in fused {
        total.boxes_in += s.boxes_in;
        total.dropped_in_padding += s.dropped_in_padding;
        total.boxes_out += s.boxes_out;
        per_image.push((id, dets));
    }
    per_image.sort_by_key(|(id, _)| *id);
    Ok((to_file(per_image), total))
}

/// Runs the full TTA pipeline on every image of `dataset`.
pub fn run_dataset(
    dataset: &Dataset,
    plan: &ViewPlan,
    detector: &dyn DetectorAdapter,
    cfg: &FusionConfig,
    lenient: bool,
) -> Result<(DetectionFile, TtaStats)> {
    let results: Vec<(u64, Vec<Detection>, TtaStats)> = dataset
        .images
        .par_iter()
        .map(|img| {
            let out = run_tta(img, plan, detector, cfg, lenient)?;
            Ok((
                img.image_id,
                out.fused.iter().map(|f| f.to_detection()).collect(),
                out.stats,
            ))
        })
        .collect::<Result<_>>()?;
    let mut total = TtaStats::default();
    let mut per_image = Vec::with_capacity(results.len());
    for (id, dets, s) in results {
        total += s;
        per_image.push((id, dets));
    }
    per_image.sort_by_key(|(id, _)| *id);
    Ok((to_file(per_image), total))
}

/// Evaluates an original-frame detection file against `dataset`.
pub fn evaluate_file(
    detections: &DetectionFile,
    dataset: &Dataset,
    params: &EvalParams,
) -> Result<EvalReport> {
    if detections.header.frame == Frame::View {
        return Err(Error::validation(
            "detections are in a view frame; run `fuse` first to map them to the original image",
        ));
    }
    check_image_ids([detections], dataset)?;
    evaluate(&detections.predictions()?, &dataset.ground_truths, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::ConfMode;
    use crate::geometry::ImageDims;
    use crate::tta::{ImageRecord, ViewSpec};

    fn dataset() -> Dataset {
        Dataset {
            images: vec![
                ImageRecord {
                    image_id: 1,
                    dims: ImageDims::new(1600, 1600).unwrap(),
                    file_name: "a".into(),
                },
                ImageRecord {
                    image_id: 2,
                    dims: ImageDims::new(800, 600).unwrap(),
                    file_name: "b".into(),
                },
            ],
            ground_truths: vec![],
            categories: vec![],
        }
    }

    fn rec(image_id: u64, bbox: [f64; 4], score: f64) -> DetectionRecord {
        DetectionRecord {
            image_id,
            category_id: 1,
            bbox,
            score,
        }
    }

    #[test]
    fn fuse_maps_views_and_merges() {
        let plain = DetectionFile {
            header: DetectionHeader::for_view(ViewSpec::new(3200, false).unwrap()),
            records: vec![rec(1, [200.0, 200.0, 200.0, 200.0], 0.8)],
        };
        let flipped = DetectionFile {
            header: DetectionHeader::for_view(ViewSpec::new(3200, true).unwrap()),
            records: vec![
                rec(1, [2800.0, 200.0, 200.0, 200.0], 0.6),
                // lands in the vertical padding of the 800x600 image
                rec(2, [100.0, 10.0, 50.0, 50.0], 0.9),
            ],
        };
        let (out, stats) =
            fuse_files(&[plain, flipped], &dataset(), &FusionConfig::default()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].bbox, [100.0, 100.0, 100.0, 100.0]);
        assert!((out.records[0].score - 0.7).abs() < 1e-12);
        assert_eq!(stats.boxes_in, 3);
        assert_eq!(stats.dropped_in_padding, 1);
        assert_eq!(stats.boxes_out, 1);
    }

    #[test]
    fn fuse_single_original_file_is_identity() {
        let file = DetectionFile {
            header: DetectionHeader::original(),
            records: vec![
                rec(2, [10.5, 20.25, 30.0, 40.0], 0.4),
                rec(1, [100.0, 100.0, 20.0, 20.0], 0.9),
                rec(1, [500.0, 100.0, 20.0, 20.0], 0.3),
            ],
        };
        let cfg = FusionConfig {
            conf_mode: ConfMode::None,
            ..FusionConfig::default()
        };
        let (out, _) = fuse_files(std::slice::from_ref(&file), &dataset(), &cfg).unwrap();
        let mut a = file.records.clone();
        let mut b = out.records.clone();
        let key = |r: &DetectionRecord| (r.image_id, r.bbox.map(f64::to_bits));
        a.sort_by_key(key);
        b.sort_by_key(key);
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_images_are_listed() {
        let file = DetectionFile {
            header: DetectionHeader::original(),
            records: vec![
                rec(9, [0.0, 0.0, 1.0, 1.0], 0.4),
                rec(7, [0.0, 0.0, 1.0, 1.0], 0.4),
            ],
        };
        let err = fuse_files(&[file], &dataset(), &FusionConfig::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("7, 9"), "{msg}");
        assert!(fuse_files(&[], &dataset(), &FusionConfig::default()).is_err());
    }

    #[test]
    fn eval_rejects_view_frame() {
        let file = DetectionFile {
            header: DetectionHeader::for_view(ViewSpec::new(640, false).unwrap()),
            records: vec![],
        };
        let err = evaluate_file(&file, &dataset(), &EvalParams::default()).unwrap_err();
        assert!(err.to_string().contains("fuse"));
    }
}
