//! Average precision at a single IoU threshold with COCO-style 101-point
//! interpolation, greedy score-ordered matching, crowd/ignore handling and a
//! size-bucket breakdown.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{tie_break, Detection};
use crate::geometry::{iou, BBox};

pub const RECALL_POINTS: usize = 101;

/// Upper area bounds (exclusive) of the small and medium buckets.
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: BBox,
    pub category_id: u32,
    /// Crowd region: never a false negative, absorbs matching predictions.
    pub ignore: bool,
}

/// A detection attributed to an image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub image_id: u64,
    pub detection: Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchLabel {
    TruePositive,
    FalsePositive,
    /// Matched only an ignore region, or fell outside the evaluated area range.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn of_area(area: f64) -> Self {
        if area < SMALL_AREA {
            SizeBucket::Small
        } else if area < MEDIUM_AREA {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        }
    }
}

fn rank_cmp(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score()
        .total_cmp(&a.score())
        .then_with(|| tie_break(a, b))
}

/// Labels each prediction of one (image, category) group; output is aligned
/// with `preds`.
pub fn match_detections(preds: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> Vec<MatchLabel> {
    match_in_range(preds, gts, iou_thr, None)
}

fn match_in_range(
    preds: &[Detection],
    gts: &[GroundTruth],
    iou_thr: f64,
    bucket: Option<SizeBucket>,
) -> Vec<MatchLabel> {
    let outside = |b: &BBox| bucket.is_some_and(|s| SizeBucket::of_area(b.area()) != s);
    let ignore: Vec<bool> = gts.iter().map(|g| g.ignore || outside(&g.bbox)).collect();

    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| rank_cmp(&preds[i], &preds[j]));

    let mut taken = vec![false; gts.len()];
    let mut labels = vec![MatchLabel::FalsePositive; preds.len()];
    for pi in order {
        let pb = preds[pi].bbox();
        let mut best: Option<(usize, f64)> = None;
        let mut best_ignored = 0.0f64;
        for (gi, gt) in gts.iter().enumerate() {
            let o = iou(pb, &gt.bbox);
            if ignore[gi] {
                best_ignored = best_ignored.max(o);
            } else if !taken[gi] && o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        labels[pi] = if let Some((gi, _)) = best {
            taken[gi] = true;
            MatchLabel::TruePositive
        } else if best_ignored >= iou_thr || outside(pb) {
            MatchLabel::Ignored
        } else {
            MatchLabel::FalsePositive
        };
    }
    labels
}

/// One scored decision entering the precision-recall accumulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredLabel {
    pub image_id: u64,
    pub detection: Detection,
    pub true_positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub ap: f64,
    /// Interpolated precision at each of the 101 recall points.
    pub precision: Vec<f64>,
    pub tp: usize,
    pub fp: usize,
    pub n_gt: usize,
}

pub fn recall_points() -> Vec<f64> {
    (0..RECALL_POINTS).map(|k| k as f64 / 100.0).collect()
}

/// 101-point interpolated AP over scored labels pooled across a dataset.
/// `n_gt` counts the non-ignored ground truths; zero is an error.
pub fn average_precision(labels: &[ScoredLabel], n_gt: usize) -> Result<PrCurve> {
    if n_gt == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one ground truth".into(),
        ));
    }
    let mut sorted: Vec<&ScoredLabel> = labels.iter().collect();
    sorted.sort_by(|a, b| {
        b.detection
            .score()
            .total_cmp(&a.detection.score())
            .then(a.image_id.cmp(&b.image_id))
            .then_with(|| tie_break(&a.detection, &b.detection))
    });

    let mut recall = Vec::with_capacity(sorted.len());
    let mut envelope = Vec::with_capacity(sorted.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for l in &sorted {
        if l.true_positive {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        envelope.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }

    let precision: Vec<f64> = recall_points()
        .into_iter()
        .map(|r| {
            let i = recall.partition_point(|&x| x < r);
            envelope.get(i).copied().unwrap_or(0.0)
        })
        .collect();
    let ap = precision.iter().sum::<f64>() / RECALL_POINTS as f64;
    Ok(PrCurve {
        ap,
        precision,
        tp,
        fp,
        n_gt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub iou_thr: f64,
    /// Keep at most this many top-ranked predictions per image and category.
    pub max_dets: Option<usize>,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_thr: 0.5,
            max_dets: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_thr: f64,
    /// Mean AP over categories with at least one non-ignored ground truth.
    pub ap50: f64,
    pub recall_points: Vec<f64>,
    /// Category-averaged interpolated precision at each recall point.
    pub precision_curve: Vec<f64>,
    pub per_category: BTreeMap<u32, f64>,
    /// `None` when no ground truth falls in the bucket.
    pub per_bucket: BTreeMap<SizeBucket, Option<f64>>,
    pub counts: Counts,
}

type GroupKey = (u32, u64);

struct Groups {
    preds: BTreeMap<GroupKey, Vec<Detection>>,
    gts: BTreeMap<GroupKey, Vec<GroundTruth>>,
    categories: BTreeSet<u32>,
}

fn group(preds: &[Prediction], gts: &[GroundTruth], max_dets: Option<usize>) -> Groups {
    let categories: BTreeSet<u32> = gts.iter().map(|g| g.category_id).collect();
    let mut gmap: BTreeMap<GroupKey, Vec<GroundTruth>> = BTreeMap::new();
    for g in gts {
        gmap.entry((g.category_id, g.image_id))
            .or_default()
            .push(*g);
    }
    let mut pmap: BTreeMap<GroupKey, Vec<Detection>> = BTreeMap::new();
    for p in preds {
        if categories.contains(&p.detection.category_id()) {
            pmap.entry((p.detection.category_id(), p.image_id))
                .or_default()
                .push(p.detection);
        }
    }
    if let Some(cap) = max_dets {
        for dets in pmap.values_mut() {
            dets.sort_by(rank_cmp);
            dets.truncate(cap);
        }
    }
    Groups {
        preds: pmap,
        gts: gmap,
        categories,
    }
}

/// Per-category PR curves for one area range (all areas when `bucket` is None).
fn category_curves(
    groups: &Groups,
    iou_thr: f64,
    bucket: Option<SizeBucket>,
) -> BTreeMap<u32, Option<PrCurve>> {
    let keys: BTreeSet<GroupKey> = groups
        .preds
        .keys()
        .chain(groups.gts.keys())
        .copied()
        .collect();
    let keys: Vec<GroupKey> = keys.into_iter().collect();
    let empty_p: Vec<Detection> = Vec::new();
    let empty_g: Vec<GroundTruth> = Vec::new();

    let matched: Vec<(GroupKey, Vec<ScoredLabel>, usize)> = keys
        .par_iter()
        .map(|&key| {
            let p = groups.preds.get(&key).unwrap_or(&empty_p);
            let g = groups.gts.get(&key).unwrap_or(&empty_g);
            let labels = match_in_range(p, g, iou_thr, bucket);
            let scored = p
                .iter()
                .zip(labels)
                .filter(|(_, l)| *l != MatchLabel::Ignored)
                .map(|(d, l)| ScoredLabel {
                    image_id: key.1,
                    detection: *d,
                    true_positive: l == MatchLabel::TruePositive,
                })
                .collect();
            let n_gt = g
                .iter()
                .filter(|gt| {
                    !gt.ignore && bucket.is_none_or(|s| SizeBucket::of_area(gt.bbox.area()) == s)
                })
                .count();
            (key, scored, n_gt)
        })
        .collect();

    let mut per_cat: BTreeMap<u32, (Vec<ScoredLabel>, usize)> = BTreeMap::new();
    for ((cat, _), scored, n_gt) in matched {
        let slot = per_cat.entry(cat).or_default();
        slot.0.extend(scored);
        slot.1 += n_gt;
    }
    groups
        .categories
        .iter()
        .map(|&cat| {
            let curve = per_cat
                .get(&cat)
                .and_then(|(labels, n_gt)| average_precision(labels, *n_gt).ok());
            (cat, curve)
        })
        .collect()
}

/// Dataset-level AP at `params.iou_thr`, averaged over the categories that
/// have ground truth, with small/medium/large breakdown by GT area.
pub fn evaluate(
    preds: &[Prediction],
    gts: &[GroundTruth],
    params: &EvalParams,
) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::validation("ground-truth set is empty"));
    }
    if !(params.iou_thr > 0.0 && params.iou_thr <= 1.0) {
        return Err(Error::invalid(format!(
            "iou_thr must lie in (0, 1], got {}",
            params.iou_thr
        )));
    }
    let groups = group(preds, gts, params.max_dets);

    let overall = category_curves(&groups, params.iou_thr, None);
    let curves: Vec<(u32, &PrCurve)> = overall
        .iter()
        .filter_map(|(c, curve)| curve.as_ref().map(|p| (*c, p)))
        .collect();
    if curves.is_empty() {
        return Err(Error::UndefinedMetric(
            "every ground truth is marked ignore".into(),
        ));
    }
    let n = curves.len() as f64;
    let ap50 = curves.iter().map(|(_, c)| c.ap).sum::<f64>() / n;
    let precision_curve = (0..RECALL_POINTS)
        .map(|k| curves.iter().map(|(_, c)| c.precision[k]).sum::<f64>() / n)
        .collect();
    let mut counts = Counts::default();
    for (_, c) in &curves {
        counts.tp += c.tp;
        counts.fp += c.fp;
        counts.fn_ += c.n_gt - c.tp;
    }

    let per_bucket = SizeBucket::ALL
        .iter()
        .map(|&b| {
            let aps: Vec<f64> = category_curves(&groups, params.iou_thr, Some(b))
                .into_values()
                .flatten()
                .map(|c| c.ap)
                .collect();
            let ap = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
            (b, ap)
        })
        .collect();

    Ok(EvalReport {
        iou_thr: params.iou_thr,
        ap50,
        recall_points: recall_points(),
        precision_curve,
        per_category: curves.iter().map(|(c, p)| (*c, p.ap)).collect(),
        per_bucket,
        counts,
    })
}
