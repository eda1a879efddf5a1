//! Merging of per-view detection lists: weighted boxes fusion, plus greedy
//! NMS and Gaussian soft-NMS as baselines.
//!
//! Every routine ranks detections with the same total order: score
//! descending, then source view ascending (unknown first), then box corners
//! `(x1, y1, x2, y2)` ascending. Results therefore never depend on the order
//! of the input slice.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// A scored, class-labelled box in some image frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    bbox: BBox,
    score: f64,
    category_id: u32,
    source_view: Option<u32>,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, category_id: u32) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("score {score} outside [0, 1]")));
        }
        Ok(Self {
            bbox,
            score,
            category_id,
            source_view: None,
        })
    }

    pub fn with_view(mut self, view: Option<u32>) -> Self {
        self.source_view = view;
        self
    }

    pub fn with_box(mut self, bbox: BBox) -> Self {
        self.bbox = bbox;
        self
    }

    #[inline]
    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    #[inline]
    pub fn score(&self) -> f64 {
        self.score
    }

    #[inline]
    pub fn category_id(&self) -> u32 {
        self.category_id
    }

    /// Index of the originating view within its plan, `None` when unknown.
    #[inline]
    pub fn source_view(&self) -> Option<u32> {
        self.source_view
    }
}

/// Tie-break shared by every ranking in this crate, excluding the score itself.
pub fn tie_break(a: &Detection, b: &Detection) -> Ordering {
    a.source_view
        .cmp(&b.source_view)
        .then_with(|| a.bbox.key_cmp(&b.bbox))
}

fn rank(a: &Detection, sa: f64, b: &Detection, sb: f64) -> Ordering {
    sb.total_cmp(&sa).then_with(|| tie_break(a, b))
}

/// Post-fusion confidence rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfMode {
    /// Fused score is the weighted mean of member scores.
    None,
    /// Weighted mean multiplied by `min(cluster_size, n_views) / n_views`.
    ScaleByViews,
}

impl std::str::FromStr for ConfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ConfMode::None),
            "scale_by_views" | "scale-by-views" => Ok(ConfMode::ScaleByViews),
            other => Err(Error::invalid(format!(
                "unknown conf mode '{other}', expected none or scale_by_views"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// A detection joins a cluster when IoU with its fused box exceeds this.
    pub iou_thr: f64,
    /// Detections with raw score below this are discarded before fusion.
    pub skip_box_thr: f64,
    /// One weight per view; empty means all 1.0.
    pub view_weights: Vec<f64>,
    pub conf_mode: ConfMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            iou_thr: 0.55,
            skip_box_thr: 0.0,
            view_weights: Vec::new(),
            conf_mode: ConfMode::ScaleByViews,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_thr > 0.0 && self.iou_thr < 1.0) {
            return Err(Error::invalid(format!(
                "iou_thr must lie in (0, 1), got {}",
                self.iou_thr
            )));
        }
        if !(0.0..=1.0).contains(&self.skip_box_thr) {
            return Err(Error::invalid(format!(
                "skip_box_thr must lie in [0, 1], got {}",
                self.skip_box_thr
            )));
        }
        if let Some(w) = self
            .view_weights
            .iter()
            .find(|w| !(w.is_finite() && **w > 0.0))
        {
            return Err(Error::invalid(format!("view weight {w} is not positive")));
        }
        Ok(())
    }

    fn weight_of(&self, det: &Detection, n_views: usize) -> Result<f64> {
        if self.view_weights.is_empty() {
            return Ok(1.0);
        }
        match det.source_view {
            Some(v) if (v as usize) < n_views => Ok(self.view_weights[v as usize]),
            other => Err(Error::invalid(format!(
                "detection source view {other:?} has no weight among {n_views} views"
            ))),
        }
    }
}

/// One output box of weighted boxes fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedDetection {
    pub bbox: BBox,
    pub score: f64,
    pub category_id: u32,
    /// Indices into the fusion input, in the order the members joined.
    pub members: Vec<usize>,
}

impl FusedDetection {
    pub fn cluster_size(&self) -> usize {
        self.members.len()
    }

    pub fn to_detection(&self) -> Detection {
        Detection {
            bbox: self.bbox,
            score: self.score,
            category_id: self.category_id,
            source_view: None,
        }
    }
}

struct Cluster {
    fused: BBox,
    members: Vec<usize>,
    // sums over members of w*s*coord and w*coord
    acc_ws: [f64; 4],
    acc_w: [f64; 4],
    sum_ws: f64,
    sum_w: f64,
    lo: [f64; 4],
    hi: [f64; 4],
}

impl Cluster {
    fn seed(idx: usize, det: &Detection, w: f64) -> Self {
        let c = det.bbox.to_array();
        let mut cluster = Self {
            fused: det.bbox,
            members: Vec::new(),
            acc_ws: [0.0; 4],
            acc_w: [0.0; 4],
            sum_ws: 0.0,
            sum_w: 0.0,
            lo: c,
            hi: c,
        };
        cluster.add(idx, det, w);
        cluster
    }

    fn add(&mut self, idx: usize, det: &Detection, w: f64) {
        let ws = w * det.score;
        let c = det.bbox.to_array();
        for k in 0..4 {
            self.acc_ws[k] += ws * c[k];
            self.acc_w[k] += w * c[k];
            self.lo[k] = self.lo[k].min(c[k]);
            self.hi[k] = self.hi[k].max(c[k]);
        }
        self.sum_ws += ws;
        self.sum_w += w;
        self.members.push(idx);

        // All-zero scores leave no score weighting; fall back to view weights.
        let (acc, denom) = if self.sum_ws > 0.0 {
            (&self.acc_ws, self.sum_ws)
        } else {
            (&self.acc_w, self.sum_w)
        };
        let mut f = [0.0; 4];
        for k in 0..4 {
            f[k] = (acc[k] / denom).clamp(self.lo[k], self.hi[k]);
        }
        self.fused = BBox::new(f[0], f[1], f[2].max(f[0]), f[3].max(f[1]))
            .expect("convex combination of canonical boxes is canonical");
    }

    fn score(&self) -> f64 {
        (self.sum_ws / self.sum_w).clamp(0.0, 1.0)
    }
}

/// Weighted boxes fusion over detections from `n_views` views of one image.
///
/// Categories are fused independently. Each detection, in rank order by
/// `score * view_weight`, joins the existing cluster whose current fused box
/// overlaps it most (earliest cluster on ties) if that IoU exceeds
/// `cfg.iou_thr`, and otherwise seeds a new cluster. Fused coordinates are
/// the `weight * score` weighted mean of member coordinates and the fused
/// score is the weight-averaged member score.
pub fn wbf(
    detections: &[Detection],
    n_views: usize,
    cfg: &FusionConfig,
) -> Result<Vec<FusedDetection>> {
    if n_views < 1 {
        return Err(Error::invalid("n_views must be at least 1"));
    }
    cfg.validate()?;
    if !cfg.view_weights.is_empty() && cfg.view_weights.len() != n_views {
        return Err(Error::invalid(format!(
            "{} view weights given for {n_views} views",
            cfg.view_weights.len()
        )));
    }

    let mut by_category: BTreeMap<u32, Vec<(usize, f64)>> = BTreeMap::new();
    for (idx, det) in detections.iter().enumerate() {
        let w = cfg.weight_of(det, n_views)?;
        if det.score < cfg.skip_box_thr {
            continue;
        }
        by_category
            .entry(det.category_id)
            .or_default()
            .push((idx, w));
    }

    let mut out = Vec::new();
    for (category_id, mut entries) in by_category {
        entries.sort_by(|&(i, wi), &(j, wj)| {
            let (a, b) = (&detections[i], &detections[j]);
            rank(a, a.score * wi, b, b.score * wj)
        });

        let mut clusters: Vec<Cluster> = Vec::new();
        for (idx, w) in entries {
            let det = &detections[idx];
            let mut best: Option<(usize, f64)> = None;
            for (ci, cluster) in clusters.iter().enumerate() {
                let overlap = iou(&cluster.fused, &det.bbox);
                if best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((ci, overlap));
                }
            }
            match best {
                Some((ci, overlap)) if overlap > cfg.iou_thr => clusters[ci].add(idx, det, w),
                _ => clusters.push(Cluster::seed(idx, det, w)),
            }
        }

        out.extend(clusters.into_iter().map(|c| {
            let mut score = c.score();
            if cfg.conf_mode == ConfMode::ScaleByViews {
                score *= c.members.len().min(n_views) as f64 / n_views as f64;
            }
            FusedDetection {
                bbox: c.fused,
                score,
                category_id,
                members: c.members,
            }
        }));
    }

    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.bbox.key_cmp(&b.bbox))
            .then_with(|| a.category_id.cmp(&b.category_id))
    });
    Ok(out)
}

fn ranked(detections: &[Detection]) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(|a, b| rank(a, a.score, b, b.score));
    sorted
}

/// Greedy per-category non-maximum suppression. Output is in emission order.
pub fn nms(detections: &[Detection], iou_thr: f64) -> Result<Vec<Detection>> {
    if !(iou_thr > 0.0 && iou_thr < 1.0) {
        return Err(Error::invalid(format!(
            "iou_thr must lie in (0, 1), got {iou_thr}"
        )));
    }
    let mut kept: Vec<Detection> = Vec::new();
    for det in ranked(detections) {
        let suppressed = kept
            .iter()
            .any(|k| k.category_id == det.category_id && iou(&k.bbox, &det.bbox) > iou_thr);
        if !suppressed {
            kept.push(det);
        }
    }
    Ok(kept)
}

/// Gaussian soft-NMS: every emitted box decays the scores of the remaining
/// same-category boxes by `exp(-iou^2 / sigma)`; decayed scores below
/// `score_floor` are dropped.
pub fn soft_nms(detections: &[Detection], sigma: f64, score_floor: f64) -> Result<Vec<Detection>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if !(0.0..1.0).contains(&score_floor) {
        return Err(Error::invalid(format!(
            "score_floor must lie in [0, 1), got {score_floor}"
        )));
    }
    let mut pool = detections.to_vec();
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best = (0..pool.len())
            .min_by(|&i, &j| rank(&pool[i], pool[i].score, &pool[j], pool[j].score))
            .expect("pool is non-empty");
        let top = pool.swap_remove(best);
        for other in pool.iter_mut() {
            if other.category_id == top.category_id {
                let o = iou(&top.bbox, &other.bbox);
                other.score *= (-(o * o) / sigma).exp();
            }
        }
        pool.retain(|d| d.category_id != top.category_id || d.score >= score_floor);
        out.push(top);
    }
    Ok(out)
}
