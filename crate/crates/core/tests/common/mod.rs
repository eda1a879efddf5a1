//! Reference implementations used as oracles by the integration tests.
//! They favour obviousness over speed and share no code with the library.

#![allow(dead_code)]

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tta_core::{BBox, Detection};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

pub fn random_box(rng: &mut impl Rng, extent: f64, max_side: f64) -> BBox {
    let x = rng.random_range(-extent..extent);
    let y = rng.random_range(-extent..extent);
    let w = rng.random_range(0.0..max_side);
    let h = rng.random_range(0.0..max_side);
    bx(x, y, x + w, y + h)
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

pub fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = a[2].min(b[2]) - a[0].max(b[0]);
    let iy = a[3].min(b[3]) - a[1].max(b[1]);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCluster {
    pub category_id: u32,
    /// Input indices in join order.
    pub members: Vec<usize>,
    pub bbox: [f64; 4],
    pub score: f64,
}

pub struct OracleFusion<'a> {
    pub iou_thr: f64,
    pub skip_box_thr: f64,
    pub weights: &'a [f64],
    pub scale_by_views: bool,
}

/// Plain WBF scan: explicit member lists, fused box recomputed from scratch
/// after every join.
pub fn oracle_wbf(dets: &[Detection], n_views: usize, p: &OracleFusion) -> Vec<OracleCluster> {
    let weight = |d: &Detection| match d.source_view() {
        Some(v) if !p.weights.is_empty() => p.weights[v as usize],
        _ => 1.0,
    };
    let mut categories: Vec<u32> = dets.iter().map(|d| d.category_id()).collect();
    categories.sort();
    categories.dedup();

    let mut out = Vec::new();
    for cat in categories {
        let mut order: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].category_id() == cat && dets[i].score() >= p.skip_box_thr)
            .collect();
        order.sort_by(|&i, &j| {
            let (a, b) = (&dets[i], &dets[j]);
            let ka = a.score() * weight(a);
            let kb = b.score() * weight(b);
            let view = |d: &Detection| d.source_view().map_or(-1i64, i64::from);
            kb.partial_cmp(&ka)
                .unwrap()
                .then(view(a).cmp(&view(b)))
                .then_with(|| {
                    let (x, y) = (a.bbox().to_array(), b.bbox().to_array());
                    x.partial_cmp(&y).unwrap_or(Ordering::Equal)
                })
        });

        let fused = |members: &[usize]| -> [f64; 4] {
            let mut num_ws = [0.0; 4];
            let mut num_w = [0.0; 4];
            let (mut sws, mut sw) = (0.0, 0.0);
            for &m in members {
                let d = &dets[m];
                let c = d.bbox().to_array();
                let w = weight(d);
                for k in 0..4 {
                    num_ws[k] += w * d.score() * c[k];
                    num_w[k] += w * c[k];
                }
                sws += w * d.score();
                sw += w;
            }
            let mut f = [0.0; 4];
            for k in 0..4 {
                let mean = if sws > 0.0 {
                    num_ws[k] / sws
                } else {
                    num_w[k] / sw
                };
                let lo = members
                    .iter()
                    .map(|&m| dets[m].bbox().to_array()[k])
                    .fold(f64::INFINITY, f64::min);
                let hi = members
                    .iter()
                    .map(|&m| dets[m].bbox().to_array()[k])
                    .fold(f64::NEG_INFINITY, f64::max);
                f[k] = mean.max(lo).min(hi);
            }
            f[2] = f[2].max(f[0]);
            f[3] = f[3].max(f[1]);
            f
        };

        let mut clusters: Vec<Vec<usize>> = Vec::new();
        for i in order {
            let b = dets[i].bbox().to_array();
            let mut best = None;
            let mut best_iou = -1.0;
            for (ci, members) in clusters.iter().enumerate() {
                let o = oracle_iou(fused(members), b);
                if o > best_iou {
                    best_iou = o;
                    best = Some(ci);
                }
            }
            match best {
                Some(ci) if best_iou > p.iou_thr => clusters[ci].push(i),
                _ => clusters.push(vec![i]),
            }
        }

        for members in clusters {
            let mut sws = 0.0;
            let mut sw = 0.0;
            for &m in &members {
                sws += weight(&dets[m]) * dets[m].score();
                sw += weight(&dets[m]);
            }
            let mut score = (sws / sw).clamp(0.0, 1.0);
            if p.scale_by_views {
                score *= members.len().min(n_views) as f64 / n_views as f64;
            }
            out.push(OracleCluster {
                category_id: cat,
                bbox: fused(&members),
                members,
                score,
            });
        }
    }
    out
}

/// A labelled ranking entry for the AP oracles.
#[derive(Debug, Clone, Copy)]
pub struct Ranked {
    pub score: f64,
    pub tp: bool,
}

/// Greedy matching of one image/category: predictions by descending score,
/// each takes the best-IoU free ground truth at or above `thr`. Predictions
/// absorbed by an ignore region are left out.
pub fn oracle_match(preds: &[([f64; 4], f64)], gts: &[([f64; 4], bool)], thr: f64) -> Vec<Ranked> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| preds[j].1.partial_cmp(&preds[i].1).unwrap());
    let mut used = vec![false; gts.len()];
    let mut out = Vec::new();
    for i in order {
        let (b, s) = preds[i];
        let mut best: Option<usize> = None;
        let mut best_iou = 0.0;
        for (g, (gb, ignore)) in gts.iter().enumerate() {
            if *ignore || used[g] {
                continue;
            }
            let o = oracle_iou(b, *gb);
            if o >= thr && o > best_iou {
                best_iou = o;
                best = Some(g);
            }
        }
        if let Some(g) = best {
            used[g] = true;
            out.push(Ranked { score: s, tp: true });
        } else if gts
            .iter()
            .any(|(gb, ignore)| *ignore && oracle_iou(b, *gb) >= thr)
        {
            continue;
        } else {
            out.push(Ranked {
                score: s,
                tp: false,
            });
        }
    }
    out
}

fn pr_points(ranked: &[Ranked], n_gt: usize) -> Vec<(f64, f64)> {
    let mut sorted = ranked.to_vec();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut tp = 0;
    sorted
        .iter()
        .enumerate()
        .map(|(i, r)| {
            tp += usize::from(r.tp);
            (tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Interpolated precision at recall `r`: best precision at any rank whose
/// recall reaches `r`, zero when none does.
fn interp(points: &[(f64, f64)], r: f64) -> f64 {
    points
        .iter()
        .filter(|(rec, _)| *rec >= r)
        .map(|(_, p)| *p)
        .fold(0.0, f64::max)
}

/// 101-point interpolated AP by direct definition.
pub fn oracle_ap_101(ranked: &[Ranked], n_gt: usize) -> f64 {
    let points = pr_points(ranked, n_gt);
    (0..=100)
        .map(|k| interp(&points, k as f64 / 100.0))
        .sum::<f64>()
        / 101.0
}

/// Exact area under the interpolated precision-recall curve.
pub fn oracle_ap_exact(ranked: &[Ranked], n_gt: usize) -> f64 {
    let points = pr_points(ranked, n_gt);
    let mut area = 0.0;
    let mut prev = 0.0;
    for &(rec, _) in &points {
        if rec > prev {
            area += (rec - prev) * interp(&points, rec);
            prev = rec;
        }
    }
    area
}

/// Up to `max_boxes` detections jittered around one or two centres so that
/// clusters actually form, with a few tied scores and repeated boxes.
pub fn random_fusion_case(rng: &mut impl Rng, max_boxes: usize) -> (Vec<Detection>, usize) {
    let n_views = rng.random_range(1..=3usize);
    let n = rng.random_range(0..=max_boxes);
    let centres: Vec<(f64, f64)> = (0..2)
        .map(|_| (rng.random_range(20.0..60.0), rng.random_range(20.0..60.0)))
        .collect();
    let mut dets: Vec<Detection> = Vec::with_capacity(n);
    for _ in 0..n {
        if !dets.is_empty() && rng.random_bool(0.1) {
            let copy = dets[rng.random_range(0..dets.len())];
            dets.push(copy);
            continue;
        }
        let (cx, cy) = centres[rng.random_range(0..centres.len())];
        let half = rng.random_range(5.0..15.0);
        let mut j = || rng.random_range(-4.0..4.0);
        let b = bx(
            cx - half + j(),
            cy - half + j(),
            cx + half + j(),
            cy + half + j(),
        );
        let score = if rng.random_bool(0.2) {
            f64::from(rng.random_range(0..=4u32)) / 4.0
        } else {
            rng.random_range(0.0..=1.0)
        };
        let cat = rng.random_range(1..=2u32);
        let view = rng.random_range(0..n_views as u32);
        dets.push(Detection::new(b, score, cat).unwrap().with_view(Some(view)));
    }
    (dets, n_views)
}
