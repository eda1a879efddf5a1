//! Strategy comparison on synthetic data: generate a dataset, run the
//! synthetic detector on every view of each strategy, fuse, evaluate.
//!
//! Every intermediate goes through the real file formats and is kept under
//! the output directory:
//!
//! ```text
//! out/effective_config.toml
//! out/dataset.json
//! out/<strategy>/view_<k>_<size>[_hflip][_vflip].jsonl
//! out/<strategy>/fused.jsonl
//! out/<strategy>/eval.json
//! out/table.tsv
//! ```
//!
//! File contents depend only on the configuration, never on thread count or
//! timing; runtimes are reported in memory only.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::config::{to_toml, BenchConfig, Strategy};
use crate::error::Result;
use crate::eval::{EvalReport, SizeBucket};
use crate::io::{
    read_dataset, read_detections, report_to_string, write_dataset, write_detections, write_text,
    CocoCategory, Dataset, DetectionFile, DetectionHeader, DetectionRecord,
};
use crate::pipeline::{evaluate_file, fuse_files};
use crate::synth::{generate_dataset, SyntheticDetector};
use crate::tta::{DetectorAdapter, TtaStats, ViewSpec};

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub strategy: String,
    pub n_views: usize,
    pub report: EvalReport,
    pub fuse_stats: TtaStats,
    pub runtime: Duration,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub n_images: usize,
    pub n_objects: usize,
    pub rows: Vec<BenchRow>,
}

fn category_name(id: u32) -> String {
    if id == 1 {
        "bird".into()
    } else {
        format!("class_{id}")
    }
}

fn dir_name(strategy: &str) -> String {
    strategy
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_+.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn view_file_name(k: usize, v: &ViewSpec) -> String {
    let mut name = format!("view_{k}_{}", v.target_size());
    if v.hflip() {
        name.push_str("_hflip");
    }
    if v.vflip() {
        name.push_str("_vflip");
    }
    name + ".jsonl"
}

fn detect_view(
    dataset: &Dataset,
    detector: &dyn DetectorAdapter,
    view: &ViewSpec,
) -> Result<DetectionFile> {
    let per_image: Vec<Vec<DetectionRecord>> = dataset
        .images
        .par_iter()
        .map(|img| {
            let dets = detector.detect(img, view)?;
            Ok(dets
                .iter()
                .map(|d| DetectionRecord::from_detection(img.image_id, d))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(DetectionFile {
        header: DetectionHeader::for_view(*view),
        records: per_image.into_iter().flatten().collect(),
    })
}

fn run_strategy(
    cfg: &BenchConfig,
    strategy: &Strategy,
    dataset: &Dataset,
    detector: &dyn DetectorAdapter,
    out_dir: &Path,
) -> Result<BenchRow> {
    let started = Instant::now();
    let plan = strategy.plan.to_plan()?;
    let dir = out_dir.join(dir_name(&strategy.name));

    let mut view_paths: Vec<PathBuf> = Vec::with_capacity(plan.len());
    for (k, view) in plan.views().iter().enumerate() {
        let file = detect_view(dataset, detector, view)?;
        let path = dir.join(view_file_name(k, view));
        write_detections(&path, &file)?;
        view_paths.push(path);
    }

    let inputs: Vec<DetectionFile> = view_paths
        .iter()
        .map(|p| read_detections(p))
        .collect::<Result<_>>()?;
    let fusion = strategy.fusion.as_ref().unwrap_or(&cfg.fusion);
    let (fused, fuse_stats) = fuse_files(&inputs, dataset, fusion)?;
    let fused_path = dir.join("fused.jsonl");
    write_detections(&fused_path, &fused)?;

    let report = evaluate_file(&read_detections(&fused_path)?, dataset, &cfg.eval)?;
    write_text(&dir.join("eval.json"), &report_to_string(&report))?;

    Ok(BenchRow {
        strategy: strategy.name.clone(),
        n_views: plan.len(),
        report,
        fuse_stats,
        runtime: started.elapsed(),
    })
}

/// Runs every configured strategy, in order, and writes the audit tree under
/// `out_dir`. Parallelism comes from the caller's rayon pool.
pub fn run_bench(cfg: &BenchConfig, out_dir: &Path) -> Result<BenchResult> {
    cfg.validate()?;
    write_text(&out_dir.join("effective_config.toml"), &to_toml(cfg))?;

    let (images, ground_truths) = generate_dataset(&cfg.synth)?;
    let mut categories = cfg.synth.categories.clone();
    categories.sort_unstable();
    categories.dedup();
    let generated = Dataset {
        images,
        ground_truths,
        categories: categories
            .iter()
            .map(|&id| CocoCategory {
                id,
                name: category_name(id),
            })
            .collect(),
    };
    let dataset_path = out_dir.join("dataset.json");
    write_dataset(&dataset_path, &generated)?;
    let dataset = read_dataset(&dataset_path)?;

    let detector = SyntheticDetector::from_config(&cfg.synth, &dataset.ground_truths)?;
    let rows = cfg
        .strategies
        .iter()
        .map(|s| run_strategy(cfg, s, &dataset, &detector, out_dir))
        .collect::<Result<Vec<_>>>()?;

    let result = BenchResult {
        n_images: dataset.images.len(),
        n_objects: dataset.ground_truths.len(),
        rows,
    };
    write_text(&out_dir.join("table.tsv"), &table_tsv(&result))?;
    Ok(result)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn bucket(row: &BenchRow, b: SizeBucket) -> Option<f64> {
    row.report.per_bucket.get(&b).copied().flatten()
}

/// Machine-readable table, without timings.
pub fn table_tsv(result: &BenchResult) -> String {
    let mut out =
        String::from("strategy\tviews\tap50\tap50_percent\tap50_small\tap50_medium\ttp\tfp\tfn\n");
    for r in &result.rows {
        let c = r.report.counts;
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.2}\t{}\t{}\t{}\t{}\t{}\n",
            r.strategy,
            r.n_views,
            r.report.ap50,
            r.report.ap50 * 100.0,
            fmt_opt(bucket(r, SizeBucket::Small)),
            fmt_opt(bucket(r, SizeBucket::Medium)),
            c.tp,
            c.fp,
            c.fn_
        ));
    }
    out
}

/// Human-readable table including per-strategy runtime.
pub fn table_text(result: &BenchResult) -> String {
    let width = result
        .rows
        .iter()
        .map(|r| r.strategy.len())
        .max()
        .unwrap_or(8)
        .max(8);
    let mut out = format!(
        "{} images, {} objects\n{:<width$}  {:>5}  {:>7}  {:>6}  {:>8}  {:>8}  {:>9}\n",
        result.n_images,
        result.n_objects,
        "strategy",
        "views",
        "AP@0.5",
        "AP %",
        "small",
        "medium",
        "runtime"
    );
    for r in &result.rows {
        out.push_str(&format!(
            "{:<width$}  {:>5}  {:>7.4}  {:>6.2}  {:>8}  {:>8}  {:>8.2}s\n",
            r.strategy,
            r.n_views,
            r.report.ap50,
            r.report.ap50 * 100.0,
            fmt_opt(bucket(r, SizeBucket::Small)),
            fmt_opt(bucket(r, SizeBucket::Medium)),
            r.runtime.as_secs_f64()
        ));
    }
    out
}
