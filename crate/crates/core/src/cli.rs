//! Command-line surface of the `tta` binary.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adapters::{serve, FileDetector, SubprocessDetector};
use crate::bench::{run_bench, table_text};
use crate::config::{load_toml, BenchConfig, PlanSpec, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, SizeBucket};
use crate::fusion::{ConfMode, FusionConfig};
use crate::io::{
    plan_to_string, read_dataset, read_detections, read_plan, report_to_string, write_detections,
    write_text,
};
use crate::pipeline::{evaluate_file, fuse_files, run_dataset};
use crate::synth::{NoiseModel, SyntheticDetector};
use crate::tta::{DetectorAdapter, TtaStats, DEFAULT_SIZES};

#[derive(Debug, Parser)]
#[command(
    name = "tta",
    version,
    about = "Test-time augmentation for object detection"
)]
pub struct Cli {
    /// Worker threads; 0 or unset uses all cores.
    #[arg(long, global = true, env = "TTA_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a view plan (target sizes x flips).
    Plan(PlanArgs),
    /// Map per-view detection files to the original frame and fuse them.
    Fuse(FuseArgs),
    /// Compute AP against a dataset.
    Eval(EvalArgs),
    /// Compare view strategies on synthetic data.
    SynthBench(BenchArgs),
    /// Run a detector over every view of every image, then fuse.
    Run(RunArgs),
    /// Answer detector protocol requests on stdin with the synthetic detector.
    #[command(hide = true)]
    ServeSynth(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIZES)]
    pub sizes: Vec<u32>,
    /// Flip variants: none, h, v, hv.
    #[arg(long, value_delimiter = ',', default_values = ["none", "h"], conflicts_with = "no_flip")]
    pub flips: Vec<String>,
    /// Same as --flips none.
    #[arg(long)]
    pub no_flip: bool,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FusionArgs {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iou_thr: Option<f64>,
    #[arg(long)]
    pub skip_box_thr: Option<f64>,
    /// none or scale_by_views.
    #[arg(long)]
    pub conf_mode: Option<ConfMode>,
    /// One weight per view, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
}

impl FusionArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            Some(path) => load_toml(path)?,
            None => RunConfig::default(),
        };
        apply_fusion_flags(&mut cfg.fusion, self);
        cfg.fusion.validate()?;
        Ok(cfg)
    }
}

fn apply_fusion_flags(f: &mut FusionConfig, args: &FusionArgs) {
    if let Some(v) = args.iou_thr {
        f.iou_thr = v;
    }
    if let Some(v) = args.skip_box_thr {
        f.skip_box_thr = v;
    }
    if let Some(v) = args.conf_mode {
        f.conf_mode = v;
    }
    if let Some(v) = &args.weights {
        f.view_weights = v.clone();
    }
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Detection files, one per view; file order defines view order.
    #[arg(required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Dataset providing image sizes.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub fusion: FusionArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// TOML run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iou_thr: Option<f64>,
    /// Keep at most this many detections per image and category.
    #[arg(long)]
    pub max_dets: Option<usize>,
    /// Also write the machine-readable report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// TOML bench configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_images: Option<usize>,
    /// Only run these strategies, by name.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<String>>,
    /// Use a perfect detector.
    #[arg(long)]
    pub noiseless: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Plan file written by `tta plan`; defaults to the config plan, then the built-in plan.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Detector executable speaking the line protocol.
    #[arg(
        long,
        conflicts_with = "view_files",
        required_unless_present = "view_files"
    )]
    pub detector: Option<String>,
    /// Argument passed to the detector executable; repeatable.
    #[arg(long = "detector-arg", allow_hyphen_values = true)]
    pub detector_args: Vec<String>,
    /// Pre-computed per-view detection files with view headers.
    #[arg(long, num_args = 1..)]
    pub view_files: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Fuse the views that succeeded instead of aborting the image.
    #[arg(long)]
    pub lenient: bool,
    #[command(flatten)]
    pub fusion: FusionArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// TOML bench configuration supplying the noise model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noiseless: bool,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Eval(a) => cmd_eval(a),
        Command::SynthBench(a) => cmd_bench(a),
        Command::Run(a) => cmd_run(a),
        Command::ServeSynth(a) => cmd_serve(a),
    })
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let spec = PlanSpec {
        sizes: a.sizes,
        flips: if a.no_flip {
            vec!["none".into()]
        } else {
            a.flips
        },
    };
    let text = plan_to_string(&spec.to_plan()?);
    match a.out {
        Some(path) => write_text(&path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn print_stats(stats: &TtaStats) {
    println!(
        "views {} ok / {} failed, boxes in {}, dropped in padding {}, fused boxes {}",
        stats.views_ok,
        stats.views_failed,
        stats.boxes_in,
        stats.dropped_in_padding,
        stats.boxes_out
    );
}

fn cmd_fuse(a: FuseArgs) -> Result<()> {
    let cfg = a.fusion.run_config()?;
    log::info!("effective fusion config: {:?}", cfg.fusion);
    let dataset = read_dataset(&a.dataset)?;
    let inputs = a
        .inputs
        .iter()
        .map(|p| read_detections(p))
        .collect::<Result<Vec<_>>>()?;
    let (fused, stats) = fuse_files(&inputs, &dataset, &cfg.fusion)?;
    write_detections(&a.out, &fused)?;
    print_stats(&stats);
    Ok(())
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4} ({:.2}%)", x * 100.0))
}

pub fn report_text(report: &EvalReport) -> String {
    let mut out = format!("AP@{:.2}  {}\n", report.iou_thr, fmt_ap(Some(report.ap50)));
    for b in SizeBucket::ALL {
        let v = report.per_bucket.get(&b).copied().flatten();
        out.push_str(&format!("  {:<7} {}\n", b.name(), fmt_ap(v)));
    }
    if report.per_category.len() > 1 {
        for (cat, ap) in &report.per_category {
            out.push_str(&format!("  cat {cat:<3} {}\n", fmt_ap(Some(*ap))));
        }
    }
    let c = report.counts;
    out.push_str(&format!("tp {}  fp {}  fn {}\n", c.tp, c.fp, c.fn_));
    out
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut params = match &a.config {
        Some(path) => load_toml::<RunConfig>(path)?.eval,
        None => Default::default(),
    };
    if let Some(v) = a.iou_thr {
        params.iou_thr = v;
    }
    if a.max_dets.is_some() {
        params.max_dets = a.max_dets;
    }
    let dataset = read_dataset(&a.dataset)?;
    let detections = read_detections(&a.detections)?;
    let report = evaluate_file(&detections, &dataset, &params)?;
    if let Some(path) = &a.report {
        write_text(path, &report_to_string(&report))?;
    }
    print!("{}", report_text(&report));
    Ok(())
}

fn bench_config(
    config: Option<&Path>,
    seed: Option<u64>,
    n_images: Option<usize>,
    noiseless: bool,
) -> Result<BenchConfig> {
    let mut cfg: BenchConfig = match config {
        Some(path) => load_toml(path)?,
        None => BenchConfig::default(),
    };
    if let Some(s) = seed {
        cfg.synth.rng_seed = s;
    }
    if let Some(n) = n_images {
        cfg.synth.n_images = n;
    }
    if noiseless {
        cfg.synth.detector_noise = NoiseModel::noiseless();
    }
    Ok(cfg)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut cfg = bench_config(a.config.as_deref(), a.seed, a.n_images, a.noiseless)?;
    if let Some(names) = &a.strategies {
        if let Some(missing) = names
            .iter()
            .find(|n| !cfg.strategies.iter().any(|s| &s.name == *n))
        {
            return Err(Error::validation(format!("no strategy named '{missing}'")));
        }
        cfg.strategies.retain(|s| names.contains(&s.name));
    }
    let result = run_bench(&cfg, &a.out_dir)?;
    print!("{}", table_text(&result));
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = a.fusion.run_config()?;
    cfg.lenient |= a.lenient;
    let plan = match &a.plan {
        Some(path) => read_plan(path)?,
        None => cfg.view_plan()?,
    };
    let dataset = read_dataset(&a.dataset)?;
    let detector: Box<dyn DetectorAdapter> = match &a.detector {
        Some(program) => Box::new(SubprocessDetector::spawn(program, &a.detector_args)?),
        None => {
            let files = a
                .view_files
                .iter()
                .map(|p| read_detections(p))
                .collect::<Result<Vec<_>>>()?;
            Box::new(FileDetector::new(&files, &dataset)?)
        }
    };
    let (fused, stats) = run_dataset(&dataset, &plan, detector.as_ref(), &cfg.fusion, cfg.lenient)?;
    write_detections(&a.out, &fused)?;
    print_stats(&stats);
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let cfg = bench_config(a.config.as_deref(), a.seed, None, a.noiseless)?;
    let dataset = read_dataset(&a.dataset)?;
    let detector = SyntheticDetector::from_config(&cfg.synth, &dataset.ground_truths)?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve(&detector, stdin.lock(), stdout.lock())?;
    std::io::stdout()
        .flush()
        .map_err(|e| Error::io("<stdout>", e))
}
