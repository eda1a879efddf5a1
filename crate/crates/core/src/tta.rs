//! Test-time augmentation: view planning, the letterbox frame of each view,
//! inverse mapping of view-frame detections, and the per-image pipeline
//! (detect every view, map back, fuse).

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{wbf, Detection, FusedDetection, FusionConfig};
use crate::geometry::{clamp_to_image, flip_h, flip_v, BBox, ImageDims};

pub const MIN_TARGET_SIZE: u32 = 32;

/// Resolutions of the default multiscale plan.
pub const DEFAULT_SIZES: [u32; 3] = [3200, 3360, 3520];

/// One augmented inference configuration: a square input side and flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawViewSpec")]
pub struct ViewSpec {
    target_size: u32,
    hflip: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    vflip: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawViewSpec {
    target_size: u32,
    hflip: bool,
    #[serde(default)]
    vflip: bool,
}

impl TryFrom<RawViewSpec> for ViewSpec {
    type Error = Error;

    fn try_from(raw: RawViewSpec) -> Result<Self> {
        ViewSpec::with_flips(raw.target_size, raw.hflip, raw.vflip)
    }
}

impl ViewSpec {
    pub fn new(target_size: u32, hflip: bool) -> Result<Self> {
        Self::with_flips(target_size, hflip, false)
    }

    /// Vertical flipping is an extension; the standard plans never use it.
    pub fn with_flips(target_size: u32, hflip: bool, vflip: bool) -> Result<Self> {
        if target_size < MIN_TARGET_SIZE {
            return Err(Error::invalid(format!(
                "target_size {target_size} below minimum {MIN_TARGET_SIZE}"
            )));
        }
        Ok(Self {
            target_size,
            hflip,
            vflip,
        })
    }

    #[inline]
    pub fn target_size(&self) -> u32 {
        self.target_size
    }

    #[inline]
    pub fn hflip(&self) -> bool {
        self.hflip
    }

    #[inline]
    pub fn vflip(&self) -> bool {
        self.vflip
    }

    fn frame(&self) -> ImageDims {
        ImageDims::square(self.target_size).expect("target_size validated")
    }
}

impl fmt::Display for ViewSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.target_size)?;
        if self.hflip {
            f.write_str("+hflip")?;
        }
        if self.vflip {
            f.write_str("+vflip")?;
        }
        Ok(())
    }
}

/// Flip variants a plan can be built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
    Both,
}

impl Flip {
    fn flags(self) -> (bool, bool) {
        match self {
            Flip::None => (false, false),
            Flip::Horizontal => (true, false),
            Flip::Vertical => (false, true),
            Flip::Both => (true, true),
        }
    }
}

impl std::str::FromStr for Flip {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Flip::None),
            "h" | "hflip" => Ok(Flip::Horizontal),
            "v" | "vflip" => Ok(Flip::Vertical),
            "hv" | "both" => Ok(Flip::Both),
            other => Err(Error::invalid(format!(
                "unknown flip '{other}', expected none, h, v or hv"
            ))),
        }
    }
}

/// Ordered, duplicate-free, non-empty list of views.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ViewPlan {
    views: Vec<ViewSpec>,
}

impl ViewPlan {
    pub fn new(views: Vec<ViewSpec>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::validation("view plan is empty"));
        }
        let mut seen = HashSet::new();
        for v in &views {
            if !seen.insert(*v) {
                return Err(Error::validation(format!("duplicate view {v} in plan")));
            }
        }
        Ok(Self { views })
    }

    /// Cartesian product of sizes and flips, sizes outermost, in the given order.
    pub fn grid(sizes: &[u32], flips: &[Flip]) -> Result<Self> {
        let mut views = Vec::with_capacity(sizes.len() * flips.len());
        for &size in sizes {
            for &flip in flips {
                let (h, v) = flip.flags();
                views.push(ViewSpec::with_flips(size, h, v)?);
            }
        }
        Self::new(views)
    }

    pub fn single(target_size: u32) -> Result<Self> {
        Self::grid(&[target_size], &[Flip::None])
    }

    pub fn views(&self) -> &[ViewSpec] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

impl<'de> Deserialize<'de> for ViewPlan {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            views: Vec<ViewSpec>,
        }
        let raw = Raw::deserialize(d)?;
        ViewPlan::new(raw.views).map_err(serde::de::Error::custom)
    }
}

/// {3200, 3360, 3520} x {no flip, horizontal flip}: six views, sizes
/// ascending, unflipped first.
pub fn default_view_plan() -> ViewPlan {
    ViewPlan::grid(&DEFAULT_SIZES, &[Flip::None, Flip::Horizontal]).expect("static plan is valid")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub dims: ImageDims,
    pub file_name: String,
}

/// Aspect-preserving resize into a `target x target` square with symmetric
/// padding. Derived only from the image dims and the view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
}

impl Letterbox {
    pub fn new(dims: ImageDims, target_size: u32) -> Self {
        let t = f64::from(target_size);
        let (w, h) = (f64::from(dims.width()), f64::from(dims.height()));
        let scale = (t / w).min(t / h);
        Self {
            scale,
            // rounding can push the long side a hair past the frame
            pad_x: ((t - w * scale) / 2.0).max(0.0),
            pad_y: ((t - h * scale) / 2.0).max(0.0),
        }
    }

    /// Image content region inside the view frame, unflipped.
    fn content(&self, dims: ImageDims) -> [f64; 4] {
        [
            self.pad_x,
            self.pad_y,
            self.pad_x + f64::from(dims.width()) * self.scale,
            self.pad_y + f64::from(dims.height()) * self.scale,
        ]
    }
}

fn apply_flips(b: &BBox, view: &ViewSpec) -> BBox {
    let frame = view.frame();
    let mut out = *b;
    if view.hflip {
        out = flip_h(&out, frame);
    }
    if view.vflip {
        out = flip_v(&out, frame);
    }
    out
}

/// Maps a box in original-image coordinates into the frame of `view`.
pub fn original_to_view(b: &BBox, view: &ViewSpec, dims: ImageDims) -> BBox {
    let lb = Letterbox::new(dims, view.target_size);
    let resized = BBox::new(
        b.x1() * lb.scale + lb.pad_x,
        b.y1() * lb.scale + lb.pad_y,
        b.x2() * lb.scale + lb.pad_x,
        b.y2() * lb.scale + lb.pad_y,
    )
    .expect("positive affine map keeps boxes canonical");
    apply_flips(&resized, view)
}

/// Maps a box from the frame of `view` back into original-image coordinates,
/// clamped to the image. `None` when the box lies entirely in the padding.
pub fn box_to_original(b: &BBox, view: &ViewSpec, dims: ImageDims) -> Option<BBox> {
    let lb = Letterbox::new(dims, view.target_size);
    let unflipped = apply_flips(b, view);
    let [cx1, cy1, cx2, cy2] = lb.content(dims);
    if unflipped.x2() <= cx1
        || unflipped.x1() >= cx2
        || unflipped.y2() <= cy1
        || unflipped.y1() >= cy2
    {
        return None;
    }
    let restored = BBox::new(
        (unflipped.x1() - lb.pad_x) / lb.scale,
        (unflipped.y1() - lb.pad_y) / lb.scale,
        (unflipped.x2() - lb.pad_x) / lb.scale,
        (unflipped.y2() - lb.pad_y) / lb.scale,
    )
    .expect("positive affine map keeps boxes canonical");
    Some(clamp_to_image(&restored, dims))
}

pub fn view_to_original(d: &Detection, view: &ViewSpec, dims: ImageDims) -> Option<Detection> {
    box_to_original(d.bbox(), view, dims).map(|b| d.with_box(b))
}

/// Anything that can produce view-frame detections for an image.
pub trait DetectorAdapter: Sync {
    fn detect(&self, image: &ImageRecord, view: &ViewSpec) -> Result<Vec<Detection>>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TtaStats {
    pub views_ok: usize,
    pub views_failed: usize,
    pub boxes_in: usize,
    pub dropped_in_padding: usize,
    pub boxes_out: usize,
}

impl std::ops::AddAssign for TtaStats {
    fn add_assign(&mut self, o: Self) {
        self.views_ok += o.views_ok;
        self.views_failed += o.views_failed;
        self.boxes_in += o.boxes_in;
        self.dropped_in_padding += o.dropped_in_padding;
        self.boxes_out += o.boxes_out;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtaOutput {
    pub fused: Vec<FusedDetection>,
    pub stats: TtaStats,
}

/// Maps view-frame detections to the original frame, tagging them with
/// `source_view` and counting the ones dropped in padding.
pub fn map_view_detections(
    detections: &[Detection],
    view: &ViewSpec,
    source_view: u32,
    dims: ImageDims,
    stats: &mut TtaStats,
) -> Vec<Detection> {
    stats.boxes_in += detections.len();
    let mut out = Vec::with_capacity(detections.len());
    for d in detections {
        match view_to_original(d, view, dims) {
            Some(m) => out.push(m.with_view(Some(source_view))),
            None => stats.dropped_in_padding += 1,
        }
    }
    out
}

/// Runs every view of `plan` through `detector`, maps the results into the
/// original frame and fuses them with `n_views = plan.len()`.
///
/// A failing view aborts the image unless `lenient` is set, in which case the
/// failed views are skipped and fusion uses the number of successful views.
pub fn run_tta(
    image: &ImageRecord,
    plan: &ViewPlan,
    detector: &dyn DetectorAdapter,
    cfg: &FusionConfig,
    lenient: bool,
) -> Result<TtaOutput> {
    let mut stats = TtaStats::default();
    let mut mapped = Vec::new();
    let mut weights = Vec::new();
    let mut first_err = None;
    for (idx, view) in plan.views().iter().enumerate() {
        let raw = match detector.detect(image, view) {
            Ok(raw) => raw,
            Err(e) => {
                let err = match e {
                    Error::Detector { .. } => e,
                    other => Error::Detector {
                        view: *view,
                        message: other.to_string(),
                    },
                };
                if !lenient {
                    return Err(err);
                }
                log::warn!("image {}: skipping view {view}: {err}", image.image_id);
                stats.views_failed += 1;
                first_err.get_or_insert(err);
                continue;
            }
        };
        let slot = stats.views_ok as u32;
        stats.views_ok += 1;
        if let Some(w) = cfg.view_weights.get(idx) {
            weights.push(*w);
        }
        mapped.extend(map_view_detections(
            &raw, view, slot, image.dims, &mut stats,
        ));
    }
    if stats.views_ok == 0 {
        return Err(first_err.expect("plan is non-empty"));
    }
    let cfg = if cfg.view_weights.is_empty() || stats.views_failed == 0 {
        cfg.clone()
    } else {
        FusionConfig {
            view_weights: weights,
            ..cfg.clone()
        }
    };
    let fused = wbf(&mapped, stats.views_ok, &cfg)?;
    stats.boxes_out = fused.len();
    Ok(TtaOutput { fused, stats })
}
