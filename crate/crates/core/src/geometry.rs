//! Axis-aligned box arithmetic in continuous pixel coordinates.
//!
//! Origin is the top-left corner, x grows right and y grows down. A box
//! `[x1, y1, x2, y2]` has width `x2 - x1`; there is no inclusive `+1`.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Axis-aligned rectangle with `x1 <= x2`, `y1 <= y2` and finite coordinates.
#[derive(Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    /// Builds a canonical box. Inverted corners are rejected, never swapped.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::invalid(format!(
                "box has non-finite coordinates [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        if x2 < x1 || y2 < y1 {
            return Err(Error::invalid(format!(
                "box corners are inverted [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from the COCO `[x, y, width, height]` form.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if w < 0.0 || h < 0.0 {
            return Err(Error::invalid(format!(
                "bbox has negative extent [{x}, {y}, {w}, {h}]"
            )));
        }
        Self::new(x, y, x + w, y + h)
    }

    /// Internal constructor for results of operations that preserve the invariant.
    fn raw(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x1 <= x2 && y1 <= y2, "[{x1}, {y1}, {x2}, {y2}]");
        Self { x1, y1, x2, y2 }
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.x1
    }

    #[inline]
    pub fn y1(&self) -> f64 {
        self.y1
    }

    #[inline]
    pub fn x2(&self) -> f64 {
        self.x2
    }

    #[inline]
    pub fn y2(&self) -> f64 {
        self.y2
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// COCO `[x, y, width, height]` form. Extents are nudged by at most a few
    /// ulps so that `x + width` reproduces `x2` exactly where possible.
    pub fn to_xywh(&self) -> [f64; 4] {
        [
            self.x1,
            self.y1,
            exact_extent(self.x1, self.x2),
            exact_extent(self.y1, self.y2),
        ]
    }

    pub fn area(&self) -> f64 {
        area(self)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    /// Lexicographic order on `(x1, y1, x2, y2)`, used as a deterministic tie-break.
    pub fn key_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.x1
            .total_cmp(&other.x1)
            .then(self.y1.total_cmp(&other.y1))
            .then(self.x2.total_cmp(&other.x2))
            .then(self.y2.total_cmp(&other.y2))
    }
}

impl fmt::Debug for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(deserializer)?;
        BBox::new(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

fn exact_extent(lo: f64, hi: f64) -> f64 {
    let mut w = hi - lo;
    for _ in 0..4 {
        let end = lo + w;
        if end == hi {
            return w;
        }
        w = if end < hi { w.next_up() } else { w.next_down() };
    }
    (hi - lo).max(0.0)
}

/// Image extent in pixels, both sides at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    width: u32,
    height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn square(side: u32) -> Result<Self> {
        Self::new(side, side)
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }
}

pub fn area(b: &BBox) -> f64 {
    b.width() * b.height()
}

/// Intersection over union. Two zero-area boxes have IoU 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Mirrors a box about the vertical centre line of an image `dims.width()` wide.
pub fn flip_h(b: &BBox, dims: ImageDims) -> BBox {
    let w = f64::from(dims.width);
    BBox::raw(w - b.x2, b.y1, w - b.x1, b.y2)
}

/// Mirrors a box about the horizontal centre line of an image `dims.height()` tall.
pub fn flip_v(b: &BBox, dims: ImageDims) -> BBox {
    let h = f64::from(dims.height);
    BBox::raw(b.x1, h - b.y2, b.x2, h - b.y1)
}

pub fn scale(b: &BBox, sx: f64, sy: f64) -> Result<BBox> {
    if !(sx > 0.0 && sx.is_finite() && sy > 0.0 && sy.is_finite()) {
        return Err(Error::invalid(format!(
            "scale factors must be positive and finite, got ({sx}, {sy})"
        )));
    }
    BBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy)
}

pub fn translate(b: &BBox, dx: f64, dy: f64) -> Result<BBox> {
    BBox::new(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy)
}

/// Clips into `[0, width] x [0, height]`. Boxes fully outside collapse onto the
/// nearest border with zero area.
pub fn clamp_to_image(b: &BBox, dims: ImageDims) -> BBox {
    let w = f64::from(dims.width);
    let h = f64::from(dims.height);
    BBox::raw(
        b.x1.clamp(0.0, w),
        b.y1.clamp(0.0, h),
        b.x2.clamp(0.0, w),
        b.y2.clamp(0.0, h),
    )
}
