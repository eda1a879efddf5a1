//! Test-time augmentation for object detection.
//!
//! A detector is run on several letterboxed, optionally flipped views of each
//! image. The per-view boxes are mapped back to the original frame, merged
//! with weighted boxes fusion and scored with AP at IoU 0.5.
//!
//! ```
//! use tta_core::{wbf, BBox, Detection, FusionConfig};
//!
//! let a = Detection::new(BBox::new(0.0, 0.0, 10.0, 10.0)?, 0.9, 1)?.with_view(Some(0));
//! let b = Detection::new(BBox::new(1.0, 0.0, 11.0, 10.0)?, 0.6, 1)?.with_view(Some(1));
//! let fused = wbf(&[a, b], 2, &FusionConfig::default())?;
//! assert_eq!(fused.len(), 1);
//! # Ok::<(), tta_core::Error>(())
//! ```

pub mod adapters;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod synth;
pub mod tta;

pub use error::{Error, Result};
pub use eval::{average_precision, evaluate, EvalParams, EvalReport, GroundTruth, Prediction};
pub use fusion::{nms, soft_nms, wbf, ConfMode, Detection, FusedDetection, FusionConfig};
pub use geometry::{BBox, ImageDims};
pub use synth::{NoiseModel, SynthConfig};
pub use tta::{default_view_plan, run_tta, DetectorAdapter, ImageRecord, ViewPlan, ViewSpec};
