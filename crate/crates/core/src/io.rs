//! On-disk formats.
//!
//! * Dataset: a COCO annotation document (`images`, `annotations`,
//!   `categories`), boxes as `[x, y, width, height]`.
//! * Detections: line-delimited JSON. The first line is a header
//!   `{"schema_version", "kind": "detections", "frame", "view"}`, followed by
//!   one COCO result object per line. Plain COCO result arrays and headerless
//!   line files are accepted on input and read as `frame = "original"`.
//! * View plans and evaluation reports: single-line JSON documents carrying
//!   `schema_version`.
//!
//! The `*File` types mirror the file contents exactly, so reading what was
//! written yields the same value. Corner-form boxes exist only after
//! conversion at this boundary (`x2 = x + w`).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalReport, GroundTruth, Prediction};
use crate::fusion::Detection;
use crate::geometry::{BBox, ImageDims};
use crate::tta::{ImageRecord, ViewPlan, ViewSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
    /// Non-standard flag some exporters use in place of `iscrowd`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ignore: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

/// COCO-style annotation document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Validated in-memory dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub ground_truths: Vec<GroundTruth>,
    pub categories: Vec<CocoCategory>,
}

impl Dataset {
    pub fn image(&self, image_id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn dims_by_id(&self) -> BTreeMap<u64, ImageDims> {
        self.images.iter().map(|i| (i.image_id, i.dims)).collect()
    }

    pub fn to_file(&self) -> DatasetFile {
        DatasetFile {
            images: self
                .images
                .iter()
                .map(|i| CocoImage {
                    id: i.image_id,
                    width: i.dims.width(),
                    height: i.dims.height(),
                    file_name: i.file_name.clone(),
                })
                .collect(),
            annotations: self
                .ground_truths
                .iter()
                .enumerate()
                .map(|(k, g)| CocoAnnotation {
                    id: k as u64 + 1,
                    image_id: g.image_id,
                    category_id: g.category_id,
                    bbox: g.bbox.to_xywh(),
                    area: g.bbox.area(),
                    iscrowd: u8::from(g.ignore),
                    ignore: None,
                })
                .collect(),
            categories: self.categories.clone(),
        }
    }
}

impl DatasetFile {
    /// Checks referential integrity and converts to the internal model.
    pub fn into_dataset(self) -> Result<Dataset> {
        let mut image_ids = HashSet::new();
        let mut images = Vec::with_capacity(self.images.len());
        for img in &self.images {
            if !image_ids.insert(img.id) {
                return Err(Error::validation(format!("duplicate image id {}", img.id)));
            }
            images.push(ImageRecord {
                image_id: img.id,
                dims: ImageDims::new(img.width, img.height)?,
                file_name: img.file_name.clone(),
            });
        }
        let category_ids: HashSet<u32> = self.categories.iter().map(|c| c.id).collect();
        let mut ground_truths = Vec::with_capacity(self.annotations.len());
        for ann in &self.annotations {
            if !image_ids.contains(&ann.image_id) {
                return Err(Error::validation(format!(
                    "annotation {} refers to unknown image {}",
                    ann.id, ann.image_id
                )));
            }
            if !category_ids.contains(&ann.category_id) {
                return Err(Error::validation(format!(
                    "annotation {} refers to unknown category {}",
                    ann.id, ann.category_id
                )));
            }
            let [x, y, w, h] = ann.bbox;
            let bbox = BBox::from_xywh(x, y, w, h)
                .map_err(|e| Error::validation(format!("annotation {}: {e}", ann.id)))?;
            ground_truths.push(GroundTruth {
                image_id: ann.image_id,
                bbox,
                category_id: ann.category_id,
                ignore: ann.iscrowd != 0 || ann.ignore.unwrap_or(0) != 0,
            });
        }
        Ok(Dataset {
            images,
            ground_truths,
            categories: self.categories,
        })
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = read_to_string(path)?;
    let file: DatasetFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    file.into_dataset()
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut bytes = serde_json::to_vec(&dataset.to_file()).expect("dataset serializes");
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// Coordinates in the letterboxed frame of the header's view.
    View,
    #[default]
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionHeader {
    pub schema_version: u32,
    pub kind: String,
    pub frame: Frame,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<ViewSpec>,
}

impl DetectionHeader {
    pub fn original() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: "detections".into(),
            frame: Frame::Original,
            view: None,
        }
    }

    pub fn for_view(view: ViewSpec) -> Self {
        Self {
            frame: Frame::View,
            view: Some(view),
            ..Self::original()
        }
    }
}

/// One COCO result entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [f64; 4],
    pub score: f64,
}

impl DetectionRecord {
    pub fn from_detection(image_id: u64, d: &Detection) -> Self {
        Self {
            image_id,
            category_id: d.category_id(),
            bbox: d.bbox().to_xywh(),
            score: d.score(),
        }
    }

    pub fn to_detection(&self) -> Result<Detection> {
        let [x, y, w, h] = self.bbox;
        Detection::new(BBox::from_xywh(x, y, w, h)?, self.score, self.category_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFile {
    pub header: DetectionHeader,
    pub records: Vec<DetectionRecord>,
}

impl DetectionFile {
    pub fn validate(&self) -> Result<()> {
        if self.header.frame == Frame::View && self.header.view.is_none() {
            return Err(Error::validation(
                "detections are in the view frame but the header names no view",
            ));
        }
        for r in &self.records {
            r.to_detection()
                .map_err(|e| Error::validation(format!("image {}: {e}", r.image_id)))?;
        }
        Ok(())
    }

    /// Detections grouped by image id, in file order within each image.
    pub fn by_image(&self) -> Result<BTreeMap<u64, Vec<Detection>>> {
        let mut out: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.image_id).or_default().push(r.to_detection()?);
        }
        Ok(out)
    }

    pub fn predictions(&self) -> Result<Vec<Prediction>> {
        self.records
            .iter()
            .map(|r| {
                Ok(Prediction {
                    image_id: r.image_id,
                    detection: r.to_detection()?,
                })
            })
            .collect()
    }

    pub fn image_ids(&self) -> BTreeSet<u64> {
        self.records.iter().map(|r| r.image_id).collect()
    }
}

pub fn read_detections(path: &Path) -> Result<DetectionFile> {
    let text = read_to_string(path)?;
    let file = parse_detections(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path, message),
        Error::Validation(message) | Error::InvalidArgument(message) => {
            Error::validation(format!("{}: {message}", path.display()))
        }
        other => other,
    })?;
    Ok(file)
}

fn parse_detections(text: &str) -> Result<DetectionFile> {
    let bad = |line: usize, e: serde_json::Error| Error::parse("", format!("line {line}: {e}"));
    let file = if text.trim_start().starts_with('[') {
        let records: Vec<DetectionRecord> = serde_json::from_str(text).map_err(|e| bad(1, e))?;
        DetectionFile {
            header: DetectionHeader::original(),
            records,
        }
    } else {
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if header.is_none() && records.is_empty() {
                let value: serde_json::Value =
                    serde_json::from_str(line).map_err(|e| bad(i + 1, e))?;
                if value.get("schema_version").is_some() {
                    let h: DetectionHeader =
                        serde_json::from_value(value).map_err(|e| bad(i + 1, e))?;
                    if h.schema_version != SCHEMA_VERSION {
                        return Err(Error::validation(format!(
                            "unsupported schema_version {}",
                            h.schema_version
                        )));
                    }
                    header = Some(h);
                    continue;
                }
            }
            records.push(serde_json::from_str(line).map_err(|e| bad(i + 1, e))?);
        }
        DetectionFile {
            header: header.unwrap_or_else(DetectionHeader::original),
            records,
        }
    };
    file.validate()?;
    Ok(file)
}

pub fn write_detections(path: &Path, file: &DetectionFile) -> Result<()> {
    let mut out = serde_json::to_string(&file.header).expect("header serializes");
    out.push('\n');
    for r in &file.records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema_version: u32,
    pub views: Vec<ViewSpec>,
}

pub fn plan_to_string(plan: &ViewPlan) -> String {
    let doc = PlanFile {
        schema_version: SCHEMA_VERSION,
        views: plan.views().to_vec(),
    };
    serde_json::to_string(&doc).expect("plan serializes") + "\n"
}

pub fn read_plan(path: &Path) -> Result<ViewPlan> {
    let text = read_to_string(path)?;
    let doc: PlanFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    ViewPlan::new(doc.views)
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    schema_version: u32,
    kind: &'static str,
    ap50_percent: f64,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn report_to_string(report: &EvalReport) -> String {
    let doc = ReportDoc {
        schema_version: SCHEMA_VERSION,
        kind: "eval_report",
        ap50_percent: report.ap50 * 100.0,
        report,
    };
    serde_json::to_string(&doc).expect("report serializes") + "\n"
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}
