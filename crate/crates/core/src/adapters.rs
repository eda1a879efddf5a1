//! Detector adapters backed by files and by an external process.
//!
//! # Subprocess protocol
//!
//! The child process reads one JSON request per line on stdin and answers
//! each with exactly one JSON line on stdout, in order:
//!
//! ```text
//! -> {"image_id":12,"file_name":"a.jpg","width":3840,"height":2160,"target_size":3200,"hflip":true}
//! <- {"detections":[[x1,y1,x2,y2,score,category_id], ...]}
//! <- {"error":"model failed to load"}
//! ```
//!
//! `vflip` is sent only when set. Boxes are corner form in the view frame
//! (the `target_size` square letterbox of the image, flipped as requested).
//! The child lives for the whole run; closing its stdin asks it to exit.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Detection;
use crate::geometry::BBox;
use crate::io::{Dataset, DetectionFile, Frame};
use crate::tta::{original_to_view, DetectorAdapter, ImageRecord, ViewSpec};

/// Serves pre-computed per-view detection files.
pub struct FileDetector {
    views: BTreeMap<ViewSpec, BTreeMap<u64, Vec<Detection>>>,
}

impl FileDetector {
    /// Each file must name its view in the header. Original-frame files are
    /// mapped forward into their view so the adapter contract holds.
    pub fn new(files: &[DetectionFile], dataset: &Dataset) -> Result<Self> {
        let dims = dataset.dims_by_id();
        let mut views = BTreeMap::new();
        for file in files {
            let view = file.header.view.ok_or_else(|| {
                Error::validation("detection file used as a view source has no view header")
            })?;
            let mut per_image = file.by_image()?;
            if file.header.frame == Frame::Original {
                for (image_id, dets) in per_image.iter_mut() {
                    let d = *dims
                        .get(image_id)
                        .ok_or_else(|| Error::validation(format!("unknown image_id {image_id}")))?;
                    for det in dets.iter_mut() {
                        *det = det.with_box(original_to_view(det.bbox(), &view, d));
                    }
                }
            }
            if views.insert(view, per_image).is_some() {
                return Err(Error::validation(format!(
                    "two detection files for view {view}"
                )));
            }
        }
        Ok(Self { views })
    }
}

impl DetectorAdapter for FileDetector {
    fn detect(&self, image: &ImageRecord, view: &ViewSpec) -> Result<Vec<Detection>> {
        let per_image = self.views.get(view).ok_or_else(|| Error::Detector {
            view: *view,
            message: "no detection file for this view".into(),
        })?;
        Ok(per_image.get(&image.image_id).cloned().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub image_id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub target_size: u32,
    pub hflip: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub vflip: bool,
}

impl DetectRequest {
    pub fn new(image: &ImageRecord, view: &ViewSpec) -> Self {
        Self {
            image_id: image.image_id,
            file_name: image.file_name.clone(),
            width: image.dims.width(),
            height: image.dims.height(),
            target_size: view.target_size(),
            hflip: view.hflip(),
            vflip: view.vflip(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DetectResponse {
    Detections { detections: Vec<[f64; 6]> },
    Error { error: String },
}

impl DetectResponse {
    fn from_detections(dets: &[Detection]) -> Self {
        DetectResponse::Detections {
            detections: dets
                .iter()
                .map(|d| {
                    let [x1, y1, x2, y2] = d.bbox().to_array();
                    [x1, y1, x2, y2, d.score(), f64::from(d.category_id())]
                })
                .collect(),
        }
    }

    fn into_detections(self) -> std::result::Result<Vec<Detection>, String> {
        match self {
            DetectResponse::Error { error } => Err(error),
            DetectResponse::Detections { detections } => detections
                .into_iter()
                .map(|[x1, y1, x2, y2, score, cat]| {
                    if cat < 0.0 || cat.fract() != 0.0 || cat > f64::from(u32::MAX) {
                        return Err(format!("category_id {cat} is not a non-negative integer"));
                    }
                    BBox::new(x1, y1, x2, y2)
                        .and_then(|b| Detection::new(b, score, cat as u32))
                        .map_err(|e| e.to_string())
                })
                .collect(),
        }
    }
}

struct Channel {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// Runs an external detector speaking the line protocol described above.
pub struct SubprocessDetector {
    channel: Mutex<Channel>,
}

impl SubprocessDetector {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        Ok(Self {
            channel: Mutex::new(Channel {
                child,
                stdin,
                stdout,
            }),
        })
    }
}

impl DetectorAdapter for SubprocessDetector {
    fn detect(&self, image: &ImageRecord, view: &ViewSpec) -> Result<Vec<Detection>> {
        let fail = |message: String| Error::Detector {
            view: *view,
            message,
        };
        let mut ch = self.channel.lock().unwrap_or_else(|p| p.into_inner());
        let request =
            serde_json::to_string(&DetectRequest::new(image, view)).expect("request serializes");
        let stdin = ch
            .stdin
            .as_mut()
            .ok_or_else(|| fail("detector stdin closed".into()))?;
        writeln!(stdin, "{request}")
            .and_then(|_| stdin.flush())
            .map_err(|e| fail(format!("writing request: {e}")))?;
        let mut line = String::new();
        let n = ch
            .stdout
            .read_line(&mut line)
            .map_err(|e| fail(format!("reading response: {e}")))?;
        if n == 0 {
            return Err(fail("detector process closed its output".into()));
        }
        let response: DetectResponse =
            serde_json::from_str(&line).map_err(|e| fail(format!("malformed response: {e}")))?;
        response
            .into_detections()
            .map_err(|m| fail(format!("image {}: {m}", image.image_id)))
    }
}

impl Drop for SubprocessDetector {
    fn drop(&mut self) {
        let ch = self.channel.get_mut().unwrap_or_else(|p| p.into_inner());
        ch.stdin.take();
        let _ = ch.child.wait();
    }
}

/// Answers protocol requests from `input` with `detector`, one line each,
/// until end of input. Failures are reported in-band as `{"error": ...}`.
pub fn serve(
    detector: &dyn DetectorAdapter,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<()> {
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<DetectRequest>(&line) {
            Err(e) => DetectResponse::Error {
                error: format!("malformed request: {e}"),
            },
            Ok(req) => match answer(detector, &req) {
                Ok(dets) => DetectResponse::from_detections(&dets),
                Err(e) => DetectResponse::Error {
                    error: e.to_string(),
                },
            },
        };
        let text = serde_json::to_string(&response).expect("response serializes");
        writeln!(output, "{text}")
            .and_then(|_| output.flush())
            .map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

fn answer(detector: &dyn DetectorAdapter, req: &DetectRequest) -> Result<Vec<Detection>> {
    let image = ImageRecord {
        image_id: req.image_id,
        dims: crate::geometry::ImageDims::new(req.width, req.height)?,
        file_name: req.file_name.clone(),
    };
    let view = ViewSpec::with_flips(req.target_size, req.hflip, req.vflip)?;
    detector.detect(&image, &view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{DetectionHeader, DetectionRecord};

    fn dataset() -> Dataset {
        Dataset {
            images: vec![ImageRecord {
                image_id: 1,
                dims: crate::geometry::ImageDims::new(1600, 1600).unwrap(),
                file_name: "a.jpg".into(),
            }],
            ground_truths: vec![],
            categories: vec![],
        }
    }

    #[test]
    fn file_detector_serves_views() {
        let view = ViewSpec::new(3200, false).unwrap();
        let file = DetectionFile {
            header: DetectionHeader::for_view(view),
            records: vec![DetectionRecord {
                image_id: 1,
                category_id: 1,
                bbox: [200.0, 200.0, 200.0, 200.0],
                score: 0.9,
            }],
        };
        let det = FileDetector::new(&[file], &dataset()).unwrap();
        let img = &dataset().images[0];
        assert_eq!(det.detect(img, &view).unwrap().len(), 1);
        let other = ViewSpec::new(3200, true).unwrap();
        assert!(matches!(
            det.detect(img, &other),
            Err(Error::Detector { .. })
        ));
    }

    #[test]
    fn file_detector_maps_original_frame_forward() {
        let view = ViewSpec::new(3200, false).unwrap();
        let file = DetectionFile {
            header: DetectionHeader {
                view: Some(view),
                ..DetectionHeader::original()
            },
            records: vec![DetectionRecord {
                image_id: 1,
                category_id: 1,
                bbox: [100.0, 100.0, 100.0, 100.0],
                score: 0.9,
            }],
        };
        let det = FileDetector::new(&[file], &dataset()).unwrap();
        let out = det.detect(&dataset().images[0], &view).unwrap();
        assert_eq!(out[0].bbox().to_array(), [200.0, 200.0, 400.0, 400.0]);
    }

    struct Echo;

    impl DetectorAdapter for Echo {
        fn detect(&self, image: &ImageRecord, view: &ViewSpec) -> Result<Vec<Detection>> {
            if image.image_id == 0 {
                return Err(Error::invalid("no such image"));
            }
            let s = f64::from(view.target_size());
            Ok(vec![Detection::new(
                BBox::new(0.0, 0.0, s / 2.0, s / 4.0)?,
                0.5,
                3,
            )?])
        }
    }

    #[test]
    fn serve_answers_each_request() {
        let input = "{\"image_id\":5,\"file_name\":\"x\",\"width\":10,\"height\":10,\"target_size\":64,\"hflip\":false}\n\
                     not json\n\
                     {\"image_id\":0,\"file_name\":\"x\",\"width\":10,\"height\":10,\"target_size\":64,\"hflip\":true}\n";
        let mut out = Vec::new();
        serve(&Echo, input.as_bytes(), &mut out).unwrap();
        let lines: Vec<&str> = std::str::from_utf8(&out).unwrap().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], r#"{"detections":[[0.0,0.0,32.0,16.0,0.5,3.0]]}"#);
        assert!(lines[1].starts_with(r#"{"error":"malformed request"#));
        assert!(lines[2].contains("no such image"));
    }

    #[test]
    fn response_validation() {
        let bad_cat = DetectResponse::Detections {
            detections: vec![[0.0, 0.0, 1.0, 1.0, 0.5, 1.5]],
        };
        assert!(bad_cat.into_detections().is_err());
        let inverted = DetectResponse::Detections {
            detections: vec![[2.0, 0.0, 1.0, 1.0, 0.5, 1.0]],
        };
        assert!(inverted.into_detections().is_err());
    }
}
