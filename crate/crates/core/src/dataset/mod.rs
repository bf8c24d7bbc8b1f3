//! On-disk dataset contract and loading.
//!
//! A dataset directory holds `manifest.json` (video list, grid dims, class
//! names, image-to-grid scale), one `features_<id>.bin` blob per video
//! (magic `ACTF1`, then a per-frame `C,H,W` u32 LE header followed by f32 LE
//! values) and `annotations.json` (per-frame anchors and ground-truth
//! actions). Anchor boxes come from the dataset, never from a learned
//! detector in this crate; the synthetic generator lives in [`synth`].

pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const FEATURE_MAGIC: &[u8; 5] = b"ACTF1";

/// Axis-aligned box in feature-grid units, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x1 < self.x2 && self.y1 < self.y2)
            || ![self.x1, self.y1, self.x2, self.y2]
                .iter()
                .all(|v| v.is_finite())
        {
            return Err(Error::validation(format!(
                "degenerate box ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    fn scaled(&self, factor: f64) -> Self {
        BoundingBox {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }

    /// Lexicographic key for deterministic tie-breaking.
    pub fn lex_key(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Detector output attached to a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorDetection {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Annotated action instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthAction {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

/// One frame of one video: features, detector anchors and ground truth.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub video_id: String,
    /// Frame index, 1-based within its video.
    pub t: usize,
    /// Feature grid `[C, H, W]`.
    pub feature_map: Tensor<f64>,
    pub anchors: Vec<AnchorDetection>,
    pub ground_truth: Vec<GroundTruthAction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub frames: usize,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub grid: GridDims,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Image units per grid cell; annotation coordinates are divided by
    /// this on load so external detector dumps can be ingested unchanged.
    pub image_to_grid_scale: f64,
    pub videos: Vec<VideoEntry>,
    /// Echo of the generator spec for synthetic datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationAnchor {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationAction {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationFrame {
    video_id: String,
    t: usize,
    anchors: Vec<AnnotationAnchor>,
    actions: Vec<AnnotationAction>,
}

/// Fully loaded dataset with frames sorted by `(video_id, t)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<FrameRecord>,
}

impl Dataset {
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.manifest.grid.c, self.manifest.grid.h, self.manifest.grid.w)
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn split_of(&self, video_id: &str) -> Split {
        self.manifest
            .videos
            .iter()
            .find(|v| v.id == video_id)
            .map(|v| v.split)
            .unwrap_or(Split::Train)
    }

    /// Frames of one split, preserving the global (video, t) order.
    pub fn frames_in_split(&self, split: Split) -> Vec<&FrameRecord> {
        self.frames
            .iter()
            .filter(|f| self.split_of(&f.video_id) == split)
            .collect()
    }

    /// All frames of one video in time order.
    pub fn video_frames(&self, video_id: &str) -> Vec<&FrameRecord> {
        self.frames
            .iter()
            .filter(|f| f.video_id == video_id)
            .collect()
    }

    pub fn has_frame(&self, video_id: &str, t: usize) -> bool {
        self.frames
            .iter()
            .any(|f| f.video_id == video_id && f.t == t)
    }
}

/// The last up-to-`len` frames strictly before `t` within one video.
/// Frames before the video start are simply absent, never zero-padded.
pub struct MemoryBank<'a> {
    frames: Vec<&'a FrameRecord>,
}

impl<'a> MemoryBank<'a> {
    /// Builds the memory for the frame at index `idx` of `video_frames`
    /// (which must be in time order).
    pub fn for_frame(video_frames: &[&'a FrameRecord], idx: usize, len: usize) -> Self {
        let start = idx.saturating_sub(len);
        MemoryBank {
            frames: video_frames[start..idx].to_vec(),
        }
    }

    pub fn frames(&self) -> &[&'a FrameRecord] {
        &self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }
}

/// Anchors with detector confidence strictly above `threshold`, in their
/// original order.
pub fn filter_anchors(frame: &FrameRecord, threshold: f64) -> Vec<AnchorDetection> {
    frame
        .anchors
        .iter()
        .filter(|a| a.score > threshold)
        .cloned()
        .collect()
}

fn parse_error(path: &Path, err: &serde_json::Error) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line: err.line(),
        message: err.to_string(),
    }
}

/// Reads `manifest.json`, every feature blob and `annotations.json`,
/// validating all frame invariants.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text = std::fs::read_to_string(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&manifest_text).map_err(|e| parse_error(&manifest_path, &e))?;

    let (c, h, w) = (manifest.grid.c, manifest.grid.h, manifest.grid.w);
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::validation("grid dimensions must be positive"));
    }
    if manifest.image_to_grid_scale <= 0.0 {
        return Err(Error::validation("image_to_grid_scale must be positive"));
    }

    // Annotations are optional per frame; index whatever exists.
    let ann_path = dir.join("annotations.json");
    let mut annotations: BTreeMap<(String, usize), AnnotationFrame> = BTreeMap::new();
    if ann_path.exists() {
        let text = std::fs::read_to_string(&ann_path)?;
        let entries: Vec<AnnotationFrame> =
            serde_json::from_str(&text).map_err(|e| parse_error(&ann_path, &e))?;
        for entry in entries {
            annotations.insert((entry.video_id.clone(), entry.t), entry);
        }
    }

    let to_grid = 1.0 / manifest.image_to_grid_scale;
    let mut frames = Vec::new();
    for video in &manifest.videos {
        let features = read_features(&dir.join(format!("features_{}.bin", video.id)), c, h, w)?;
        if features.len() != video.frames {
            return Err(Error::validation(format!(
                "video {}: manifest declares {} frames, feature blob holds {}",
                video.id,
                video.frames,
                features.len()
            )));
        }
        for (i, feature_map) in features.into_iter().enumerate() {
            let t = i + 1;
            let (anchors, ground_truth) = match annotations.get(&(video.id.clone(), t)) {
                Some(entry) => {
                    let anchors = entry
                        .anchors
                        .iter()
                        .map(|a| {
                            if !(0.0..=1.0).contains(&a.score) {
                                return Err(Error::validation(format!(
                                    "anchor score {} outside [0,1] in frame {}/t={}",
                                    a.score, video.id, t
                                )));
                            }
                            Ok(AnchorDetection {
                                bbox: BoundingBox {
                                    x1: a.bbox[0],
                                    y1: a.bbox[1],
                                    x2: a.bbox[2],
                                    y2: a.bbox[3],
                                }
                                .scaled(to_grid),
                                score: a.score,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let actions = entry
                        .actions
                        .iter()
                        .map(|a| {
                            if a.class_id >= manifest.num_classes {
                                return Err(Error::validation(format!(
                                    "class_id {} out of range in frame {}/t={}",
                                    a.class_id, video.id, t
                                )));
                            }
                            Ok(GroundTruthAction {
                                bbox: BoundingBox {
                                    x1: a.bbox[0],
                                    y1: a.bbox[1],
                                    x2: a.bbox[2],
                                    y2: a.bbox[3],
                                }
                                .scaled(to_grid),
                                class_id: a.class_id,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    (anchors, actions)
                }
                None => (Vec::new(), Vec::new()),
            };

            for bbox in anchors
                .iter()
                .map(|a| &a.bbox)
                .chain(ground_truth.iter().map(|g| &g.bbox))
            {
                bbox.validate().map_err(|_| {
                    Error::validation(format!(
                        "degenerate box in frame {}/t={}",
                        video.id, t
                    ))
                })?;
                if bbox.x1 < 0.0 || bbox.y1 < 0.0 || bbox.x2 > w as f64 || bbox.y2 > h as f64 {
                    return Err(Error::validation(format!(
                        "box ({}, {}, {}, {}) outside {w}x{h} grid in frame {}/t={}",
                        bbox.x1, bbox.y1, bbox.x2, bbox.y2, video.id, t
                    )));
                }
            }

            frames.push(FrameRecord {
                video_id: video.id.clone(),
                t,
                feature_map,
                anchors,
                ground_truth,
            });
        }
    }

    frames.sort_by(|a, b| (a.video_id.as_str(), a.t).cmp(&(b.video_id.as_str(), b.t)));
    Ok(Dataset { manifest, frames })
}

fn read_features(path: &Path, c: usize, h: usize, w: usize) -> Result<Vec<Tensor<f64>>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::validation(format!(
            "{} is not a feature blob (bad magic)",
            path.display()
        )));
    }
    let mut frames = Vec::new();
    loop {
        let fc = match r.read_u32::<LittleEndian>() {
            Ok(v) => v as usize,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let fh = r.read_u32::<LittleEndian>()? as usize;
        let fw = r.read_u32::<LittleEndian>()? as usize;
        if (fc, fh, fw) != (c, h, w) {
            return Err(Error::validation(format!(
                "feature frame dims {fc}x{fh}x{fw} disagree with manifest grid {c}x{h}x{w}"
            )));
        }
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c * h * w {
            data.push(r.read_f32::<LittleEndian>()? as f64);
        }
        frames.push(Tensor::new(vec![c, h, w], data)?);
    }
    Ok(frames)
}

/// Writes a dataset directory in the documented layout. Feature values are
/// stored at f32 precision.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest_json = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| Error::validation(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), manifest_json)?;

    for video in &dataset.manifest.videos {
        let path = dir.join(format!("features_{}.bin", video.id));
        let mut wtr = BufWriter::new(std::fs::File::create(path)?);
        wtr.write_all(FEATURE_MAGIC)?;
        for frame in dataset.frames.iter().filter(|f| f.video_id == video.id) {
            let shape = frame.feature_map.shape();
            wtr.write_u32::<LittleEndian>(shape[0] as u32)?;
            wtr.write_u32::<LittleEndian>(shape[1] as u32)?;
            wtr.write_u32::<LittleEndian>(shape[2] as u32)?;
            for &v in frame.feature_map.data() {
                wtr.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        wtr.flush()?;
    }

    let scale = dataset.manifest.image_to_grid_scale;
    let entries: Vec<AnnotationFrame> = dataset
        .frames
        .iter()
        .map(|f| AnnotationFrame {
            video_id: f.video_id.clone(),
            t: f.t,
            anchors: f
                .anchors
                .iter()
                .map(|a| {
                    let b = a.bbox.scaled(scale);
                    AnnotationAnchor {
                        bbox: [b.x1, b.y1, b.x2, b.y2],
                        score: a.score,
                    }
                })
                .collect(),
            actions: f
                .ground_truth
                .iter()
                .map(|g| {
                    let b = g.bbox.scaled(scale);
                    AnnotationAction {
                        bbox: [b.x1, b.y1, b.x2, b.y2],
                        class_id: g.class_id,
                    }
                })
                .collect(),
        })
        .collect();
    let ann_json =
        serde_json::to_string_pretty(&entries).map_err(|e| Error::validation(e.to_string()))?;
    std::fs::write(dir.join("annotations.json"), ann_json)?;
    Ok(())
}
