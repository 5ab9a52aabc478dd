//! Video manifest: videos -> shots -> frames, with class tags and optional
//! ground-truth boxes.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{BoundingBox, Frame};
use crate::error::{io_err, Result, TcamError};
use crate::imageio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub frame_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boxes: Option<Vec<BoundingBox>>,
}

impl FrameEntry {
    pub fn is_annotated(&self) -> bool {
        self.gt_boxes.as_ref().is_some_and(|b| !b.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotEntry {
    pub shot_id: String,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub video_id: String,
    pub class_id: usize,
    pub split: Split,
    pub shots: Vec<ShotEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoManifest {
    pub class_names: Vec<String>,
    /// `(height, width)` frames are resized to on load.
    pub image_size: (usize, usize),
    pub videos: Vec<VideoEntry>,
    /// Directory frame paths are relative to. Not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

/// Key identifying one frame across the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameKey {
    pub video_id: String,
    pub shot_id: String,
    pub frame_index: usize,
}

impl FrameKey {
    pub fn as_string(&self) -> String {
        format!("{}/{}/{}", self.video_id, self.shot_id, self.frame_index)
    }
}

impl VideoManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.videos.is_empty() {
            return Err(TcamError::EmptyManifest);
        }
        if self.num_classes() < 2 {
            return Err(TcamError::DegenerateLabels(format!(
                "manifest declares {} class(es)",
                self.num_classes()
            )));
        }
        let mut ids = HashSet::new();
        for v in &self.videos {
            if !ids.insert(&v.video_id) {
                return Err(TcamError::Config(format!("duplicate video `{}`", v.video_id)));
            }
            if v.class_id >= self.num_classes() {
                return Err(TcamError::OutOfRange(format!(
                    "video {} has class {}",
                    v.video_id, v.class_id
                )));
            }
            if v.shots.is_empty() || v.shots.iter().any(|s| s.frames.is_empty()) {
                return Err(TcamError::Config(format!(
                    "video {} needs at least one shot with one frame",
                    v.video_id
                )));
            }
            for s in &v.shots {
                let mut seen = HashSet::new();
                for f in &s.frames {
                    if !seen.insert(f.frame_index) {
                        return Err(TcamError::Config(format!(
                            "frame index {} repeated in shot {}",
                            f.frame_index, s.shot_id
                        )));
                    }
                    for b in f.gt_boxes.iter().flatten() {
                        b.validate_in(crate::domain::ImageDomain {
                            height: self.image_size.0,
                            width: self.image_size.1,
                        })?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn videos_in(&self, split: Split) -> impl Iterator<Item = &VideoEntry> {
        self.videos.iter().filter(move |v| v.split == split)
    }

    /// Every annotated frame of a split, with its video's class.
    pub fn annotated_frames(
        &self,
        split: Option<Split>,
    ) -> Vec<(FrameKey, usize, &[BoundingBox])> {
        let mut out = Vec::new();
        for v in &self.videos {
            if split.is_some_and(|s| s != v.split) {
                continue;
            }
            for s in &v.shots {
                for f in &s.frames {
                    if let Some(b) = f.gt_boxes.as_deref().filter(|b| !b.is_empty()) {
                        out.push((
                            FrameKey {
                                video_id: v.video_id.clone(),
                                shot_id: s.shot_id.clone(),
                                frame_index: f.frame_index,
                            },
                            v.class_id,
                            b,
                        ));
                    }
                }
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io_err(path))?;
        let mut m: VideoManifest = serde_json::from_slice(&bytes)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(io_err(path))
    }

    pub fn frame_path(&self, f: &FrameEntry) -> PathBuf {
        self.root.join(&f.path)
    }

    /// Loads one frame, resized to `image_size`.
    pub fn load_frame(&self, v: &VideoEntry, s: &ShotEntry, f: &FrameEntry) -> Result<Frame> {
        let pixels = imageio::read_rgb(self.frame_path(f), Some(self.image_size))?;
        Frame::new(pixels, f.frame_index, s.shot_id.clone(), v.video_id.clone())
    }
}
