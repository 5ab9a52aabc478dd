//! Ingest of a YouTube-Objects style frame tree.
//!
//! Expected layout (frames already extracted from the videos):
//!
//! ```text
//! root/
//!   classes.txt            optional; one class name per line, fixes class ids
//!   test_videos.txt        optional; one video id per line
//!   <class>/<video>/<shot>/<frame>.png|jpg
//!   <class>/<video>/<shot>/<frame>.txt   boxes for annotated frames,
//!                                        one "x_min y_min x_max y_max" per line
//! ```
//!
//! Frame indices are parsed from the numeric frame stem. Boxes are given in
//! the frame's native pixel grid and rescaled to `image_size`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::{FrameEntry, ShotEntry, Split, VideoEntry, VideoManifest};
use crate::domain::BoundingBox;
use crate::error::{io_err, Result, TcamError};
use crate::imageio;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// Validation videos drawn per class from the non-test videos.
    pub val_per_class: usize,
    /// Used only when `test_videos.txt` is absent.
    pub test_per_class: usize,
    pub seed: u64,
    pub image_size: (usize, usize),
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            val_per_class: 5,
            test_per_class: 0,
            seed: 0,
            image_size: (96, 96),
        }
    }
}

fn invalid(path: &Path, reason: impl Into<String>) -> TcamError {
    TcamError::InvalidDataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn sorted_dirs(p: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(p)
        .map_err(io_err(p))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

fn read_list(p: &Path) -> Result<Option<Vec<String>>> {
    if !p.exists() {
        return Ok(None);
    }
    let s = fs::read_to_string(p).map_err(io_err(p))?;
    Ok(Some(
        s.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect(),
    ))
}

fn name_of(p: &Path) -> String {
    p.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

/// Parses one box per non-empty line: `x_min y_min x_max y_max`.
pub fn parse_box_file(text: &str, source: &Path) -> Result<Vec<BoundingBox>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let v: Vec<f64> = l
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| invalid(source, format!("bad box line `{l}`: {e}")))?;
            if v.len() != 4 || v.iter().any(|x| *x < 0.0) {
                return Err(invalid(source, format!("bad box line `{l}`")));
            }
            BoundingBox::new(v[0] as usize, v[1] as usize, v[2].ceil() as usize, v[3].ceil() as usize)
        })
        .collect()
}

fn rescale(b: &BoundingBox, from: (usize, usize), to: (usize, usize)) -> Result<BoundingBox> {
    let sy = to.0 as f64 / from.0 as f64;
    let sx = to.1 as f64 / from.1 as f64;
    let x0 = ((b.x_min as f64 * sx).floor() as usize).min(to.1 - 1);
    let y0 = ((b.y_min as f64 * sy).floor() as usize).min(to.0 - 1);
    let x1 = ((b.x_max as f64 * sx).ceil() as usize).clamp(x0 + 1, to.1);
    let y1 = ((b.y_max as f64 * sy).ceil() as usize).clamp(y0 + 1, to.0);
    BoundingBox::new(x0, y0, x1, y1)
}

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

fn ingest_shot(root: &Path, dir: &Path, size: (usize, usize), annotated: &mut usize) -> Result<ShotEntry> {
    let mut frames = BTreeMap::new();
    let mut box_files = Vec::new();
    for e in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = e.map_err(io_err(dir))?.path();
        let ext = p.extension().map(|e| e.to_string_lossy().to_lowercase()).unwrap_or_default();
        let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        if IMAGE_EXTS.contains(&ext.as_str()) {
            let idx: usize = stem
                .parse()
                .map_err(|_| invalid(&p, "frame file stem must be a frame number"))?;
            if frames.insert(idx, p.clone()).is_some() {
                return Err(invalid(&p, "duplicate frame number"));
            }
        } else if ext == "txt" {
            box_files.push((stem, p));
        }
    }
    if frames.is_empty() {
        return Err(invalid(dir, "shot has no frames"));
    }
    let mut boxes: BTreeMap<usize, Vec<BoundingBox>> = BTreeMap::new();
    for (stem, p) in box_files {
        let idx: usize = stem
            .parse()
            .map_err(|_| invalid(&p, "annotation file stem must be a frame number"))?;
        let frame = frames
            .get(&idx)
            .ok_or_else(|| invalid(&p, "annotation without a matching frame"))?;
        let native = imageio::image_size(frame)?;
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let parsed = parse_box_file(&text, &p)?
            .iter()
            .map(|b| rescale(b, native, size))
            .collect::<Result<Vec<_>>>()?;
        if !parsed.is_empty() {
            *annotated += 1;
            boxes.insert(idx, parsed);
        }
    }
    Ok(ShotEntry {
        shot_id: name_of(dir),
        frames: frames
            .into_iter()
            .map(|(idx, p)| FrameEntry {
                path: p
                    .strip_prefix(root)
                    .unwrap_or(&p)
                    .to_string_lossy()
                    .into_owned(),
                frame_index: idx,
                gt_boxes: boxes.remove(&idx),
            })
            .collect(),
    })
}

/// Builds a manifest with train/val/test splits from a frame tree.
pub fn ingest_yto(root: impl AsRef<Path>, spec: &SplitSpec) -> Result<VideoManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(invalid(root, "not a directory"));
    }
    let class_dirs = sorted_dirs(root)?;
    if class_dirs.is_empty() {
        return Err(invalid(root, "no class directories"));
    }
    let class_names: Vec<String> = match read_list(&root.join("classes.txt"))? {
        Some(list) => {
            for d in &class_dirs {
                if !list.contains(&name_of(d)) {
                    return Err(invalid(d, "unknown class directory"));
                }
            }
            list
        }
        None => class_dirs.iter().map(|d| name_of(d)).collect(),
    };
    let test_list: Option<HashSet<String>> =
        read_list(&root.join("test_videos.txt"))?.map(|v| v.into_iter().collect());

    let mut videos = Vec::new();
    let mut annotated = 0usize;
    let mut r = rng::derive(spec.seed, 0, "ingest-split");
    for d in &class_dirs {
        let cname = name_of(d);
        let class_id = class_names.iter().position(|c| *c == cname).unwrap();
        let mut class_videos = Vec::new();
        for vd in sorted_dirs(d)? {
            let shots = sorted_dirs(&vd)?
                .iter()
                .map(|sd| ingest_shot(root, sd, spec.image_size, &mut annotated))
                .collect::<Result<Vec<_>>>()?;
            if shots.is_empty() {
                return Err(invalid(&vd, "video has no shots"));
            }
            let video_id = name_of(&vd);
            let split = match &test_list {
                Some(t) if t.contains(&video_id) => Split::Test,
                _ => Split::Train,
            };
            class_videos.push(VideoEntry {
                video_id,
                class_id,
                split,
                shots,
            });
        }
        // test split drawn first (when no list), then validation
        let mut pool: Vec<usize> = (0..class_videos.len())
            .filter(|&i| class_videos[i].split == Split::Train)
            .collect();
        pool.shuffle(&mut r);
        let n_test = if test_list.is_none() { spec.test_per_class } else { 0 };
        if n_test + spec.val_per_class > pool.len() {
            return Err(invalid(d, "not enough videos for the requested splits"));
        }
        for (j, &i) in pool.iter().enumerate() {
            if j < n_test {
                class_videos[i].split = Split::Test;
            } else if j < n_test + spec.val_per_class {
                class_videos[i].split = Split::Val;
            }
        }
        videos.extend(class_videos);
    }
    if annotated == 0 {
        return Err(invalid(root, "no annotation files found"));
    }
    let m = VideoManifest {
        class_names,
        image_size: spec.image_size,
        videos,
        root: root.to_path_buf(),
    };
    m.validate()?;
    Ok(m)
}
