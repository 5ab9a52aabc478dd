//! Synthetic moving-object videos.
//!
//! Each video shows one object: a class-agnostic elliptical body (random
//! colour) carrying a small class-specific emblem. The emblem (shape and
//! dark/light tone) is the class label. Between frames the body translates at a constant integer
//! speed along one axis and the emblem orbits inside the body, so the most
//! discriminative part of the object changes position from frame to frame.
//! The ground-truth box is the tight box of the body.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{FrameEntry, ShotEntry, Split, VideoEntry, VideoManifest};
use crate::domain::{BoundingBox, Frame};
use crate::error::{io_err, Result, TcamError};
use crate::imageio;
use crate::nn::resize2;
use crate::rng;

pub const EMBLEM_NAMES: [&str; 5] = ["disk", "cross", "triangle", "square", "diamond"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Number of emblem kinds (classes), 2..=5.
    pub num_classes: usize,
    /// Total videos; classes are assigned round-robin.
    pub videos: usize,
    pub shots_per_video: usize,
    pub frames_per_shot: usize,
    pub image_size: usize,
    /// Body displacement per frame, pixels.
    pub speed: usize,
    /// Body diameter range, pixels.
    pub body_min: usize,
    pub body_max: usize,
    /// Emblem radius as a fraction of the body's smaller radius.
    pub emblem_scale: f64,
    /// Emblem orbit radius as a fraction of the free space inside the body.
    pub orbit: f64,
    /// Emblem orbit advance per frame, radians.
    pub orbit_step: f64,
    /// Per-pixel Gaussian noise std.
    pub noise: f64,
    /// Static emblems of other classes scattered on the background.
    pub distractors: usize,
    /// Resolution of the low-frequency background grid.
    pub texture_cells: usize,
    pub val_videos_per_class: usize,
    pub test_videos_per_class: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            videos: 40,
            shots_per_video: 2,
            frames_per_shot: 10,
            image_size: 96,
            speed: 1,
            body_min: 30,
            body_max: 42,
            emblem_scale: 0.38,
            orbit: 0.9,
            orbit_step: 1.3,
            noise: 0.02,
            distractors: 0,
            texture_cells: 5,
            val_videos_per_class: 3,
            test_videos_per_class: 6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TcamError::Config(m.to_string()));
        if !(2..=EMBLEM_NAMES.len()).contains(&self.num_classes) {
            return bad("num_classes must be in 2..=5");
        }
        if self.videos < self.num_classes || self.shots_per_video == 0 || self.frames_per_shot == 0 {
            return bad("need at least one video per class and one frame per shot");
        }
        if self.image_size < 16 {
            return bad("image_size must be at least 16");
        }
        if self.body_min < 8 || self.body_min > self.body_max {
            return bad("body size range must satisfy 8 <= body_min <= body_max");
        }
        let travel = self.speed * (self.frames_per_shot - 1);
        if self.body_max + travel + 4 > self.image_size {
            return bad("object trajectory does not fit inside the frame");
        }
        if !(0.0..1.0).contains(&self.emblem_scale) || !(0.0..=1.0).contains(&self.orbit) {
            return bad("emblem_scale must be in [0,1) and orbit in [0,1]");
        }
        let per_class = self.videos / self.num_classes;
        if self.val_videos_per_class + self.test_videos_per_class >= per_class.max(1) {
            return bad("val + test videos per class must leave training videos");
        }
        Ok(())
    }
}

/// Fixed appearance of one video.
#[derive(Debug, Clone)]
struct VideoLook {
    class_id: usize,
    background: Array3<f32>,
    body_color: [f32; 3],
    emblem_color: [f32; 3],
    rx: f64,
    ry: f64,
    distractors: Vec<(usize, f64, f64, f64)>,
}

/// Motion of the object within one shot.
#[derive(Debug, Clone, Copy)]
struct ShotMotion {
    cx0: i64,
    cy0: i64,
    dir: (i64, i64),
    phase: f64,
}

/// One rendered shot.
#[derive(Debug, Clone)]
pub struct SynthShot {
    pub shot_id: String,
    pub frames: Vec<Frame>,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub video_id: String,
    pub class_id: usize,
    pub split: Split,
    pub shots: Vec<SynthShot>,
}

fn emblem_contains(kind: usize, dx: f64, dy: f64, r: f64) -> bool {
    match kind {
        0 => dx * dx + dy * dy <= r * r,
        1 => {
            let t = r / 3.0;
            (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r)
        }
        2 => dy <= 0.7 * r && dy >= -r && dx.abs() <= (dy + r) * 0.62,
        3 => dx.abs().max(dy.abs()) <= 0.8 * r,
        _ => dx.abs() + dy.abs() <= r,
    }
}

/// Even classes dark, odd classes light. Bodies always have one channel
/// near 0 and one near 1, so either tone contrasts with the body.
fn emblem_tone(class_id: usize) -> [f32; 3] {
    if class_id % 2 == 0 {
        [0.05, 0.05, 0.08]
    } else {
        [0.97, 0.97, 0.95]
    }
}

fn random_color<R: Rng>(r: &mut R, lo: f32, hi: f32) -> [f32; 3] {
    [r.gen_range(lo..hi), r.gen_range(lo..hi), r.gen_range(lo..hi)]
}

fn split_for(cfg: &SynthConfig, video: usize) -> Split {
    // Within a class, the first videos go to test, then val, then train.
    let rank = video / cfg.num_classes;
    if rank < cfg.test_videos_per_class {
        Split::Test
    } else if rank < cfg.test_videos_per_class + cfg.val_videos_per_class {
        Split::Val
    } else {
        Split::Train
    }
}

fn make_look(cfg: &SynthConfig, seed: u64, video: usize) -> VideoLook {
    let mut r = rng::derive(seed, video as u64, "synth-look");
    let n = cfg.image_size;
    let cells = cfg.texture_cells.max(2);
    let tint = random_color(&mut r, 0.3, 0.6);
    let mut background = Array3::zeros((n, n, 3));
    for c in 0..3 {
        let grid = Array2::from_shape_fn((cells, cells), |_| r.gen_range(-0.18f32..0.18));
        let up = resize2(&grid, n, n);
        for ((y, x), v) in up.indexed_iter() {
            background[[y, x, c]] = (tint[c] + v).clamp(0.05, 0.9);
        }
    }
    // Saturated body colours: one channel high, one low.
    let mut body_color = random_color(&mut r, 0.15, 0.85);
    let hi = r.gen_range(0..3);
    let lo = (hi + r.gen_range(1..3)) % 3;
    body_color[hi] = r.gen_range(0.8..0.95);
    body_color[lo] = r.gen_range(0.02..0.15);
    let d = r.gen_range(cfg.body_min..=cfg.body_max) as f64;
    let aspect: f64 = r.gen_range(0.8..1.25);
    let (rx, ry) = (d / 2.0 * aspect.min(1.0), d / 2.0 / aspect.max(1.0));
    let class_id = video % cfg.num_classes;
    let emblem_color = emblem_tone(class_id);
    let distractors = (0..cfg.distractors)
        .map(|_| {
            let mut k = r.gen_range(0..cfg.num_classes);
            if k == class_id {
                k = (k + 1) % cfg.num_classes;
            }
            let rad = cfg.emblem_scale * rx.min(ry);
            (
                k,
                r.gen_range(rad..n as f64 - rad),
                r.gen_range(rad..n as f64 - rad),
                rad,
            )
        })
        .collect();
    VideoLook {
        class_id,
        background,
        body_color,
        emblem_color,
        rx,
        ry,
        distractors,
    }
}

fn make_motion(cfg: &SynthConfig, look: &VideoLook, seed: u64, video: usize, shot: usize) -> ShotMotion {
    let mut r = rng::derive(seed, (video * 1000 + shot) as u64, "synth-motion");
    let dir = [(1, 0), (-1, 0), (0, 1), (0, -1)][r.gen_range(0..4)];
    let travel = (cfg.speed * (cfg.frames_per_shot - 1)) as i64;
    let n = cfg.image_size as i64;
    let (hx, hy) = (look.rx.ceil() as i64 + 2, look.ry.ceil() as i64 + 2);
    let range = |half: i64, d: i64| -> (i64, i64) {
        let (mut lo, mut hi) = (half, n - half);
        if d > 0 {
            hi -= travel;
        } else if d < 0 {
            lo += travel;
        }
        (lo, hi.max(lo + 1))
    };
    let (xl, xh) = range(hx, dir.0);
    let (yl, yh) = range(hy, dir.1);
    ShotMotion {
        cx0: r.gen_range(xl..xh),
        cy0: r.gen_range(yl..yh),
        dir,
        phase: r.gen_range(0.0..TAU),
    }
}

fn render(
    cfg: &SynthConfig,
    look: &VideoLook,
    motion: &ShotMotion,
    t: usize,
    noise_rng: &mut rng::Rng,
) -> (Array3<f32>, BoundingBox) {
    let n = cfg.image_size;
    let step = (cfg.speed * t) as i64;
    let cx = (motion.cx0 + motion.dir.0 * step) as f64;
    let cy = (motion.cy0 + motion.dir.1 * step) as f64;
    let r_min = look.rx.min(look.ry);
    let er = cfg.emblem_scale * r_min;
    let orbit = cfg.orbit * (r_min - 1.25 * er).max(0.0);
    let phi = motion.phase + cfg.orbit_step * t as f64;
    let (ex, ey) = (cx + orbit * phi.cos(), cy + orbit * phi.sin());

    let mut px = look.background.clone();
    for &(k, dx0, dy0, rad) in &look.distractors {
        for y in 0..n {
            for x in 0..n {
                if emblem_contains(k, x as f64 + 0.5 - dx0, y as f64 + 0.5 - dy0, rad) {
                    for c in 0..3 {
                        px[[y, x, c]] = emblem_tone(k)[c];
                    }
                }
            }
        }
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = ((fx - cx) / look.rx).powi(2) + ((fy - cy) / look.ry).powi(2) <= 1.0;
            if !inside {
                continue;
            }
            let color = if emblem_contains(look.class_id, fx - ex, fy - ey, er) {
                look.emblem_color
            } else {
                look.body_color
            };
            for c in 0..3 {
                px[[y, x, c]] = color[c];
            }
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise as f32).unwrap();
        px.mapv_inplace(|v| (v + normal.sample(noise_rng)).clamp(0.0, 1.0));
    }
    (
        px,
        BoundingBox {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
        },
    )
}

pub fn video_id(i: usize) -> String {
    format!("v{i:03}")
}

/// Renders video `index` in memory.
pub fn generate_video(cfg: &SynthConfig, seed: u64, index: usize) -> Result<SynthVideo> {
    cfg.validate()?;
    let look = make_look(cfg, seed, index);
    let vid = video_id(index);
    let mut shots = Vec::with_capacity(cfg.shots_per_video);
    for s in 0..cfg.shots_per_video {
        let motion = make_motion(cfg, &look, seed, index, s);
        let shot_id = format!("{vid}_s{s}");
        let mut noise = rng::derive(seed, (index * 1000 + s) as u64, "synth-noise");
        let mut frames = Vec::with_capacity(cfg.frames_per_shot);
        let mut boxes = Vec::with_capacity(cfg.frames_per_shot);
        for t in 0..cfg.frames_per_shot {
            let (px, b) = render(cfg, &look, &motion, t, &mut noise);
            let frame_index = s * cfg.frames_per_shot + t;
            frames.push(Frame::new(px, frame_index, shot_id.clone(), vid.clone())?);
            boxes.push(b);
        }
        shots.push(SynthShot {
            shot_id,
            frames,
            boxes,
        });
    }
    Ok(SynthVideo {
        video_id: vid,
        class_id: look.class_id,
        split: split_for(cfg, index),
        shots,
    })
}

pub fn class_names(k: usize) -> Vec<String> {
    EMBLEM_NAMES[..k].iter().map(|s| s.to_string()).collect()
}

/// Renders every video in memory together with its manifest (frame paths
/// follow the on-disk layout of [`generate_synthetic`]).
pub fn generate_in_memory(cfg: &SynthConfig, seed: u64) -> Result<(VideoManifest, Vec<SynthVideo>)> {
    cfg.validate()?;
    let videos: Vec<SynthVideo> = (0..cfg.videos)
        .map(|i| generate_video(cfg, seed, i))
        .collect::<Result<_>>()?;
    let manifest = VideoManifest {
        class_names: class_names(cfg.num_classes),
        image_size: (cfg.image_size, cfg.image_size),
        videos: videos.iter().map(manifest_entry).collect(),
        root: Default::default(),
    };
    Ok((manifest, videos))
}

fn manifest_entry(v: &SynthVideo) -> VideoEntry {
    VideoEntry {
        video_id: v.video_id.clone(),
        class_id: v.class_id,
        split: v.split,
        shots: v
            .shots
            .iter()
            .map(|s| ShotEntry {
                shot_id: s.shot_id.clone(),
                frames: s
                    .frames
                    .iter()
                    .zip(&s.boxes)
                    .map(|(f, b)| FrameEntry {
                        path: format!("frames/{}/{}/{:05}.png", v.video_id, s.shot_id, f.frame_index),
                        frame_index: f.frame_index,
                        gt_boxes: Some(vec![*b]),
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Writes frames as PNG plus `manifest.json` under `out_dir`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64, out_dir: impl AsRef<Path>) -> Result<VideoManifest> {
    let out = out_dir.as_ref();
    let (mut manifest, videos) = generate_in_memory(cfg, seed)?;
    for (v, entry) in videos.iter().zip(&manifest.videos) {
        for (s, se) in v.shots.iter().zip(&entry.shots) {
            let dir = out.join("frames").join(&v.video_id).join(&s.shot_id);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for (f, fe) in s.frames.iter().zip(&se.frames) {
                imageio::write_rgb(out.join(&fe.path), &f.pixels)?;
            }
        }
    }
    manifest.root = out.to_path_buf();
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}
