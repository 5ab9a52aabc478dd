//! Browser demo. No trained network ships with the page, so each frame gets
//! a stand-in CAM: a tight blob on a part of the object that drifts from
//! frame to frame, which is what a classifier CAM typically looks like.
//! Everything downstream (pooling, Otsu split, sampling, boxes) is the real
//! library code.

use ndarray::{Array2, Array3};
use tcam::data::synth::{generate_video, SynthConfig};
use tcam::domain::min_max_normalize;
use tcam::imageio::{blend_heat, draw_box};
use tcam::localize::cam_to_box;
use tcam::pseudo::{sample_pseudo_labels, split_regions, FOREGROUND};
use tcam::temporal::{cam_tmp, select_sequence, ShotCams};
use tcam::{iou, rng, BoundingBox, Cam, Frame, TcamError};
use wasm_bindgen::prelude::*;

const FRAMES: usize = 10;

fn js(e: TcamError) -> JsError {
    JsError::new(&e.to_string())
}

/// Stand-in CAM for an object in box `b`: a blob of radius ~0.3 r orbiting
/// at 0.45 r from the centre, on top of a faint background ripple.
pub fn proxy_cam(b: &BoundingBox, t: usize, size: usize) -> Array2<f32> {
    let (cx, cy) = b.center();
    let r = b.width().min(b.height()) as f64 / 2.0;
    let th = 1.3 * t as f64;
    let (px, py) = (cx + 0.45 * r * th.cos(), cy + 0.45 * r * th.sin());
    let s2 = (0.3 * r).powi(2);
    let mut v = Array2::from_shape_fn((size, size), |(y, x)| {
        let d2 = (x as f64 + 0.5 - px).powi(2) + (y as f64 + 0.5 - py).powi(2);
        let ripple = 0.5 + 0.5 * (0.31 * x as f64 + 0.23 * y as f64 + 0.7 * t as f64).sin();
        ((-d2 / (2.0 * s2)).exp() + 0.12 * ripple) as f32
    });
    min_max_normalize(&mut v);
    v
}

fn rgba(px: &Array3<f32>) -> Vec<u8> {
    let (h, w, _) = px.dim();
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((px[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

#[wasm_bindgen]
pub struct Demo {
    frames: Vec<Frame>,
    boxes: Vec<BoundingBox>,
    cams: ShotCams,
    size: usize,
}

impl Demo {
    pub fn build(seed: u64, speed: usize) -> tcam::Result<Demo> {
        let cfg = SynthConfig {
            videos: 2,
            shots_per_video: 1,
            frames_per_shot: FRAMES,
            speed,
            body_min: 22,
            body_max: 28,
            val_videos_per_class: 0,
            test_videos_per_class: 0,
            ..Default::default()
        };
        let shot = generate_video(&cfg, seed, 0)?.shots.remove(0);
        let size = cfg.image_size;
        let cams = shot
            .boxes
            .iter()
            .zip(&shot.frames)
            .enumerate()
            .map(|(t, (b, f))| Cam::new(proxy_cam(b, t, size), f.frame_index, 0))
            .collect::<tcam::Result<Vec<_>>>()?;
        Ok(Demo {
            frames: shot.frames,
            boxes: shot.boxes,
            cams: ShotCams::new(shot.shot_id, 0, cams),
            size,
        })
    }

    pub fn pooled(&self, t: usize, n: usize) -> tcam::Result<Cam> {
        cam_tmp(&select_sequence(&self.cams, t, n)?)
    }

    pub fn ground_truth(&self, t: usize) -> Option<BoundingBox> {
        self.boxes.get(t).copied()
    }

    /// `draws` independent pseudo-label masks as `(fg, bg)` flat indices.
    /// Empty when the split is degenerate.
    pub fn sample_pairs(&self, t: usize, n: usize, draws: usize, seed: u64) -> tcam::Result<Vec<(usize, usize)>> {
        let cam = self.pooled(t, n)?;
        let split = split_regions(&cam)?;
        if !split.is_usable() {
            return Ok(Vec::new());
        }
        let mut r = rng::derive(seed, t as u64, "demo-sample");
        (0..draws)
            .map(|_| {
                let m = sample_pseudo_labels(&split, &cam, &mut r)?;
                let mut pair = [0usize; 2];
                for (y, x, l) in m.labeled() {
                    pair[usize::from(l != FOREGROUND)] = y * self.size + x;
                }
                Ok((pair[0], pair[1]))
            })
            .collect()
    }

    /// Box of the pooled map at `tau` and its IoU with ground truth.
    pub fn locate_box(&self, t: usize, n: usize, tau: f32) -> tcam::Result<(Option<BoundingBox>, f64)> {
        let cam = self.pooled(t, n)?;
        let gt = self.boxes.get(t).ok_or(TcamError::FrameOutsideShot { t, shot_id: self.cams.shot_id.clone() })?;
        match cam_to_box(&cam, tau) {
            Ok(b) => Ok((Some(b), iou(&b, gt)?)),
            Err(TcamError::NoLocalizableRegion) => Ok((None, 0.0)),
            Err(e) => Err(e),
        }
    }
}

#[wasm_bindgen]
impl Demo {
    /// One synthetic shot of 10 frames; `speed` is the object's displacement
    /// in pixels per frame (0 to 7).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, speed: usize) -> Result<Demo, JsError> {
        Demo::build(seed.into(), speed).map_err(js)
    }

    pub fn frames(&self) -> usize {
        self.frames.len()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn frame_rgba(&self, t: usize) -> Vec<u8> {
        self.frames.get(t).map_or_else(Vec::new, |f| rgba(&f.pixels))
    }

    /// Frame t with the pooled map over it. With `split`, pixels the Otsu
    /// threshold puts in the background are dimmed.
    pub fn heat_rgba(&self, t: usize, n: usize, split: bool) -> Result<Vec<u8>, JsError> {
        let cam = self.pooled(t, n).map_err(js)?;
        let mut px = blend_heat(&self.frames[t].pixels, &cam.values, 0.55);
        if split {
            let fg = split_regions(&cam).map_err(js)?.foreground_mask();
            for ((y, x, _), v) in px.indexed_iter_mut() {
                if !fg[[y, x]] {
                    *v *= 0.35;
                }
            }
        }
        Ok(rgba(&px))
    }

    pub fn otsu(&self, t: usize, n: usize) -> Result<f32, JsError> {
        let cam = self.pooled(t, n).map_err(js)?;
        Ok(split_regions(&cam).map_err(js)?.threshold)
    }

    /// Flat pixel indices `[fg0, bg0, fg1, bg1, ...]`.
    pub fn sample(&self, t: usize, n: usize, draws: usize, seed: u32) -> Result<Vec<u32>, JsError> {
        let pairs = self.sample_pairs(t, n, draws, seed.into()).map_err(js)?;
        Ok(pairs.into_iter().flat_map(|(f, b)| [f as u32, b as u32]).collect())
    }

    /// `[x0, y0, x1, y1, iou]`; coordinates are NaN when the map has no
    /// region.
    pub fn locate(&self, t: usize, n: usize, tau: f32) -> Result<Vec<f64>, JsError> {
        let (b, i) = self.locate_box(t, n, tau).map_err(js)?;
        let mut v = b.map_or(vec![f64::NAN; 4], |b| {
            vec![b.x_min as f64, b.y_min as f64, b.x_max as f64, b.y_max as f64]
        });
        v.push(i);
        Ok(v)
    }

    /// Frame t with the predicted (red) and ground-truth (green) boxes.
    pub fn boxes_rgba(&self, t: usize, n: usize, tau: f32) -> Result<Vec<u8>, JsError> {
        let cam = self.pooled(t, n).map_err(js)?;
        let mut px = blend_heat(&self.frames[t].pixels, &cam.values, 0.4);
        draw_box(&mut px, &self.boxes[t], [0.1, 0.9, 0.2]);
        if let Ok(b) = cam_to_box(&cam, tau) {
            draw_box(&mut px, &b, [0.95, 0.1, 0.1]);
        }
        Ok(rgba(&px))
    }
}
