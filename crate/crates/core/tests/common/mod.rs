//! Reference implementations written for clarity, not speed, plus random
//! instance generators shared by the integration tests.
#![allow(dead_code)]

pub mod criteria;

use std::collections::VecDeque;

use ndarray::{Array2, Array3};
use rand::Rng;
use tcam::losses::LossConfig;
use tcam::pseudo::Otsu;
use tcam::rng;
use tcam::temporal::ShotCams;
use tcam::{BoundingBox, Cam, Frame, SoftmaxMaps};

pub type R = rng::Rng;

pub fn rng(seed: u64) -> R {
    rng::seeded(seed)
}

pub fn random_values(r: &mut R, h: usize, w: usize) -> Array2<f32> {
    Array2::from_shape_fn((h, w), |_| r.gen::<f32>())
}

/// Values on a coarse grid of levels, so ties are common.
pub fn quantized_values(r: &mut R, h: usize, w: usize, levels: u32) -> Array2<f32> {
    Array2::from_shape_fn((h, w), |_| r.gen_range(0..=levels) as f32 / levels as f32)
}

pub fn random_shot(r: &mut R, len: usize, h: usize, w: usize) -> ShotCams {
    let cams = (0..len)
        .map(|i| Cam::new(random_values(r, h, w), i, 0).unwrap())
        .collect();
    ShotCams::new("shot", 0, cams)
}

pub fn random_frame(r: &mut R, h: usize, w: usize) -> Frame {
    let px = Array3::from_shape_fn((h, w, 3), |_| r.gen::<f32>());
    Frame::new(px, 0, "s", "v").unwrap()
}

/// Foreground probabilities kept away from 0 and 1.
pub fn random_maps(r: &mut R, h: usize, w: usize) -> SoftmaxMaps {
    SoftmaxMaps::from_foreground(Array2::from_shape_fn((h, w), |_| r.gen_range(0.05..0.95)))
}

/// Axis-aligned Gaussian bump, min-max normalized.
pub fn gaussian_blob(h: usize, w: usize, cy: f64, cx: f64, sy: f64, sx: f64) -> Array2<f32> {
    let mut v = Array2::from_shape_fn((h, w), |(y, x)| {
        let dy = (y as f64 - cy) / sy;
        let dx = (x as f64 - cx) / sx;
        (-(dy * dy + dx * dx) / 2.0).exp() as f32
    });
    let (lo, hi) = v.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    v.mapv_inplace(|x| (x - lo) / (hi - lo));
    v
}

/// Pixel-wise max of frames `max(start, t - n) ..= t`, one pixel at a time.
pub fn temporal_max_oracle(shot: &ShotCams, t: usize, n: usize) -> Array2<f32> {
    let (h, w) = shot.cams[0].values.dim();
    let first = if t >= shot.start + n { t - n } else { shot.start };
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut m = f32::NEG_INFINITY;
            for i in first..=t {
                let v = shot.cams[i - shot.start].values[[y, x]];
                if v > m {
                    m = v;
                }
            }
            out[[y, x]] = m;
        }
    }
    out
}

/// Otsu by trying every one of the 256 cut points. A value belongs to
/// level `k` when it lies in `(k/256, (k+1)/256]` (level 0 also holds 0).
/// Returns the cut with the largest between-class variance, lowest on ties.
pub fn otsu_oracle(values: &Array2<f32>) -> Otsu {
    let level = |v: f32| -> u128 {
        let mut k = 0;
        while k < 255 && v > (k + 1) as f32 / 256.0 {
            k += 1;
        }
        k
    };
    let levels: Vec<u128> = values.iter().map(|&v| level(v)).collect();
    let n = levels.len() as u128;
    let total: u128 = levels.iter().sum();
    // (n * s0 - n0 * total)^2 / (n0 * n1) is n^2 times the between-class variance
    let mut best: Option<(u128, u128, u128)> = None;
    for k in 0..256u128 {
        let below: Vec<u128> = levels.iter().copied().filter(|&l| l <= k).collect();
        let n0 = below.len() as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s0: u128 = below.iter().sum();
        let d = (n * s0).abs_diff(n0 * total);
        let (num, den) = (d * d, n0 * n1);
        if best.is_none_or(|(_, bn, bd)| num * bd > bn * den) {
            best = Some((k, num, den));
        }
    }
    match best {
        Some((k, num, _)) if num > 0 => Otsu {
            threshold: (k + 1) as f32 / 256.0,
            degenerate: false,
        },
        _ => Otsu {
            threshold: (levels.iter().copied().max().unwrap() + 1) as f32 / 256.0,
            degenerate: true,
        },
    }
}

/// IoU by counting pixels.
pub fn iou_oracle(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    let w = a.x_max.max(b.x_max);
    let h = a.y_max.max(b.y_max);
    for y in 0..h {
        for x in 0..w {
            let (ia, ib) = (a.contains(x, y), b.contains(x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    inter as f64 / union as f64
}

/// Breadth-first flood fill over 8-neighbours: box of the largest
/// component of `{v >= tau * max}`, first in row-major order on ties.
/// `None` for a flat map.
pub fn cam_box_oracle(values: &Array2<f32>, tau: f32) -> Option<BoundingBox> {
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    if max - min < 1e-8 {
        return None;
    }
    let (h, w) = values.dim();
    let on = |y: usize, x: usize| values[[y, x]] >= tau * max;
    let mut seen = Array2::from_elem((h, w), false);
    let mut best: Option<(usize, BoundingBox)> = None;
    for y in 0..h {
        for x in 0..w {
            if !on(y, x) || seen[[y, x]] {
                continue;
            }
            seen[[y, x]] = true;
            let mut q = VecDeque::from([(y as i64, x as i64)]);
            let (mut size, mut b) = (0, [x, y, x + 1, y + 1]);
            while let Some((cy, cx)) = q.pop_front() {
                size += 1;
                let (uy, ux) = (cy as usize, cx as usize);
                b = [b[0].min(ux), b[1].min(uy), b[2].max(ux + 1), b[3].max(uy + 1)];
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (cy + dy, cx + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if on(ny, nx) && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            q.push_back((ny as i64, nx as i64));
                        }
                    }
                }
            }
            if best.as_ref().is_none_or(|(s, _)| size > *s) {
                best = Some((size, BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap()));
            }
        }
    }
    best.map(|(_, b)| b)
}

/// Dense CRF energy with an explicit double loop over pixel pairs, after
/// `f x f` average pooling of both the maps and the image.
pub fn crf_oracle(maps: &SoftmaxMaps, frame: &Frame, cfg: &LossConfig) -> f64 {
    let f = cfg.crf_downsample;
    let (h, w) = maps.foreground.dim();
    let (ph, pw) = (h / f, w / f);
    let pool = |get: &dyn Fn(usize, usize) -> f64, py: usize, px: usize| {
        let mut s = 0.0;
        for y in py * f..(py + 1) * f {
            for x in px * f..(px + 1) * f {
                s += get(y, x);
            }
        }
        s / (f * f) as f64
    };
    let mut cells = Vec::new();
    for py in 0..ph {
        for px in 0..pw {
            let rgb: Vec<f64> = (0..3)
                .map(|c| pool(&|y, x| frame.pixels[[y, x, c]] as f64, py, px))
                .collect();
            let s0 = pool(&|y, x| maps.background[[y, x]], py, px);
            let s1 = pool(&|y, x| maps.foreground[[y, x]], py, px);
            cells.push((rgb, (py * f) as f64, (px * f) as f64, [s0, s1]));
        }
    }
    let mut e = 0.0;
    for (p, a) in cells.iter().enumerate() {
        for (q, b) in cells.iter().enumerate() {
            if p == q {
                continue;
            }
            let dc: f64 = (0..3).map(|c| (a.0[c] - b.0[c]).powi(2)).sum();
            let dp = (a.1 - b.1).powi(2) + (a.2 - b.2).powi(2);
            let k = (-dc / (2.0 * cfg.crf_sigma_rgb.powi(2)) - dp / (2.0 * cfg.crf_sigma_xy.powi(2))).exp();
            for r in 0..2 {
                e += a.3[r] * k * (1.0 - b.3[r]);
            }
        }
    }
    e
}

/// `|a - b| / max(|a|, |b|)` with an absolute floor for values near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
