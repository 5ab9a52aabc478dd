//! Map -> bounding box, and per-frame inference.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cams::Classifier;
use crate::decoder::{foreground_cam, DecoderModel};
use crate::domain::{iou, BoundingBox, Cam, Frame};
use crate::error::{Result, TcamError};

pub const DEFAULT_TAU: f32 = 0.5;

/// Thresholds tried by [`select_tau`].
pub fn tau_grid() -> Vec<f32> {
    (1..=9).map(|i| i as f32 / 10.0).collect()
}

/// 8-connected components of `mask`, labelled in row-major order of their
/// first pixel. Returns the label map (0 = off) and component sizes, where
/// `sizes[i]` belongs to label `i + 1`.
pub fn connected_components(mask: &Array2<bool>) -> (Array2<u32>, Vec<usize>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            sizes.push(0);
            let id = sizes.len() as u32;
            labels[[y, x]] = id;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                sizes[id as usize - 1] += 1;
                for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = id;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, sizes)
}

/// Tight box of the largest 8-connected component of `{v >= tau * max}`.
/// Ties go to the component met first in a row-major scan.
pub fn cam_to_box(cam: &Cam, tau: f32) -> Result<BoundingBox> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(TcamError::OutOfRange(format!("tau = {tau} not in (0, 1)")));
    }
    if cam.is_flat() {
        return Err(TcamError::NoLocalizableRegion);
    }
    let max = cam.values.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let thr = tau * max;
    let mask = cam.values.mapv(|v| v >= thr);
    let (labels, sizes) = connected_components(&mask);
    // max_by_key keeps the last maximum; scan manually to keep the first.
    let mut best = 0;
    for (i, &s) in sizes.iter().enumerate() {
        if s > sizes[best] {
            best = i;
        }
    }
    let id = best as u32 + 1;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for ((y, x), &l) in labels.indexed_iter() {
        if l == id {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    BoundingBox::new(x0, y0, x1, y1)
}

/// Output of single-frame inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    #[serde(rename = "box")]
    pub bbox: Option<BoundingBox>,
    pub class_id: usize,
    pub score: f64,
    /// Map the box was derived from.
    #[serde(skip)]
    pub cam: Option<Cam>,
}

/// Class from the classifier, box from the decoder's foreground map. Uses
/// nothing but the frame itself. A flat map yields `bbox: None`.
pub fn infer_frame(
    model: &DecoderModel,
    classifier: &Classifier,
    frame: &Frame,
    tau: f32,
) -> Result<Localization> {
    let (class_id, score) = classifier.predict(frame)?;
    let maps = model.forward(frame)?;
    let cam = foreground_cam(&maps, frame.frame_index, class_id);
    let bbox = match cam_to_box(&cam, tau) {
        Ok(b) => Some(b),
        Err(TcamError::NoLocalizableRegion) => None,
        Err(e) => return Err(e),
    };
    Ok(Localization {
        bbox,
        class_id,
        score,
        cam: Some(cam),
    })
}

/// Best threshold on a validation set of `(map, ground-truth boxes)` pairs.
/// Ties keep the smaller tau. Flat maps count as misses.
pub fn select_tau(items: &[(&Cam, &[BoundingBox])], taus: &[f32]) -> Result<(f32, f64)> {
    if items.is_empty() || taus.is_empty() {
        return Err(TcamError::EmptySequence);
    }
    let mut best = (taus[0], -1.0);
    for &tau in taus {
        let mut hits = 0usize;
        for (cam, gts) in items {
            if let Ok(b) = cam_to_box(cam, tau) {
                let m = gts.iter().map(|g| iou(&b, g)).try_fold(0.0f64, |m, v| v.map(|v| m.max(v)))?;
                if m > crate::data::metrics::CORLOC_IOU {
                    hits += 1;
                }
            }
        }
        let score = hits as f64 / items.len() as f64;
        if score > best.1 {
            best = (tau, score);
        }
    }
    Ok(best)
}
