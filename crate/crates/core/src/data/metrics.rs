//! CorLoc and frame classification accuracy over annotated frames.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::manifest::{FrameKey, Split, VideoManifest};
use crate::domain::{iou, BoundingBox};
use crate::error::{Result, TcamError};

/// Success requires IoU strictly above this.
pub const CORLOC_IOU: f64 = 0.5;

/// One line of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub video_id: String,
    pub shot_id: String,
    pub frame_index: usize,
    pub class_id: usize,
    pub score: f64,
    /// `None` when the map had no localizable region.
    #[serde(rename = "box")]
    pub bbox: Option<BoundingBox>,
}

impl Prediction {
    pub fn key(&self) -> FrameKey {
        FrameKey {
            video_id: self.video_id.clone(),
            shot_id: self.shot_id.clone(),
            frame_index: self.frame_index,
        }
    }
}

pub fn best_iou(pred: Option<&BoundingBox>, gts: &[BoundingBox]) -> Result<f64> {
    let Some(p) = pred else { return Ok(0.0) };
    gts.iter().try_fold(0.0f64, |m, g| Ok(m.max(iou(p, g)?)))
}

fn index(preds: &[Prediction]) -> Result<HashMap<FrameKey, &Prediction>> {
    let mut m = HashMap::with_capacity(preds.len());
    for p in preds {
        if m.insert(p.key(), p).is_some() {
            return Err(TcamError::Config(format!(
                "duplicate prediction for {}",
                p.key().as_string()
            )));
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_name: String,
    pub frames: usize,
    pub corloc: f64,
    pub cl_accuracy: f64,
}

/// Per-class CorLoc / classification accuracy with the class-mean average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub classes: Vec<ClassRow>,
    /// Mean of the per-class CorLoc values.
    pub average_corloc: f64,
    pub average_cl_accuracy: f64,
    /// Fraction over all annotated frames.
    pub overall_corloc: f64,
    pub overall_cl_accuracy: f64,
    pub frames: usize,
}

/// Fraction of annotated frames whose box beats IoU 0.5 against the
/// best-matching ground-truth box.
pub fn corloc(preds: &[Prediction], manifest: &VideoManifest, split: Option<Split>) -> Result<f64> {
    evaluate(preds, manifest, split).map(|r| r.overall_corloc)
}

/// Fraction of annotated frames whose predicted class equals the video tag.
pub fn cl_accuracy(preds: &[Prediction], manifest: &VideoManifest, split: Option<Split>) -> Result<f64> {
    evaluate(preds, manifest, split).map(|r| r.overall_cl_accuracy)
}

pub fn evaluate(
    preds: &[Prediction],
    manifest: &VideoManifest,
    split: Option<Split>,
) -> Result<LocalizationReport> {
    let by_key = index(preds)?;
    let k = manifest.num_classes();
    let mut hits = vec![0usize; k];
    let mut correct = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (key, class_id, gts) in manifest.annotated_frames(split) {
        let p = by_key
            .get(&key)
            .ok_or_else(|| TcamError::MissingPrediction(key.as_string()))?;
        counts[class_id] += 1;
        if best_iou(p.bbox.as_ref(), gts)? > CORLOC_IOU {
            hits[class_id] += 1;
        }
        if p.class_id == class_id {
            correct[class_id] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(TcamError::Config("no annotated frames in the selected split".into()));
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let classes: Vec<ClassRow> = (0..k)
        .map(|c| ClassRow {
            class_name: manifest.class_names[c].clone(),
            frames: counts[c],
            corloc: ratio(hits[c], counts[c]),
            cl_accuracy: ratio(correct[c], counts[c]),
        })
        .collect();
    let present: Vec<&ClassRow> = classes.iter().filter(|r| r.frames > 0).collect();
    let mean = |f: fn(&ClassRow) -> f64| present.iter().map(|r| f(r)).sum::<f64>() / present.len() as f64;
    Ok(LocalizationReport {
        average_corloc: mean(|r| r.corloc),
        average_cl_accuracy: mean(|r| r.cl_accuracy),
        overall_corloc: ratio(hits.iter().sum(), total),
        overall_cl_accuracy: ratio(correct.iter().sum(), total),
        frames: total,
        classes,
    })
}

impl fmt::Display for LocalizationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.classes.iter().map(|c| c.class_name.as_str()).collect();
        write!(f, "{:<10}", "metric")?;
        for n in &names {
            write!(f, " {n:>9}")?;
        }
        writeln!(f, " {:>9}", "Avg")?;
        write!(f, "{:<10}", "CorLoc")?;
        for c in &self.classes {
            write!(f, " {:>9.1}", 100.0 * c.corloc)?;
        }
        writeln!(f, " {:>9.1}", 100.0 * self.average_corloc)?;
        write!(f, "{:<10}", "CL")?;
        for c in &self.classes {
            write!(f, " {:>9.1}", 100.0 * c.cl_accuracy)?;
        }
        writeln!(f, " {:>9.1}", 100.0 * self.average_cl_accuracy)?;
        write!(f, "frames: {}", self.frames)
    }
}
