//! Value types shared by every stage of the pipeline.

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TcamError};

/// Maps with a value spread below this are treated as flat.
pub const FLAT_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDomain {
    pub height: usize,
    pub width: usize,
}

impl ImageDomain {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(TcamError::InvalidDomain { height, width });
        }
        Ok(Self { height, width })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// An RGB frame, `H x W x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Array3<f32>,
    pub frame_index: usize,
    pub shot_id: String,
    pub video_id: String,
}

impl Frame {
    pub fn new(
        pixels: Array3<f32>,
        frame_index: usize,
        shot_id: impl Into<String>,
        video_id: impl Into<String>,
    ) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(TcamError::ShapeMismatch {
                expected: vec![h, w, 3],
                actual: vec![h, w, c],
            });
        }
        ImageDomain::new(h, w)?;
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TcamError::OutOfRange(format!("pixel value {v} not in [0,1]")));
        }
        Ok(Self {
            pixels,
            frame_index,
            shot_id: shot_id.into(),
            video_id: video_id.into(),
        })
    }

    pub fn domain(&self) -> ImageDomain {
        let (h, w, _) = self.pixels.dim();
        ImageDomain { height: h, width: w }
    }

    /// Channel-first copy (`3 x H x W`) as consumed by the networks.
    pub fn to_chw(&self) -> Array3<f32> {
        self.pixels.view().permuted_axes([2, 0, 1]).to_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoLabel {
    pub class_id: usize,
}

impl VideoLabel {
    pub fn new(class_id: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(TcamError::DegenerateLabels(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if class_id >= num_classes {
            return Err(TcamError::OutOfRange(format!(
                "class {class_id} not in [0, {num_classes})"
            )));
        }
        Ok(Self { class_id })
    }
}

/// A class activation map at frame resolution, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    pub values: Array2<f32>,
    pub frame_index: usize,
    pub class_id: usize,
}

impl Cam {
    /// Wraps values that are already in `[0, 1]`.
    pub fn new(values: Array2<f32>, frame_index: usize, class_id: usize) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TcamError::OutOfRange(format!("cam value {v} not in [0,1]")));
        }
        Ok(Self {
            values,
            frame_index,
            class_id,
        })
    }

    /// Min-max normalizes raw activations. Flat maps become all zeros.
    pub fn normalized(mut values: Array2<f32>, frame_index: usize, class_id: usize) -> Self {
        min_max_normalize(&mut values);
        Self {
            values,
            frame_index,
            class_id,
        }
    }

    pub fn domain(&self) -> ImageDomain {
        let (h, w) = self.values.dim();
        ImageDomain { height: h, width: w }
    }

    pub fn is_flat(&self) -> bool {
        let (lo, hi) = min_max(&self.values);
        hi - lo < FLAT_EPS
    }
}

pub(crate) fn min_max(values: &Array2<f32>) -> (f32, f32) {
    values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

pub fn min_max_normalize(values: &mut Array2<f32>) {
    let (lo, hi) = min_max(values);
    if !(hi - lo >= FLAT_EPS) {
        values.fill(0.0);
        return;
    }
    let span = hi - lo;
    values.mapv_inplace(|v| ((v - lo) / span).clamp(0.0, 1.0));
}

/// Two-channel per-pixel distribution produced by the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxMaps {
    pub background: Array2<f64>,
    pub foreground: Array2<f64>,
}

impl SoftmaxMaps {
    /// Builds maps from per-pixel foreground probabilities.
    pub fn from_foreground(foreground: Array2<f64>) -> Self {
        let background = foreground.mapv(|p| 1.0 - p);
        Self {
            background,
            foreground,
        }
    }

    /// Numerically stable two-way softmax over logits.
    pub fn from_logits(bg_logits: &Array2<f64>, fg_logits: &Array2<f64>) -> Self {
        let mut foreground = Array2::zeros(bg_logits.dim());
        Zip::from(&mut foreground)
            .and(bg_logits)
            .and(fg_logits)
            .for_each(|s1, &l0, &l1| *s1 = sigmoid(l1 - l0));
        Self::from_foreground(foreground)
    }

    pub fn domain(&self) -> ImageDomain {
        let (h, w) = self.foreground.dim();
        ImageDomain { height: h, width: w }
    }

    pub fn channel(&self, r: usize) -> &Array2<f64> {
        if r == 0 {
            &self.background
        } else {
            &self.foreground
        }
    }

    /// Largest deviation of `S0 + S1` from 1.
    pub fn normalization_error(&self) -> f64 {
        self.background
            .iter()
            .zip(self.foreground.iter())
            .map(|(a, b)| (a + b - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Axis-aligned box in half-open pixel coordinates `[x_min, x_max) x [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(TcamError::InvalidBox {
                x_min: self.x_min as i64,
                y_min: self.y_min as i64,
                x_max: self.x_max as i64,
                y_max: self.y_max as i64,
            });
        }
        Ok(())
    }

    /// Checks the box lies inside `domain`.
    pub fn validate_in(&self, domain: ImageDomain) -> Result<()> {
        self.validate()?;
        if self.x_max > domain.width || self.y_max > domain.height {
            return Err(TcamError::OutOfRange(format!(
                "box {self:?} exceeds {}x{}",
                domain.height, domain.width
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) as f64 / 2.0,
            (self.y_min + self.y_max) as f64 / 2.0,
        )
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..self.x_max).contains(&x) && (self.y_min..self.y_max).contains(&y)
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let ix = a.x_max.min(b.x_max).saturating_sub(a.x_min.max(b.x_min));
    let iy = a.y_max.min(b.y_max).saturating_sub(a.y_min.max(b.y_min));
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter as f64 / union as f64)
}
