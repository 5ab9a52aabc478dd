//! Otsu foreground/background split of an aggregated CAM and sparse
//! pixel pseudo-label sampling.

use ndarray::Array2;
use rand::Rng;

use crate::domain::{Cam, ImageDomain};
use crate::error::{Result, TcamError};

pub const BINS: usize = 256;

/// Label value for pixels without supervision.
pub const UNKNOWN: u8 = 255;
pub const BACKGROUND: u8 = 0;
pub const FOREGROUND: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Otsu {
    /// Upper edge of the last background bin. Foreground is `v > threshold`.
    pub threshold: f32,
    /// Fewer than two occupied bins: no meaningful split exists.
    pub degenerate: bool,
}

/// Bin `k` holds values in `(k/256, (k+1)/256]`; bin 0 also holds 0.
pub fn bin_of(v: f32) -> usize {
    let b = (v.clamp(0.0, 1.0) * BINS as f32).ceil() as usize;
    b.saturating_sub(1).min(BINS - 1)
}

pub fn histogram(values: &Array2<f32>) -> [u64; BINS] {
    let mut hist = [0u64; BINS];
    for &v in values {
        hist[bin_of(v)] += 1;
    }
    hist
}

/// Between-class variance of splitting after bin `k`, as an exact fraction
/// `num / den` over bin levels. `None` when one side is empty.
pub(crate) fn between_class_variance(
    n: u128,
    total_sum: u128,
    n0: u128,
    sum0: u128,
) -> Option<(u128, u128)> {
    let n1 = n - n0;
    if n0 == 0 || n1 == 0 {
        return None;
    }
    // sigma_b^2 * n^2 = (n * sum0 - n0 * total)^2 / (n0 * n1)
    let a = n * sum0;
    let b = n0 * total_sum;
    let d = a.abs_diff(b);
    Some((d * d, n0 * n1))
}

/// Otsu threshold over a 256-bin histogram of `[0, 1]` values.
///
/// Scores are compared as exact integer fractions, so ties resolve to the
/// lowest bin independent of summation order.
pub fn otsu_threshold(values: &Array2<f32>) -> Result<Otsu> {
    if values.is_empty() {
        return Err(TcamError::OutOfRange("empty array".into()));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(TcamError::OutOfRange(format!("value {v} not in [0,1]")));
    }
    let hist = histogram(values);
    let n: u128 = values.len() as u128;
    let total: u128 = hist
        .iter()
        .enumerate()
        .map(|(k, &c)| k as u128 * c as u128)
        .sum();

    let mut best: Option<(usize, u128, u128)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for (k, &c) in hist.iter().enumerate() {
        n0 += c as u128;
        s0 += k as u128 * c as u128;
        let Some((num, den)) = between_class_variance(n, total, n0, s0) else {
            continue;
        };
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    Ok(match best {
        Some((k, num, _)) if num > 0 => Otsu {
            threshold: (k + 1) as f32 / BINS as f32,
            degenerate: false,
        },
        _ => {
            let k = hist.iter().rposition(|&c| c > 0).unwrap_or(0);
            Otsu {
                threshold: (k + 1) as f32 / BINS as f32,
                degenerate: true,
            }
        }
    })
}

/// Partition of the image domain into `C+` (above threshold) and `C-`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSplit {
    pub domain: ImageDomain,
    /// Row-major flat indices.
    pub foreground: Vec<usize>,
    pub background: Vec<usize>,
    pub threshold: f32,
    pub degenerate: bool,
}

impl RegionSplit {
    pub fn foreground_mask(&self) -> Array2<bool> {
        let mut m = Array2::from_elem(self.domain.shape(), false);
        let s = m.as_slice_mut().unwrap();
        for &i in &self.foreground {
            s[i] = true;
        }
        m
    }

    /// Both regions are non-empty and the split is informative.
    pub fn is_usable(&self) -> bool {
        !self.degenerate && !self.foreground.is_empty() && !self.background.is_empty()
    }
}

pub fn split_regions(cam: &Cam) -> Result<RegionSplit> {
    let domain = cam.domain();
    let otsu = otsu_threshold(&cam.values)?;
    if otsu.degenerate || cam.is_flat() {
        return Ok(RegionSplit {
            domain,
            foreground: Vec::new(),
            background: (0..domain.len()).collect(),
            threshold: otsu.threshold,
            degenerate: true,
        });
    }
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for (i, &v) in cam.values.iter().enumerate() {
        if v > otsu.threshold {
            fg.push(i);
        } else {
            bg.push(i);
        }
    }
    Ok(RegionSplit {
        domain,
        foreground: fg,
        background: bg,
        threshold: otsu.threshold,
        degenerate: false,
    })
}

/// Sparse per-pixel supervision: `FOREGROUND`, `BACKGROUND` or `UNKNOWN`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelMask {
    pub labels: Array2<u8>,
}

impl PseudoLabelMask {
    pub fn unknown(domain: ImageDomain) -> Self {
        Self {
            labels: Array2::from_elem(domain.shape(), UNKNOWN),
        }
    }

    pub fn domain(&self) -> ImageDomain {
        let (h, w) = self.labels.dim();
        ImageDomain { height: h, width: w }
    }

    /// `(row, col, label)` for every labeled pixel.
    pub fn labeled(&self) -> Vec<(usize, usize, u8)> {
        self.labels
            .indexed_iter()
            .filter(|(_, &l)| l != UNKNOWN)
            .map(|((y, x), &l)| (y, x, l))
            .collect()
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Draws one flat index from `region` with probability proportional to
/// its activation.
pub fn sample_multinomial<R: Rng>(region: &[usize], cam: &Cam, rng: &mut R) -> usize {
    let s = cam.values.as_slice().expect("standard layout");
    let total: f64 = region.iter().map(|&i| s[i] as f64).sum();
    if !(total > 0.0) {
        return region[rng.gen_range(0..region.len())];
    }
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for &i in region {
        acc += s[i] as f64;
        if u < acc {
            return i;
        }
    }
    *region.last().unwrap()
}

pub fn sample_uniform<R: Rng>(region: &[usize], rng: &mut R) -> usize {
    region[rng.gen_range(0..region.len())]
}

/// One multinomial foreground pixel and one uniform background pixel.
pub fn sample_pseudo_labels<R: Rng>(
    split: &RegionSplit,
    cam: &Cam,
    rng: &mut R,
) -> Result<PseudoLabelMask> {
    sample_pseudo_labels_n(split, cam, 1, rng)
}

/// As [`sample_pseudo_labels`] with `per_region` draws from each region
/// (with replacement). Only used for ablations.
pub fn sample_pseudo_labels_n<R: Rng>(
    split: &RegionSplit,
    cam: &Cam,
    per_region: usize,
    rng: &mut R,
) -> Result<PseudoLabelMask> {
    if cam.domain() != split.domain {
        return Err(TcamError::ShapeMismatch {
            expected: vec![split.domain.height, split.domain.width],
            actual: cam.values.shape().to_vec(),
        });
    }
    if !split.is_usable() {
        return Err(TcamError::OutOfRange(
            "cannot sample from an empty or degenerate region".into(),
        ));
    }
    let mut mask = PseudoLabelMask::unknown(split.domain);
    let labels = mask.labels.as_slice_mut().unwrap();
    for _ in 0..per_region {
        labels[sample_multinomial(&split.foreground, cam, rng)] = FOREGROUND;
        labels[sample_uniform(&split.background, rng)] = BACKGROUND;
    }
    Ok(mask)
}
