//! Decoder objective: partial cross-entropy on sampled pixels, an absolute
//! size constraint enforced with an extended log-barrier, and a dense CRF
//! regularizer.
//!
//! Every term returns its value together with the gradient with respect to
//! both softmax channels, treated as independent inputs.

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::domain::{Frame, SoftmaxMaps};
use crate::error::{Result, TcamError};
use crate::nn::avg_pool2;
use crate::pseudo::{PseudoLabelMask, BACKGROUND, FOREGROUND};

/// Clamp applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_crf: f64,
    /// Colour bandwidth, in `[0, 1]` intensity units.
    pub crf_sigma_rgb: f64,
    /// Spatial bandwidth, in full-resolution pixels.
    pub crf_sigma_xy: f64,
    pub crf_downsample: usize,
    pub barrier: BarrierSchedule,
    pub use_pseudo_labels: bool,
    pub use_crf: bool,
    pub use_size: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_crf: 2e-9,
            crf_sigma_rgb: 15.0 / 255.0,
            crf_sigma_xy: 100.0,
            crf_downsample: 4,
            barrier: BarrierSchedule::default(),
            use_pseudo_labels: true,
            use_crf: true,
            use_size: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_crf >= 0.0) {
            return Err(TcamError::Config("lambda_crf must be >= 0".into()));
        }
        if !(self.crf_sigma_rgb > 0.0 && self.crf_sigma_xy > 0.0) {
            return Err(TcamError::Config("CRF bandwidths must be positive".into()));
        }
        if self.crf_downsample == 0 {
            return Err(TcamError::Config("crf_downsample must be >= 1".into()));
        }
        self.barrier.validate()
    }
}

/// Log-barrier `t`: starts at `init`, multiplied by `factor` each epoch,
/// capped at `max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BarrierSchedule {
    pub init: f64,
    pub factor: f64,
    pub max: f64,
}

impl Default for BarrierSchedule {
    fn default() -> Self {
        Self {
            init: 1.0,
            factor: 1.01,
            max: 10.0,
        }
    }
}

impl BarrierSchedule {
    pub fn t_at(&self, epoch: usize) -> f64 {
        (self.init * self.factor.powi(epoch as i32)).min(self.max)
    }

    fn validate(&self) -> Result<()> {
        if !(self.init >= 1.0 && self.max <= 10.0 && self.init <= self.max && self.factor >= 1.0) {
            return Err(TcamError::Config(format!(
                "barrier schedule must satisfy 1 <= init <= max <= 10, factor >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub partial_ce: f64,
    pub size_barrier: f64,
    pub crf: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.partial_ce, self.size_barrier, self.crf, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.partial_ce += b.partial_ce / n;
            m.size_barrier += b.size_barrier / n;
            m.crf += b.crf / n;
            m.total += b.total / n;
        }
        m
    }
}

/// Gradient of a scalar with respect to both softmax channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MapGrad {
    pub background: Array2<f64>,
    pub foreground: Array2<f64>,
}

impl MapGrad {
    pub fn zeros(shape: (usize, usize)) -> Self {
        Self {
            background: Array2::zeros(shape),
            foreground: Array2::zeros(shape),
        }
    }

    pub fn channel_mut(&mut self, r: usize) -> &mut Array2<f64> {
        if r == 0 {
            &mut self.background
        } else {
            &mut self.foreground
        }
    }

    pub fn add_scaled(&mut self, other: &MapGrad, s: f64) {
        self.background.scaled_add(s, &other.background);
        self.foreground.scaled_add(s, &other.foreground);
    }

    /// Chain rule through the two-way softmax: gradient w.r.t. the
    /// `(background, foreground)` logits.
    pub fn to_logits(&self, maps: &SoftmaxMaps) -> (Array2<f64>, Array2<f64>) {
        let mut d1 = Array2::zeros(maps.foreground.dim());
        Zip::from(&mut d1)
            .and(&self.background)
            .and(&self.foreground)
            .and(&maps.foreground)
            .for_each(|d, &g0, &g1, &s1| *d = (g1 - g0) * s1 * (1.0 - s1));
        let d0 = d1.mapv(|v| -v);
        (d0, d1)
    }
}

fn check_same(maps: &SoftmaxMaps, shape: (usize, usize)) -> Result<()> {
    if maps.foreground.dim() != shape || maps.background.dim() != shape {
        return Err(TcamError::ShapeMismatch {
            expected: vec![shape.0, shape.1],
            actual: maps.foreground.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_finite(maps: &SoftmaxMaps) -> Result<()> {
    if maps
        .background
        .iter()
        .chain(maps.foreground.iter())
        .any(|v| !v.is_finite())
    {
        return Err(TcamError::NonFinite("softmax maps contain NaN/Inf".into()));
    }
    Ok(())
}

/// Cross-entropy over labeled pixels only: `-log S1` at foreground labels
/// and `-log S0` at background labels.
pub fn partial_cross_entropy(mask: &PseudoLabelMask, maps: &SoftmaxMaps) -> Result<f64> {
    partial_cross_entropy_grad(mask, maps).map(|(v, _)| v)
}

pub fn partial_cross_entropy_grad(
    mask: &PseudoLabelMask,
    maps: &SoftmaxMaps,
) -> Result<(f64, MapGrad)> {
    check_same(maps, mask.labels.dim())?;
    let mut grad = MapGrad::zeros(mask.labels.dim());
    let mut loss = 0.0;
    for ((y, x), &l) in mask.labels.indexed_iter() {
        let (s, g) = match l {
            FOREGROUND => (maps.foreground[[y, x]], &mut grad.foreground),
            BACKGROUND => (maps.background[[y, x]], &mut grad.background),
            _ => continue,
        };
        if s > LOG_EPS {
            loss -= s.ln();
            g[[y, x]] -= 1.0 / s;
        } else {
            loss -= LOG_EPS.ln();
        }
    }
    Ok((loss, grad))
}

/// Extended log-barrier for the constraint `z <= 0`.
pub fn extended_log_barrier(z: f64, t: f64) -> f64 {
    if z <= -1.0 / (t * t) {
        -(1.0 / t) * (-z).max(LOG_EPS).ln()
    } else {
        t * z - (1.0 / t) * (1.0 / (t * t)).ln() + 1.0 / t
    }
}

pub fn extended_log_barrier_derivative(z: f64, t: f64) -> f64 {
    if z <= -1.0 / (t * t) {
        -1.0 / (t * z.min(-LOG_EPS))
    } else {
        t
    }
}

/// `sum_r psi_t(-size_r)` with `size_r` the mean of channel `r` over the
/// domain. Lower when both regions are larger.
pub fn size_barrier(maps: &SoftmaxMaps, t: f64) -> Result<f64> {
    size_barrier_grad(maps, t).map(|(v, _)| v)
}

pub fn size_barrier_grad(maps: &SoftmaxMaps, t: f64) -> Result<(f64, MapGrad)> {
    check_finite(maps)?;
    if !(t >= 1.0) {
        return Err(TcamError::OutOfRange(format!("barrier t = {t} < 1")));
    }
    let shape = maps.foreground.dim();
    let n = (shape.0 * shape.1) as f64;
    let mut grad = MapGrad::zeros(shape);
    let mut loss = 0.0;
    for r in 0..2 {
        let size = maps.channel(r).sum() / n;
        loss += extended_log_barrier(-size, t);
        let d = -extended_log_barrier_derivative(-size, t) / n;
        grad.channel_mut(r).fill(d);
    }
    Ok((loss, grad))
}

/// Dense Gaussian affinity over (colour, position) for a pooled frame,
/// diagonal zeroed.
#[derive(Debug, Clone)]
pub struct CrfKernel {
    pub factor: usize,
    pub pooled_shape: (usize, usize),
    pub weights: Array2<f64>,
}

impl CrfKernel {
    pub fn new(frame: &Frame, cfg: &LossConfig) -> Result<Self> {
        let f = cfg.crf_downsample;
        let (h, w, _) = frame.pixels.dim();
        let (ph, pw) = (h / f, w / f);
        if ph < 2 || pw < 2 {
            return Err(TcamError::CrfDomainTooSmall {
                height: ph,
                width: pw,
            });
        }
        let rgb: Vec<Array2<f64>> = (0..3)
            .map(|c| {
                let plane = frame
                    .pixels
                    .index_axis(ndarray::Axis(2), c)
                    .mapv(|v| v as f64);
                avg_pool2(&plane, f)
            })
            .collect();
        let d = ph * pw;
        let inv_rgb = 1.0 / (2.0 * cfg.crf_sigma_rgb * cfg.crf_sigma_rgb);
        let inv_xy = 1.0 / (2.0 * cfg.crf_sigma_xy * cfg.crf_sigma_xy);
        let feats: Vec<[f64; 5]> = (0..d)
            .map(|i| {
                let (y, x) = (i / pw, i % pw);
                [
                    rgb[0][[y, x]],
                    rgb[1][[y, x]],
                    rgb[2][[y, x]],
                    (y * f) as f64,
                    (x * f) as f64,
                ]
            })
            .collect();
        let mut weights = Array2::zeros((d, d));
        for p in 0..d {
            let a = &feats[p];
            for q in (p + 1)..d {
                let b = &feats[q];
                let dc = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
                let dp = (a[3] - b[3]).powi(2) + (a[4] - b[4]).powi(2);
                let k = (-dc * inv_rgb - dp * inv_xy).exp();
                weights[[p, q]] = k;
                weights[[q, p]] = k;
            }
        }
        Ok(Self {
            factor: f,
            pooled_shape: (ph, pw),
            weights,
        })
    }
}

/// `sum_r S_r^T W (1 - S_r)` on the pooled domain.
pub fn crf_loss(maps: &SoftmaxMaps, frame: &Frame, cfg: &LossConfig) -> Result<f64> {
    let k = CrfKernel::new(frame, cfg)?;
    crf_loss_grad(maps, &k).map(|(v, _)| v)
}

pub fn crf_loss_grad(maps: &SoftmaxMaps, kernel: &CrfKernel) -> Result<(f64, MapGrad)> {
    let f = kernel.factor;
    let (ph, pw) = kernel.pooled_shape;
    let shape = maps.foreground.dim();
    if shape.0 / f != ph || shape.1 / f != pw {
        return Err(TcamError::ShapeMismatch {
            expected: vec![ph * f, pw * f],
            actual: vec![shape.0, shape.1],
        });
    }
    check_finite(maps)?;
    let mut grad = MapGrad::zeros(shape);
    let mut loss = 0.0;
    let norm = (f * f) as f64;
    for r in 0..2 {
        let pooled = avg_pool2(maps.channel(r), f);
        let s = Array1::from_iter(pooled.iter().copied());
        let comp = s.mapv(|v| 1.0 - v);
        loss += s.dot(&kernel.weights.dot(&comp));
        // W symmetric: d/ds [s^T W (1-s)] = W (1 - 2s)
        let g = kernel.weights.dot(&s.mapv(|v| 1.0 - 2.0 * v));
        let gc = grad.channel_mut(r);
        for i in 0..ph * f {
            for j in 0..pw * f {
                gc[[i, j]] = g[(i / f) * pw + j / f] / norm;
            }
        }
    }
    Ok((loss, grad))
}

/// Loss terms on one frame plus the gradient of `total`.
pub fn total_loss_grad(
    mask: Option<&PseudoLabelMask>,
    maps: &SoftmaxMaps,
    kernel: Option<&CrfKernel>,
    cfg: &LossConfig,
    barrier_t: f64,
) -> Result<(LossBreakdown, MapGrad)> {
    check_finite(maps)?;
    let shape = maps.foreground.dim();
    let mut grad = MapGrad::zeros(shape);
    let mut b = LossBreakdown::default();
    if cfg.use_pseudo_labels {
        if let Some(mask) = mask {
            let (v, g) = partial_cross_entropy_grad(mask, maps)?;
            b.partial_ce = v;
            grad.add_scaled(&g, 1.0);
        }
    }
    if cfg.use_size {
        let (v, g) = size_barrier_grad(maps, barrier_t)?;
        b.size_barrier = v;
        grad.add_scaled(&g, 1.0);
    }
    if cfg.use_crf {
        if let Some(k) = kernel {
            let (v, g) = crf_loss_grad(maps, k)?;
            b.crf = v;
            grad.add_scaled(&g, cfg.lambda_crf);
        }
    }
    b.total = b.partial_ce + cfg.lambda_crf * b.crf + b.size_barrier;
    if !b.is_finite() {
        return Err(TcamError::NonFinite(format!("{b:?}")));
    }
    Ok((b, grad))
}

/// Full objective for one frame; the CRF kernel is built from `frame`.
pub fn total_loss(
    mask: &PseudoLabelMask,
    maps: &SoftmaxMaps,
    frame: &Frame,
    cfg: &LossConfig,
    barrier_t: f64,
) -> Result<LossBreakdown> {
    let kernel = if cfg.use_crf {
        Some(CrfKernel::new(frame, cfg)?)
    } else {
        None
    };
    total_loss_grad(Some(mask), maps, kernel.as_ref(), cfg, barrier_t).map(|(b, _)| b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ImageDomain;
    use crate::pseudo::UNKNOWN;
    use ndarray::Array3;

    fn mask_with(shape: (usize, usize), fg: (usize, usize), bg: (usize, usize)) -> PseudoLabelMask {
        let mut m = PseudoLabelMask::unknown(ImageDomain::new(shape.0, shape.1).unwrap());
        m.labels[fg] = FOREGROUND;
        m.labels[bg] = BACKGROUND;
        m
    }

    #[test]
    fn partial_ce_examples() {
        let m = mask_with((8, 8), (1, 1), (6, 6));
        let mut fg = Array2::from_elem((8, 8), 0.5);
        let s = SoftmaxMaps::from_foreground(fg.clone());
        let v = partial_cross_entropy(&m, &s).unwrap();
        assert!((v - 2.0 * -(0.5f64.ln())).abs() < 1e-12);
        assert!((v - 1.3863).abs() < 1e-4);

        fg[[1, 1]] = 1.0;
        fg[[6, 6]] = 0.0;
        let s = SoftmaxMaps::from_foreground(fg);
        assert_eq!(partial_cross_entropy(&m, &s).unwrap(), 0.0);

        let none = PseudoLabelMask::unknown(ImageDomain::new(8, 8).unwrap());
        assert_eq!(partial_cross_entropy(&none, &s).unwrap(), 0.0);
        assert!(none.labels.iter().all(|&l| l == UNKNOWN));
    }

    #[test]
    fn partial_ce_clamps_log_zero() {
        let m = mask_with((8, 8), (0, 0), (1, 1));
        let s = SoftmaxMaps::from_foreground(Array2::zeros((8, 8)));
        let v = partial_cross_entropy(&m, &s).unwrap();
        assert!((v + LOG_EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn barrier_branches() {
        // t = 1: interior only at z <= -1, so z = -0.5 is on the linear branch.
        assert!((extended_log_barrier(-0.5, 1.0) - 0.5).abs() < 1e-12);
        let s = SoftmaxMaps::from_foreground(Array2::from_elem((8, 8), 0.5));
        assert!((size_barrier(&s, 1.0).unwrap() - 1.0).abs() < 1e-12);
        // t = 10: interior for z <= -0.01.
        let v = size_barrier(&s, 10.0).unwrap();
        assert!((v - 2.0 * -(0.1) * 0.5f64.ln()).abs() < 1e-12);
        // continuity at the switch point
        for t in [1.0, 2.0, 7.5] {
            let z0 = -1.0 / (t * t);
            let a = extended_log_barrier(z0 - 1e-9, t);
            let b = extended_log_barrier(z0 + 1e-9, t);
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn barrier_blows_up_as_region_vanishes() {
        let t = 10.0;
        let tiny = extended_log_barrier(-1e-6, t);
        let mid = extended_log_barrier(-0.3, t);
        assert!(tiny > mid);
        assert!(extended_log_barrier(-1e-12, t) > extended_log_barrier(-1e-3, t));
    }

    fn frame_from(pixels: Array3<f32>) -> Frame {
        Frame::new(pixels, 0, "s", "v").unwrap()
    }

    #[test]
    fn crf_zero_for_uniform_foreground() {
        let f = frame_from(Array3::from_elem((16, 16, 3), 0.4));
        let cfg = LossConfig::default();
        let s = SoftmaxMaps::from_foreground(Array2::ones((16, 16)));
        assert_eq!(crf_loss(&s, &f, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn crf_prefers_colour_aligned_split() {
        let px = Array3::from_shape_fn((16, 16, 3), |(_, x, c)| {
            if x < 8 {
                [0.9, 0.1, 0.1][c]
            } else {
                [0.1, 0.2, 0.8][c]
            }
        });
        let f = frame_from(px);
        let cfg = LossConfig {
            crf_downsample: 1,
            ..Default::default()
        };
        let aligned = SoftmaxMaps::from_foreground(Array2::from_shape_fn((16, 16), |(_, x)| {
            if x < 8 {
                1.0
            } else {
                0.0
            }
        }));
        let orthogonal = SoftmaxMaps::from_foreground(Array2::from_shape_fn((16, 16), |(y, _)| {
            if y < 8 {
                1.0
            } else {
                0.0
            }
        }));
        let a = crf_loss(&aligned, &f, &cfg).unwrap();
        let o = crf_loss(&orthogonal, &f, &cfg).unwrap();
        assert!(a < o, "{a} !< {o}");
    }

    #[test]
    fn crf_rejects_tiny_pooled_domain() {
        let f = frame_from(Array3::from_elem((8, 8, 3), 0.4));
        let cfg = LossConfig {
            crf_downsample: 5,
            ..Default::default()
        };
        let s = SoftmaxMaps::from_foreground(Array2::ones((8, 8)));
        assert!(matches!(
            crf_loss(&s, &f, &cfg),
            Err(TcamError::CrfDomainTooSmall { .. })
        ));
    }

    #[test]
    fn breakdown_identity_and_toggles() {
        let f = frame_from(Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
            ((y * 3 + x * 5 + c) % 7) as f32 / 7.0
        }));
        let s = SoftmaxMaps::from_foreground(Array2::from_shape_fn((16, 16), |(y, x)| {
            0.1 + 0.8 * ((y + x) % 5) as f64 / 4.0
        }));
        let m = mask_with((16, 16), (2, 3), (10, 12));
        let cfg = LossConfig {
            lambda_crf: 1e-3,
            ..Default::default()
        };
        let b = total_loss(&m, &s, &f, &cfg, 3.0).unwrap();
        assert!((b.total - (b.partial_ce + 1e-3 * b.crf + b.size_barrier)).abs() < 1e-6);
        assert!(b.partial_ce > 0.0 && b.crf > 0.0 && b.size_barrier > 0.0);

        let only_size = LossConfig {
            lambda_crf: 0.0,
            ..Default::default()
        };
        let unknown = PseudoLabelMask::unknown(ImageDomain::new(16, 16).unwrap());
        let b = total_loss(&unknown, &s, &f, &only_size, 1.0).unwrap();
        assert_eq!(b.total, b.size_barrier);
    }

    #[test]
    fn schedule_caps_at_max() {
        let s = BarrierSchedule::default();
        assert_eq!(s.t_at(0), 1.0);
        assert!((s.t_at(1) - 1.01).abs() < 1e-12);
        assert_eq!(s.t_at(10_000), 10.0);
    }
}
