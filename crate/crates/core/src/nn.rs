//! Minimal CPU layers with hand-written backward passes.
//!
//! Feature maps are `C x H x W` (`Array3<f32>`), one sample at a time.
//! Convolutions lower to a single GEMM through im2col.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Parameter traversal shared by every trainable module.
pub trait Params {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f32])>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    fn zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// `self += scale * other`, parameter by parameter.
    fn add_scaled(&mut self, other: &Self, scale: f32)
    where
        Self: Sized,
    {
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, t)| t.iter())
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max`.
    fn clip_norm(&mut self, max: f64) {
        let n = self.l2_norm();
        if n > max {
            let s = (max / n) as f32;
            for (_, t) in self.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    /// Order-sensitive FNV-1a digest of every parameter bit pattern.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, _, t) in self.tensors() {
            for v in t {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Plain SGD with optional heavy-ball momentum.
pub struct Sgd<P> {
    pub lr: f32,
    pub momentum: f32,
    velocity: Option<P>,
}

impl<P: Params + Clone> Sgd<P> {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut P, grads: &P) {
        if self.momentum == 0.0 {
            model.add_scaled(grads, -self.lr);
            return;
        }
        let v = self.velocity.get_or_insert_with(|| {
            let mut z = grads.clone();
            z.zero();
            z
        });
        for ((_, vd), (_, _, g)) in v.tensors_mut().into_iter().zip(grads.tensors()) {
            for (a, b) in vd.iter_mut().zip(g) {
                *a = self.momentum * *a + b;
            }
        }
        model.add_scaled(v, -self.lr);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `cout x (cin * k * k)`
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    cols: Array2<f32>,
    in_dim: (usize, usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng>(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (cin * k * k) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let weight = Array2::from_shape_fn((cout, cin * k * k), |_| normal.sample(rng));
        Self {
            weight,
            bias: Array1::zeros(cout),
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn gemm(&self, cols: &Array2<f32>, oh: usize, ow: usize) -> Array3<f32> {
        let mut y = self.weight.dot(cols);
        for (mut row, b) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += *b;
        }
        y.into_shape_with_order((self.cout, oh, ow)).unwrap()
    }

    pub fn forward(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_size(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad, oh, ow);
        self.gemm(&cols, oh, ow)
    }

    pub fn forward_cached(&self, x: ArrayView3<f32>) -> (Array3<f32>, ConvCache) {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_size(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad, oh, ow);
        let y = self.gemm(&cols, oh, ow);
        (
            y,
            ConvCache {
                cols,
                in_dim: (c, h, w),
            },
        )
    }

    /// Accumulates parameter gradients into `grads` (when given) and
    /// returns the input gradient when `want_dx`.
    pub fn backward(
        &self,
        dy: &Array3<f32>,
        cache: &ConvCache,
        grads: Option<&mut Conv2d>,
        want_dx: bool,
    ) -> Option<Array3<f32>> {
        let (cout, oh, ow) = dy.dim();
        let dy2 = dy
            .view()
            .into_shape_with_order((cout, oh * ow))
            .expect("contiguous gradient");
        if let Some(g) = grads {
            g.weight += &dy2.dot(&cache.cols.t());
            g.bias += &dy2.sum_axis(Axis(1));
        }
        if !want_dx {
            return None;
        }
        let dcols = self.weight.t().dot(&dy2);
        Some(col2im(&dcols, cache.in_dim, self.k, self.stride, self.pad, oh, ow))
    }
}

impl Params for Conv2d {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        vec![
            (
                "weight".into(),
                vec![self.cout, self.cin, self.k, self.k],
                self.weight.as_slice().unwrap(),
            ),
            ("bias".into(), vec![self.cout], self.bias.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f32])> {
        vec![
            ("weight".into(), self.weight.as_slice_mut().unwrap()),
            ("bias".into(), self.bias.as_slice_mut().unwrap()),
        ]
    }
}

fn im2col(
    x: ArrayView3<f32>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
    let out = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut out[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        // valid ox range: 0 <= ox + kj - pad < w
                        let lo = pad.saturating_sub(kj);
                        let hi = (w + pad - kj).min(ow);
                        if lo < hi {
                            drow[lo..hi].copy_from_slice(&src[lo + kj - pad..hi + kj - pad]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f32>,
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f32> {
    let mut x = Array3::<f32>::zeros((c, h, w));
    let xs = x.as_slice_mut().unwrap();
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    for ci in 0..c {
        let plane = &mut xs[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cs[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, v) in srow.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn relu(mut x: Array3<f32>) -> Array3<f32> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

/// Backward through ReLU given its output.
pub fn relu_backward(mut dy: Array3<f32>, y: &Array3<f32>) -> Array3<f32> {
    ndarray::Zip::from(&mut dy).and(y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dy
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / input as f32).sqrt()).unwrap();
        Self {
            weight: Array2::from_shape_fn((output, input), |_| normal.sample(rng)),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array1<f32>) -> Array1<f32> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward(&self, x: &Array1<f32>, dy: &Array1<f32>, grads: Option<&mut Linear>) -> Array1<f32> {
        if let Some(g) = grads {
            for (o, &d) in dy.iter().enumerate() {
                g.weight.row_mut(o).scaled_add(d, x);
            }
            g.bias += dy;
        }
        self.weight.t().dot(dy)
    }
}

impl Params for Linear {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        vec![
            (
                "weight".into(),
                self.weight.shape().to_vec(),
                self.weight.as_slice().unwrap(),
            ),
            ("bias".into(), vec![self.bias.len()], self.bias.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f32])> {
        vec![
            ("weight".into(), self.weight.as_slice_mut().unwrap()),
            ("bias".into(), self.bias.as_slice_mut().unwrap()),
        ]
    }
}

/// `relu(x + conv2(relu(conv1(x))))`
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub struct ResCache {
    c1: ConvCache,
    h: Array3<f32>,
    c2: ConvCache,
    y: Array3<f32>,
}

impl ResBlock {
    pub fn new<R: Rng>(ch: usize, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(ch, ch, 3, 1, rng);
        let mut conv2 = Conv2d::new(ch, ch, 3, 1, rng);
        // Start close to identity so deep stacks train without normalization.
        conv2.weight.mapv_inplace(|v| v * 0.1);
        Self { conv1, conv2 }
    }

    pub fn forward(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let h = relu(self.conv1.forward(x));
        relu(self.conv2.forward(h.view()) + &x)
    }

    pub fn forward_cached(&self, x: ArrayView3<f32>) -> (Array3<f32>, ResCache) {
        let (h, c1) = self.conv1.forward_cached(x);
        let h = relu(h);
        let (z, c2) = self.conv2.forward_cached(h.view());
        let y = relu(z + &x);
        (y.clone(), ResCache { c1, h, c2, y })
    }

    pub fn backward(
        &self,
        dy: Array3<f32>,
        cache: &ResCache,
        grads: Option<&mut ResBlock>,
    ) -> Array3<f32> {
        let dz = relu_backward(dy, &cache.y);
        let (g1, g2) = match grads {
            Some(g) => (Some(&mut g.conv1), Some(&mut g.conv2)),
            None => (None, None),
        };
        let dh = self.conv2.backward(&dz, &cache.c2, g2, true).unwrap();
        let dh = relu_backward(dh, &cache.h);
        let dx = self.conv1.backward(&dh, &cache.c1, g1, true).unwrap();
        dx + &dz
    }
}

impl Params for ResBlock {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        prefixed("conv1", self.conv1.tensors())
            .into_iter()
            .chain(prefixed("conv2", self.conv2.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let mut v = prefixed_mut("conv1", self.conv1.tensors_mut());
        v.extend(prefixed_mut("conv2", self.conv2.tensors_mut()));
        v
    }
}

pub(crate) fn prefixed<'a>(
    p: &str,
    v: Vec<(String, Vec<usize>, &'a [f32])>,
) -> Vec<(String, Vec<usize>, &'a [f32])> {
    v.into_iter()
        .map(|(n, s, t)| (format!("{p}.{n}"), s, t))
        .collect()
}

pub(crate) fn prefixed_mut<'a>(
    p: &str,
    v: Vec<(String, &'a mut [f32])>,
) -> Vec<(String, &'a mut [f32])> {
    v.into_iter().map(|(n, t)| (format!("{p}.{n}"), t)).collect()
}

/// Bilinear sampling table for one axis (half-pixel centers, edge clamped).
#[derive(Debug, Clone)]
struct Axis1 {
    taps: Vec<(usize, usize, f32)>,
}

impl Axis1 {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f32 / dst as f32;
        let taps = (0..dst)
            .map(|o| {
                let pos = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, pos - i0 as f32)
            })
            .collect();
        Self { taps }
    }
}

/// Bilinear resize of a single map.
pub fn resize2(x: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w) = x.dim();
    let ay = Axis1::new(h, oh);
    let ax = Axis1::new(w, ow);
    let mut out = Array2::zeros((oh, ow));
    for (oy, &(y0, y1, fy)) in ay.taps.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in ax.taps.iter().enumerate() {
            let top = x[[y0, x0]] * (1.0 - fx) + x[[y0, x1]] * fx;
            let bot = x[[y1, x0]] * (1.0 - fx) + x[[y1, x1]] * fx;
            out[[oy, ox]] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Bilinear resize of every channel.
pub fn resize3(x: &Array3<f32>, oh: usize, ow: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let mut out = Array3::zeros((c, oh, ow));
    for ci in 0..c {
        let r = resize2(&x.index_axis(Axis(0), ci).to_owned(), oh, ow);
        out.index_axis_mut(Axis(0), ci).assign(&r);
    }
    out
}

/// Adjoint of [`resize3`].
pub fn resize3_backward(dy: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (c, oh, ow) = dy.dim();
    if (h, w) == (oh, ow) {
        return dy.clone();
    }
    let ay = Axis1::new(h, oh);
    let ax = Axis1::new(w, ow);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for (oy, &(y0, y1, fy)) in ay.taps.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in ax.taps.iter().enumerate() {
                let g = dy[[ci, oy, ox]];
                dx[[ci, y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
                dx[[ci, y0, x1]] += g * (1.0 - fy) * fx;
                dx[[ci, y1, x0]] += g * fy * (1.0 - fx);
                dx[[ci, y1, x1]] += g * fy * fx;
            }
        }
    }
    dx
}

/// Average pooling by an integer factor (trailing rows/cols dropped).
pub fn avg_pool2(x: &Array2<f64>, f: usize) -> Array2<f64> {
    let (h, w) = (x.nrows() / f, x.ncols() / f);
    let norm = (f * f) as f64;
    Array2::from_shape_fn((h, w), |(i, j)| {
        x.slice(s![i * f..(i + 1) * f, j * f..(j + 1) * f]).sum() / norm
    })
}

pub fn concat(a: &Array3<f32>, b: &Array3<f32>) -> Array3<f32> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap()
}

pub fn global_avg_pool(x: &Array3<f32>) -> Array1<f32> {
    let (c, h, w) = x.dim();
    x.view()
        .into_shape_with_order((c, h * w))
        .map(|v| v.mean_axis(Axis(1)).unwrap())
        .unwrap_or_else(|_| x.mean_axis(Axis(2)).unwrap().mean_axis(Axis(1)).unwrap())
}
