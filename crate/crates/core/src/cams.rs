//! Frame classifier (residual CNN encoder + global-average-pool head) and
//! class activation map extraction.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arrays::{self, NamedArray};
use crate::domain::{Cam, Frame};
use crate::error::{io_err, Result, TcamError};
use crate::nn::{
    global_avg_pool, prefixed, prefixed_mut, relu, relu_backward, resize2, Conv2d, ConvCache,
    Linear, Params, ResBlock, ResCache, Sgd,
};
use crate::rng;

/// Encoder layout: a stride-2 stem followed by stride-2 stages, each a
/// downsampling conv and `blocks_per_stage` residual blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneArch {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for BackboneArch {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: vec![32, 48],
            blocks_per_stage: 1,
        }
    }
}

impl BackboneArch {
    /// Names of the tappable layers, shallowest first.
    pub fn layer_names(&self) -> Vec<String> {
        std::iter::once("stem".to_string())
            .chain((1..=self.stage_channels.len()).map(|i| format!("stage{i}")))
            .collect()
    }

    pub fn layer_channels(&self) -> Vec<usize> {
        std::iter::once(self.stem_channels)
            .chain(self.stage_channels.iter().copied())
            .collect()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layer_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| TcamError::UnknownLayer(name.to_string()))
    }

    pub fn last_layer(&self) -> String {
        self.layer_names().pop().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub down: Conv2d,
    pub blocks: Vec<ResBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub arch: BackboneArch,
    pub stem: Conv2d,
    pub stages: Vec<Stage>,
}

struct StageCache {
    down: ConvCache,
    down_out: Array3<f32>,
    blocks: Vec<ResCache>,
}

pub(crate) struct BackboneCache {
    stem: ConvCache,
    stem_out: Array3<f32>,
    stages: Vec<StageCache>,
}

impl Backbone {
    pub fn new(arch: BackboneArch, rng: &mut rng::Rng) -> Self {
        let stem = Conv2d::new(3, arch.stem_channels, 3, 2, rng);
        let mut cin = arch.stem_channels;
        let stages = arch
            .stage_channels
            .iter()
            .map(|&c| {
                let down = Conv2d::new(cin, c, 3, 2, rng);
                let blocks = (0..arch.blocks_per_stage)
                    .map(|_| ResBlock::new(c, rng))
                    .collect();
                cin = c;
                Stage { down, blocks }
            })
            .collect();
        Self { arch, stem, stages }
    }

    fn prepare(x: &Array3<f32>) -> Array3<f32> {
        x.mapv(|v| v - 0.5)
    }

    /// Output of every tappable layer, shallowest first.
    pub fn forward(&self, x: &Array3<f32>) -> Vec<Array3<f32>> {
        let x = Self::prepare(x);
        let mut h = relu(self.stem.forward(x.view()));
        let mut outs = Vec::with_capacity(self.stages.len() + 1);
        for st in &self.stages {
            outs.push(h);
            h = relu(st.down.forward(outs.last().unwrap().view()));
            for b in &st.blocks {
                h = b.forward(h.view());
            }
        }
        outs.push(h);
        outs
    }

    pub(crate) fn forward_cached(&self, x: &Array3<f32>) -> (Vec<Array3<f32>>, BackboneCache) {
        let x = Self::prepare(x);
        let (h, stem) = self.stem.forward_cached(x.view());
        let stem_out = relu(h);
        let mut outs = vec![stem_out.clone()];
        let mut caches = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let (h, down) = st.down.forward_cached(outs.last().unwrap().view());
            let down_out = relu(h);
            let mut h = down_out.clone();
            let mut blocks = Vec::with_capacity(st.blocks.len());
            for b in &st.blocks {
                let (y, c) = b.forward_cached(h.view());
                blocks.push(c);
                h = y;
            }
            outs.push(h);
            caches.push(StageCache {
                down,
                down_out,
                blocks,
            });
        }
        (
            outs,
            BackboneCache {
                stem,
                stem_out,
                stages: caches,
            },
        )
    }

    /// Backpropagates `d_last` (gradient at the final layer output).
    /// Returns the gradient at every layer output at or above `stop_at`
    /// (index into [`BackboneArch::layer_names`]), shallowest first.
    pub(crate) fn backward(
        &self,
        cache: &BackboneCache,
        d_last: Array3<f32>,
        mut grads: Option<&mut Backbone>,
        stop_at: usize,
    ) -> Vec<Array3<f32>> {
        let n = self.stages.len();
        let mut layer_grads = vec![d_last];
        for si in (0..n).rev() {
            if si + 1 <= stop_at && grads.is_none() {
                break;
            }
            let st = &self.stages[si];
            let sc = &cache.stages[si];
            let mut d = layer_grads.last().unwrap().clone();
            for (bi, b) in st.blocks.iter().enumerate().rev() {
                let g = grads.as_deref_mut().map(|g| &mut g.stages[si].blocks[bi]);
                d = b.backward(d, &sc.blocks[bi], g);
            }
            let d = relu_backward(d, &sc.down_out);
            let g = grads.as_deref_mut().map(|g| &mut g.stages[si].down);
            let d_in = st.down.backward(&d, &sc.down, g, true).unwrap();
            layer_grads.push(d_in);
        }
        if let Some(g) = grads {
            if layer_grads.len() == n + 1 {
                let d = relu_backward(layer_grads.last().unwrap().clone(), &cache.stem_out);
                self.stem.backward(&d, &cache.stem, Some(&mut g.stem), false);
            }
        }
        layer_grads.reverse();
        // index 0 now corresponds to layer `n + 1 - len`
        let skip = n + 1 - layer_grads.len();
        let mut out: Vec<Array3<f32>> = Vec::with_capacity(n + 1);
        out.extend((0..skip).map(|_| Array3::zeros((0, 0, 0))));
        out.extend(layer_grads);
        out
    }
}

impl Params for Backbone {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut v = prefixed("stem", self.stem.tensors());
        for (i, st) in self.stages.iter().enumerate() {
            v.extend(prefixed(&format!("stage{}.down", i + 1), st.down.tensors()));
            for (j, b) in st.blocks.iter().enumerate() {
                v.extend(prefixed(&format!("stage{}.block{j}", i + 1), b.tensors()));
            }
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let mut v = prefixed_mut("stem", self.stem.tensors_mut());
        for (i, st) in self.stages.iter_mut().enumerate() {
            v.extend(prefixed_mut(
                &format!("stage{}.down", i + 1),
                st.down.tensors_mut(),
            ));
            for (j, b) in st.blocks.iter_mut().enumerate() {
                v.extend(prefixed_mut(
                    &format!("stage{}.block{j}", i + 1),
                    b.tensors_mut(),
                ));
            }
        }
        v
    }
}

/// Encoder plus global-average-pool + linear head over `num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub backbone: Backbone,
    pub head: Linear,
    pub num_classes: usize,
    /// `(height, width)` frames must have.
    pub input_size: (usize, usize),
}

impl Params for Classifier {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut v = prefixed("backbone", self.backbone.tensors());
        v.extend(prefixed("head", self.head.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let mut v = prefixed_mut("backbone", self.backbone.tensors_mut());
        v.extend(prefixed_mut("head", self.head.tensors_mut()));
        v
    }
}

pub fn softmax(logits: &Array1<f32>) -> Array1<f64> {
    let m = logits.fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e = logits.mapv(|v| (v as f64 - m).exp());
    let s = e.sum();
    e / s
}

impl Classifier {
    pub fn new(
        arch: BackboneArch,
        num_classes: usize,
        input_size: (usize, usize),
        seed: u64,
    ) -> Self {
        let mut r = rng::seeded(seed);
        let backbone = Backbone::new(arch, &mut r);
        let feat = *backbone.arch.stage_channels.last().unwrap_or(&backbone.arch.stem_channels);
        let mut head = Linear::new(feat, num_classes, &mut r);
        // Near-zero head: class-agnostic features start (and mostly stay)
        // at ~0 weight, so CAMs are driven by features that carry class
        // evidence.
        head.weight.mapv_inplace(|v| v * 0.01);
        Self {
            backbone,
            head,
            num_classes,
            input_size,
        }
    }

    fn check_input(&self, x: &Array3<f32>) -> Result<()> {
        let (c, h, w) = x.dim();
        if (c, h, w) != (3, self.input_size.0, self.input_size.1) {
            return Err(TcamError::ShapeMismatch {
                expected: vec![3, self.input_size.0, self.input_size.1],
                actual: vec![c, h, w],
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: &Array3<f32>) -> Result<Array1<f32>> {
        self.check_input(x)?;
        let feats = self.backbone.forward(x);
        Ok(self.head.forward(&global_avg_pool(feats.last().unwrap())))
    }

    /// Per-class probabilities for a frame.
    pub fn classify(&self, frame: &Frame) -> Result<Array1<f64>> {
        self.logits(&frame.to_chw()).map(|l| softmax(&l))
    }

    pub fn predict(&self, frame: &Frame) -> Result<(usize, f64)> {
        let p = self.classify(frame)?;
        let (k, v) = p
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        Ok((k, v))
    }

    /// Cross-entropy of one sample; accumulates parameter gradients.
    fn loss_and_grad(&self, x: &Array3<f32>, label: usize, grads: &mut Classifier) -> f64 {
        let (feats, cache) = self.backbone.forward_cached(x);
        let last = feats.last().unwrap();
        let pooled = global_avg_pool(last);
        let logits = self.head.forward(&pooled);
        let p = softmax(&logits);
        let loss = -p[label].max(1e-12).ln();
        let mut dl = p.mapv(|v| v as f32);
        dl[label] -= 1.0;
        let dpool = self.head.backward(&pooled, &dl, Some(&mut grads.head));
        let (c, h, w) = last.dim();
        let inv = 1.0 / (h * w) as f32;
        let d_last = Array3::from_shape_fn((c, h, w), |(k, _, _)| dpool[k] * inv);
        self.backbone
            .backward(&cache, d_last, Some(&mut grads.backbone), 0);
        loss
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &CheckpointMeta) -> Result<()> {
        let path = path.as_ref();
        save_params(self, path)?;
        let sidecar = path.with_extension("json");
        std::fs::write(&sidecar, serde_json::to_vec_pretty(meta)?).map_err(io_err(&sidecar))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointMeta)> {
        let path = path.as_ref();
        let sidecar = path.with_extension("json");
        let meta: CheckpointMeta =
            serde_json::from_slice(&std::fs::read(&sidecar).map_err(io_err(&sidecar))?)?;
        let mut c = Classifier::new(meta.arch.clone(), meta.num_classes, meta.input_size, 0);
        load_params(&mut c, path)?;
        Ok((c, meta))
    }
}

pub(crate) fn save_params<P: Params>(p: &P, path: &Path) -> Result<()> {
    let arrays: Vec<NamedArray> = p
        .tensors()
        .into_iter()
        .map(|(name, shape, data)| {
            NamedArray::f32(name, ArrayD::from_shape_vec(IxDyn(&shape), data.to_vec()).unwrap())
        })
        .collect();
    arrays::save_arrays(path, &arrays)
}

pub(crate) fn load_params<P: Params>(p: &mut P, path: &Path) -> Result<()> {
    let file = arrays::load_arrays(path)?;
    for (name, dst) in p.tensors_mut() {
        let src = file.get_f32(&name)?;
        if src.len() != dst.len() {
            return Err(TcamError::ShapeMismatch {
                expected: vec![dst.len()],
                actual: src.shape().to_vec(),
            });
        }
        dst.copy_from_slice(src.as_slice().unwrap());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub arch: BackboneArch,
    pub num_classes: usize,
    pub input_size: (usize, usize),
    pub seed: u64,
    pub epochs: usize,
    #[serde(default)]
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub arch: BackboneArch,
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    /// L2 penalty; keeps head weights on class-agnostic features near zero
    /// so CAMs do not light up background.
    pub weight_decay: f32,
    /// Global gradient-norm cap; 0 disables.
    pub clip_grad_norm: f32,
    /// Cosine decay of the learning rate to 0 over the run.
    pub cosine_lr: bool,
    pub batch_size: usize,
    pub hflip: bool,
    pub vflip: bool,
    /// Random RGB channel permutation, so object colour cannot stand in
    /// for object shape.
    pub channel_shuffle: bool,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            arch: BackboneArch::default(),
            epochs: 12,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-3,
            clip_grad_norm: 1.0,
            cosine_lr: true,
            batch_size: 16,
            hflip: true,
            vflip: true,
            channel_shuffle: true,
        }
    }
}

/// Labeled training frame in channel-first layout.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub chw: Array3<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierLog {
    /// Mean cross-entropy of the untrained model over the training set.
    pub initial_loss: f64,
    /// Mean training cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    pub final_accuracy: f64,
}

/// Trains with softmax cross-entropy and SGD.
pub fn train_classifier(
    data: &[LabeledImage],
    num_classes: usize,
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<(Classifier, ClassifierLog)> {
    if num_classes < 2 {
        return Err(TcamError::DegenerateLabels(format!(
            "degenerate label set: {num_classes} class(es)"
        )));
    }
    let mut counts = vec![0usize; num_classes];
    for d in data {
        if d.label >= num_classes {
            return Err(TcamError::OutOfRange(format!(
                "label {} not in [0, {num_classes})",
                d.label
            )));
        }
        counts[d.label] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(TcamError::DegenerateLabels(format!(
            "degenerate label set: class {k} has no frames"
        )));
    }
    if cfg.batch_size == 0 {
        return Err(TcamError::Config("batch_size must be positive".into()));
    }
    let (_, h, w) = data[0].chw.dim();
    let mut model = Classifier::new(cfg.arch.clone(), num_classes, (h, w), seed);
    let mut grads = model.clone();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut r = rng::derive(seed, 0, "classifier-order");

    let mean_loss = |m: &Classifier| -> f64 {
        let mut scratch = m.clone();
        data.iter()
            .map(|d| m.loss_and_grad(&d.chw, d.label, &mut scratch))
            .sum::<f64>()
            / data.len() as f64
    };
    let initial_loss = mean_loss(&model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.cosine_lr {
            let p = epoch as f32 / cfg.epochs as f32;
            opt.lr = cfg.lr * 0.5 * (1.0 + (std::f32::consts::PI * p).cos());
        }
        order.shuffle(&mut r);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            for &i in batch {
                let x = augment(&data[i].chw, cfg, &mut r);
                let l = model.loss_and_grad(&x, data[i].label, &mut grads);
                if !l.is_finite() {
                    return Err(TcamError::NonFinite(format!("classifier loss {l}")));
                }
                total += l;
            }
            let scale = 1.0 / batch.len() as f32;
            for (_, g) in grads.tensors_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            if cfg.clip_grad_norm > 0.0 {
                grads.clip_norm(cfg.clip_grad_norm as f64);
            }
            if cfg.weight_decay > 0.0 {
                grads.add_scaled(&model, cfg.weight_decay);
            }
            opt.step(&mut model, &grads);
        }
        epoch_losses.push(total / data.len() as f64);
    }
    let correct = data
        .iter()
        .filter(|d| {
            let l = model.logits(&d.chw).unwrap();
            argmax(&l) == d.label
        })
        .count();
    Ok((
        model,
        ClassifierLog {
            initial_loss,
            epoch_losses,
            final_accuracy: correct as f64 / data.len() as f64,
        },
    ))
}

fn augment(x: &Array3<f32>, cfg: &ClassifierTrainConfig, r: &mut rng::Rng) -> Array3<f32> {
    use rand::Rng as _;
    let mut v = x.view();
    if cfg.hflip && r.gen_bool(0.5) {
        v.invert_axis(Axis(2));
    }
    if cfg.vflip && r.gen_bool(0.5) {
        v.invert_axis(Axis(1));
    }
    let mut perm = [0usize, 1, 2];
    if cfg.channel_shuffle {
        perm.shuffle(r);
    }
    Array3::from_shape_fn(x.dim(), |(c, y, xx)| v[[perm[c], y, xx]])
}

pub(crate) fn argmax(v: &Array1<f32>) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamKind {
    Cam,
    GradCam,
    LayerCam,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamMethod {
    pub kind: CamKind,
    /// Backbone layer name; `None` selects the final stage.
    #[serde(default)]
    pub target_layer: Option<String>,
}

impl Default for CamMethod {
    fn default() -> Self {
        Self {
            kind: CamKind::LayerCam,
            target_layer: None,
        }
    }
}

/// Raw (un-normalized, un-resized) activation map at the target layer.
pub fn raw_cam(
    c: &Classifier,
    method: &CamMethod,
    x: &Array3<f32>,
    class_id: usize,
) -> Result<Array2<f32>> {
    c.check_input(x)?;
    if class_id >= c.num_classes {
        return Err(TcamError::OutOfRange(format!(
            "class {class_id} not in [0, {})",
            c.num_classes
        )));
    }
    let arch = &c.backbone.arch;
    let layer = match &method.target_layer {
        Some(n) => arch.layer_index(n)?,
        None => arch.layer_names().len() - 1,
    };
    let last = arch.layer_names().len() - 1;
    let w_c = c.head.weight.row(class_id);
    match method.kind {
        CamKind::Cam => {
            if layer != last {
                return Err(TcamError::Config(
                    "kind=cam uses the head weights and needs the final layer".into(),
                ));
            }
            let feats = c.backbone.forward(x);
            let a = feats.last().unwrap();
            let mut out = Array2::<f32>::zeros((a.dim().1, a.dim().2));
            for (k, fk) in a.axis_iter(Axis(0)).enumerate() {
                out.scaled_add(w_c[k], &fk);
            }
            Ok(out.mapv(|v| v.max(0.0)))
        }
        CamKind::GradCam | CamKind::LayerCam => {
            let (feats, cache) = c.backbone.forward_cached(x);
            let a_last = feats.last().unwrap();
            let (ch, h, w) = a_last.dim();
            // d logit_c / d A_last = w_c / (h w) everywhere.
            let inv = 1.0 / (h * w) as f32;
            let d_last = Array3::from_shape_fn((ch, h, w), |(k, _, _)| w_c[k] * inv);
            let grads = c.backbone.backward(&cache, d_last, None, layer);
            let a = &feats[layer];
            let g = &grads[layer];
            let mut out = Array2::<f32>::zeros((a.dim().1, a.dim().2));
            if method.kind == CamKind::GradCam {
                for k in 0..a.dim().0 {
                    let alpha = g.index_axis(Axis(0), k).mean().unwrap();
                    out.scaled_add(alpha, &a.index_axis(Axis(0), k));
                }
            } else {
                ndarray::Zip::from(a.lanes(Axis(0)))
                    .and(g.lanes(Axis(0)))
                    .and(&mut out)
                    .for_each(|av, gv, o| {
                        *o = av.iter().zip(gv.iter()).map(|(a, g)| g.max(0.0) * a).sum();
                    });
            }
            Ok(out.mapv(|v| v.max(0.0)))
        }
    }
}

/// CAM of `class_id` at frame resolution: raw map, bilinear upsampling,
/// min-max normalization (flat maps become zeros).
pub fn extract_cam(
    c: &Classifier,
    method: &CamMethod,
    frame: &Frame,
    class_id: usize,
) -> Result<Cam> {
    let raw = raw_cam(c, method, &frame.to_chw(), class_id)?;
    let (h, w, _) = frame.pixels.dim();
    let up = resize2(&raw, h, w).mapv(|v| if v.is_finite() { v.max(0.0) } else { 0.0 });
    Ok(Cam::normalized(up, frame.frame_index, class_id))
}
