//! U-Net style segmentation head over the frozen classifier encoder, and
//! the training loop that feeds it pseudo-labels from temporally pooled
//! CAMs.

use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cams::{load_params, save_params, Backbone, BackboneArch, Classifier};
use crate::domain::{iou, BoundingBox, Cam, Frame, SoftmaxMaps};
use crate::error::{io_err, Result, TcamError};
use crate::localize::cam_to_box;
use crate::losses::{total_loss_grad, CrfKernel, LossBreakdown, LossConfig};
use crate::nn::{
    concat, prefixed, prefixed_mut, relu, relu_backward, resize3, resize3_backward, Conv2d,
    ConvCache, Params, Sgd,
};
use crate::pseudo::{sample_pseudo_labels, split_regions, PseudoLabelMask};
use crate::temporal::{cam_tmp, select_sequence, ShotCams};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderArch {
    /// Channels of every decoder block.
    pub width: usize,
}

impl Default for DecoderArch {
    fn default() -> Self {
        Self { width: 16 }
    }
}

/// Lateral 1x1 on the deepest encoder layer, then per shallower layer:
/// bilinear upsample, concat the skip, 3x3 conv. A last block at full
/// resolution sees the image itself before the 1x1 two-channel head.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub lateral: Conv2d,
    /// Deepest skip first.
    pub fuse: Vec<Conv2d>,
    pub refine: Conv2d,
    pub head: Conv2d,
}

impl Decoder {
    pub fn new(encoder: &BackboneArch, arch: &DecoderArch, rng: &mut rng::Rng) -> Self {
        let w = arch.width;
        let ch = encoder.layer_channels();
        let (last, skips) = ch.split_last().unwrap();
        let lateral = Conv2d::new(*last, w, 1, 1, rng);
        let fuse = skips
            .iter()
            .rev()
            .map(|&c| Conv2d::new(w + c, w, 3, 1, rng))
            .collect();
        let refine = Conv2d::new(w + 3, w, 3, 1, rng);
        let mut head = Conv2d::new(w, 2, 1, 1, rng);
        head.weight.mapv_inplace(|v| v * 0.1);
        Self {
            lateral,
            fuse,
            refine,
            head,
        }
    }
}

impl Params for Decoder {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut v = prefixed("lateral", self.lateral.tensors());
        for (i, f) in self.fuse.iter().enumerate() {
            v.extend(prefixed(&format!("fuse{i}"), f.tensors()));
        }
        v.extend(prefixed("refine", self.refine.tensors()));
        v.extend(prefixed("head", self.head.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let mut v = prefixed_mut("lateral", self.lateral.tensors_mut());
        for (i, f) in self.fuse.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("fuse{i}"), f.tensors_mut()));
        }
        v.extend(prefixed_mut("refine", self.refine.tensors_mut()));
        v.extend(prefixed_mut("head", self.head.tensors_mut()));
        v
    }
}

struct Level {
    conv: ConvCache,
    out: Array3<f32>,
    /// Spatial size before upsampling.
    prev: (usize, usize),
}

pub struct DecoderCache {
    lateral: ConvCache,
    lateral_out: Array3<f32>,
    levels: Vec<Level>,
    refine: Level,
    head: ConvCache,
}

/// Frozen encoder plus trainable decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub encoder: Backbone,
    pub decoder: Decoder,
    pub arch: DecoderArch,
    /// `(height, width)` accepted by [`DecoderModel::forward`].
    pub input_size: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderMeta {
    pub arch: DecoderArch,
    pub encoder_arch: BackboneArch,
    pub input_size: (usize, usize),
    pub encoder_checksum: u64,
    pub seed: u64,
    pub best_epoch: usize,
    #[serde(default)]
    pub config_hash: String,
}

fn dims(x: &Array3<f32>) -> (usize, usize) {
    (x.dim().1, x.dim().2)
}

impl DecoderModel {
    pub fn new(classifier: &Classifier, arch: DecoderArch, seed: u64) -> Self {
        let mut r = rng::derive(seed, 0, "decoder-init");
        let decoder = Decoder::new(&classifier.backbone.arch, &arch, &mut r);
        Self {
            encoder: classifier.backbone.clone(),
            decoder,
            arch,
            input_size: classifier.input_size,
        }
    }

    /// Softmax maps at frame resolution.
    pub fn forward(&self, frame: &Frame) -> Result<SoftmaxMaps> {
        let (h, w, _) = frame.pixels.dim();
        if (h, w) != self.input_size {
            return Err(TcamError::ShapeMismatch {
                expected: vec![self.input_size.0, self.input_size.1],
                actual: vec![h, w],
            });
        }
        Ok(self.forward_chw(&frame.to_chw()).0)
    }

    /// Any input size; used directly for crops.
    pub fn forward_chw(&self, x: &Array3<f32>) -> (SoftmaxMaps, DecoderCache) {
        let feats = self.encoder.forward(x);
        let d = &self.decoder;
        let (last, skips) = feats.split_last().unwrap();
        let (z, lateral) = d.lateral.forward_cached(last.view());
        let lateral_out = relu(z);
        let mut h = lateral_out.clone();
        let mut levels = Vec::with_capacity(skips.len());
        for (conv, skip) in d.fuse.iter().zip(skips.iter().rev()) {
            let prev = dims(&h);
            let (sh, sw) = dims(skip);
            let cat = concat(&resize3(&h, sh, sw), skip);
            let (z, c) = conv.forward_cached(cat.view());
            h = relu(z);
            levels.push(Level {
                conv: c,
                out: h.clone(),
                prev,
            });
        }
        let prev = dims(&h);
        let (ih, iw) = dims(x);
        let cat = concat(&resize3(&h, ih, iw), &x.mapv(|v| v - 0.5));
        let (z, c) = d.refine.forward_cached(cat.view());
        let out = relu(z);
        let (logits, head) = d.head.forward_cached(out.view());
        let l0 = logits.index_axis(Axis(0), 0).mapv(|v| v as f64);
        let l1 = logits.index_axis(Axis(0), 1).mapv(|v| v as f64);
        (
            SoftmaxMaps::from_logits(&l0, &l1),
            DecoderCache {
                lateral,
                lateral_out,
                levels,
                refine: Level { conv: c, out, prev },
                head,
            },
        )
    }

    /// Accumulates decoder parameter gradients for logit gradients
    /// `(d0, d1)`. The encoder is never touched.
    pub fn backward(&self, cache: &DecoderCache, d0: &Array2<f64>, d1: &Array2<f64>, grads: &mut Decoder) {
        let d = &self.decoder;
        let w = self.arch.width;
        let (h, wd) = d0.dim();
        let mut dlog = Array3::<f32>::zeros((2, h, wd));
        dlog.index_axis_mut(Axis(0), 0).assign(&d0.mapv(|v| v as f32));
        dlog.index_axis_mut(Axis(0), 1).assign(&d1.mapv(|v| v as f32));
        let dh = d.head.backward(&dlog, &cache.head, Some(&mut grads.head), true).unwrap();
        let dz = relu_backward(dh, &cache.refine.out);
        let dcat = d
            .refine
            .backward(&dz, &cache.refine.conv, Some(&mut grads.refine), true)
            .unwrap();
        let (ph, pw) = cache.refine.prev;
        let mut dh = resize3_backward(&dcat.slice(s![..w, .., ..]).to_owned(), ph, pw);
        for (i, lv) in cache.levels.iter().enumerate().rev() {
            let dz = relu_backward(dh, &lv.out);
            let dcat = d.fuse[i]
                .backward(&dz, &lv.conv, Some(&mut grads.fuse[i]), true)
                .unwrap();
            dh = resize3_backward(&dcat.slice(s![..w, .., ..]).to_owned(), lv.prev.0, lv.prev.1);
        }
        let dz = relu_backward(dh, &cache.lateral_out);
        d.lateral
            .backward(&dz, &cache.lateral, Some(&mut grads.lateral), false);
    }

    pub fn zero_grads(&self) -> Decoder {
        let mut g = self.decoder.clone();
        g.zero();
        g
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &DecoderMeta) -> Result<()> {
        let path = path.as_ref();
        save_params(&self.decoder, path)?;
        let sidecar = path.with_extension("json");
        std::fs::write(&sidecar, serde_json::to_vec_pretty(meta)?).map_err(io_err(&sidecar))
    }

    /// Loads decoder weights onto `classifier`'s encoder. Fails if the
    /// encoder differs from the one the decoder was trained on.
    pub fn load(path: impl AsRef<Path>, classifier: &Classifier) -> Result<(Self, DecoderMeta)> {
        let path = path.as_ref();
        let sidecar = path.with_extension("json");
        let meta: DecoderMeta =
            serde_json::from_slice(&std::fs::read(&sidecar).map_err(io_err(&sidecar))?)?;
        if meta.encoder_checksum != classifier.backbone.checksum() {
            return Err(TcamError::Config(format!(
                "decoder {} was trained on a different encoder",
                path.display()
            )));
        }
        let mut m = DecoderModel::new(classifier, meta.arch.clone(), 0);
        load_params(&mut m.decoder, path)?;
        Ok((m, meta))
    }
}

/// Foreground map as a [`Cam`] (values already in `[0, 1]`).
pub fn foreground_cam(maps: &SoftmaxMaps, frame_index: usize, class_id: usize) -> Cam {
    Cam {
        values: maps.foreground.mapv(|v| v as f32),
        frame_index,
        class_id,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Temporal dependency: number of previous frames pooled into the CAM.
    pub n: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    /// Random square crop applied to the sampled frame and its pooled CAM.
    pub crop: Option<usize>,
    /// Threshold used for validation CorLoc.
    pub tau: f32,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
    pub arch: DecoderArch,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 1,
            epochs: 30,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.0,
            crop: None,
            tau: 0.5,
            val_every: 1,
            arch: DecoderArch::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.val_every == 0 {
            return Err(TcamError::Config(
                "epochs, batch_size and val_every must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(TcamError::Config("lr must be > 0 and momentum in [0, 1)".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(TcamError::Config("tau must be in (0, 1)".into()));
        }
        if self.arch.width == 0 {
            return Err(TcamError::Config("decoder width must be positive".into()));
        }
        self.loss.validate()
    }
}

/// Frames and CAMs of one training shot. CAMs are indexed by position in
/// the shot (`cams.start == 0`).
#[derive(Debug, Clone)]
pub struct TrainShot {
    pub video_id: String,
    pub shot_id: String,
    pub class_id: usize,
    pub frames: Vec<Frame>,
    pub cams: ShotCams,
}

impl TrainShot {
    pub fn new(class_id: usize, frames: Vec<Frame>, cams: Vec<Cam>) -> Result<Self> {
        let first = frames.first().ok_or(TcamError::EmptySequence)?;
        if cams.len() != frames.len() {
            return Err(TcamError::ShapeMismatch {
                expected: vec![frames.len()],
                actual: vec![cams.len()],
            });
        }
        Ok(Self {
            video_id: first.video_id.clone(),
            shot_id: first.shot_id.clone(),
            class_id,
            cams: ShotCams::new(first.shot_id.clone(), 0, cams),
            frames,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ValFrame {
    pub frame: Frame,
    pub gt_boxes: Vec<BoundingBox>,
}

/// What one training item contributed.
#[derive(Debug, Clone)]
pub struct ItemOutcome {
    pub breakdown: LossBreakdown,
    /// The pooled CAM had no usable Otsu split; only CRF and size terms ran.
    pub degenerate: bool,
    pub mask: Option<PseudoLabelMask>,
}

fn crop_frame(f: &Frame, y0: usize, x0: usize, c: usize) -> Result<Frame> {
    Frame::new(
        f.pixels.slice(s![y0..y0 + c, x0..x0 + c, ..]).to_owned(),
        f.frame_index,
        f.shot_id.clone(),
        f.video_id.clone(),
    )
}

/// Pseudo-labelled loss on frame position `t` of `shot`, accumulating the
/// decoder gradient into `grads`.
pub fn item_loss_grad(
    model: &DecoderModel,
    shot: &TrainShot,
    t: usize,
    cfg: &TrainConfig,
    barrier_t: f64,
    r: &mut rng::Rng,
    grads: &mut Decoder,
) -> Result<ItemOutcome> {
    let seq = select_sequence(&shot.cams, t, cfg.n)?;
    let mut pooled = cam_tmp(&seq)?;
    let mut frame = shot.frames[t].clone();
    if let Some(c) = cfg.crop {
        let (h, w, _) = frame.pixels.dim();
        if c < h.min(w) {
            // one window for the frame and the pooled CAM (hence for every
            // CAM of the clip), so pixel correspondence survives
            let y0 = r.gen_range(0..=h - c);
            let x0 = r.gen_range(0..=w - c);
            frame = crop_frame(&frame, y0, x0, c)?;
            pooled.values = pooled.values.slice(s![y0..y0 + c, x0..x0 + c]).to_owned();
        }
    }
    let split = split_regions(&pooled)?;
    let mask = if split.is_usable() {
        Some(sample_pseudo_labels(&split, &pooled, r)?)
    } else {
        None
    };
    let (maps, cache) = model.forward_chw(&frame.to_chw());
    let kernel = if cfg.loss.use_crf {
        Some(CrfKernel::new(&frame, &cfg.loss)?)
    } else {
        None
    };
    let (breakdown, g) = total_loss_grad(mask.as_ref(), &maps, kernel.as_ref(), &cfg.loss, barrier_t)?;
    let (d0, d1) = g.to_logits(&maps);
    model.backward(&cache, &d0, &d1, grads);
    Ok(ItemOutcome {
        breakdown,
        degenerate: mask.is_none(),
        mask,
    })
}

fn item_key(shot: &TrainShot, t: usize) -> String {
    format!("{}/{}/{}", shot.video_id, shot.shot_id, t)
}

/// One SGD update of the decoder from a batch of `(shot, position)` items.
/// Item gradients are computed independently (possibly in parallel) and
/// summed in batch order. Returns the mean breakdown and the number of
/// degenerate CAMs.
pub fn train_step(
    model: &mut DecoderModel,
    opt: &mut Sgd<Decoder>,
    shots: &[TrainShot],
    batch: &[(usize, usize)],
    cfg: &TrainConfig,
    epoch: usize,
    seed: u64,
) -> Result<(LossBreakdown, usize)> {
    let barrier_t = cfg.loss.barrier.t_at(epoch);
    let m: &DecoderModel = model;
    let outs = par::map(batch, |&(si, t)| -> Result<(ItemOutcome, Decoder)> {
        let shot = &shots[si];
        let mut r = rng::derive(seed, epoch as u64, &item_key(shot, t));
        let mut g = m.zero_grads();
        let o = item_loss_grad(m, shot, t, cfg, barrier_t, &mut r, &mut g)?;
        Ok((o, g))
    });
    let mut total = model.zero_grads();
    let mut parts = Vec::with_capacity(batch.len());
    let mut degenerate = 0;
    for o in outs {
        let (o, g) = o?;
        total.add_scaled(&g, 1.0);
        degenerate += o.degenerate as usize;
        parts.push(o.breakdown);
    }
    let scale = 1.0 / batch.len() as f32;
    for (_, v) in total.tensors_mut() {
        v.iter_mut().for_each(|x| *x *= scale);
    }
    opt.step(&mut model.decoder, &total);
    Ok((LossBreakdown::mean(&parts), degenerate))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub barrier_t: f64,
    pub losses: LossBreakdown,
    pub degenerate_cams: usize,
    pub val_corloc: Option<f64>,
    pub val_mean_iou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best validation checkpoint (last epoch when there is no validation).
    pub model: DecoderModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_corloc: Option<f64>,
}

impl TrainOutcome {
    /// JSON-lines rendering of the log.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|l| serde_json::to_string(l).unwrap() + "\n")
            .collect()
    }
}

/// CorLoc of the decoder's foreground maps on annotated frames.
/// CorLoc and mean best IoU of the decoder's boxes on `frames`.
pub fn decoder_val(model: &DecoderModel, frames: &[ValFrame], tau: f32) -> Result<(f64, f64)> {
    if frames.is_empty() {
        return Err(TcamError::EmptySequence);
    }
    let ious = par::map(frames, |v| -> Result<f64> {
        let maps = model.forward(&v.frame)?;
        let cam = foreground_cam(&maps, v.frame.frame_index, 0);
        let Ok(b) = cam_to_box(&cam, tau) else { return Ok(0.0) };
        v.gt_boxes.iter().map(|g| iou(&b, g)).try_fold(0.0f64, |m, x| x.map(|x| m.max(x)))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = frames.len() as f64;
    let hits = ious.iter().filter(|&&i| i > crate::data::metrics::CORLOC_IOU).count();
    Ok((hits as f64 / n, ious.iter().sum::<f64>() / n))
}

pub fn decoder_corloc(model: &DecoderModel, frames: &[ValFrame], tau: f32) -> Result<f64> {
    decoder_val(model, frames, tau).map(|v| v.0)
}

/// Full decoder training: each epoch draws one random frame per shot,
/// shuffles, runs mini-batch SGD, then scores validation CorLoc. The
/// best-scoring epoch is returned; CorLoc ties (common on small validation
/// sets) go to the higher mean IoU, then to the earlier epoch.
pub fn train(
    mut model: DecoderModel,
    shots: &[TrainShot],
    val: &[ValFrame],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if shots.is_empty() {
        return Err(TcamError::EmptyManifest);
    }
    let encoder_sum = model.encoder.checksum();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<((f64, f64), usize, Decoder)> = None;
    for epoch in 0..cfg.epochs {
        let mut sel = rng::derive(seed, epoch as u64, "frame-select");
        let mut items: Vec<(usize, usize)> = shots
            .iter()
            .enumerate()
            .map(|(i, s)| (i, sel.gen_range(0..s.frames.len())))
            .collect();
        items.shuffle(&mut sel);
        let mut parts = Vec::new();
        let mut degenerate = 0;
        for batch in items.chunks(cfg.batch_size) {
            let (b, d) = train_step(&mut model, &mut opt, shots, batch, cfg, epoch, seed)?;
            // weight by batch size so the epoch mean is per item
            parts.extend(std::iter::repeat_n(b, batch.len()));
            degenerate += d;
        }
        let validate = !val.is_empty() && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs);
        let score = if validate {
            Some(decoder_val(&model, val, cfg.tau)?)
        } else {
            None
        };
        if let Some(c) = score {
            if best.as_ref().is_none_or(|b| c > b.0) {
                best = Some((c, epoch, model.decoder.clone()));
            }
        }
        let entry = EpochLog {
            epoch,
            barrier_t: cfg.loss.barrier.t_at(epoch),
            losses: LossBreakdown::mean(&parts),
            degenerate_cams: degenerate,
            val_corloc: score.map(|v| v.0),
            val_mean_iou: score.map(|v| v.1),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    if model.encoder.checksum() != encoder_sum {
        return Err(TcamError::Config("encoder weights changed during decoder training".into()));
    }
    let (best_val_corloc, best_epoch) = match best {
        Some((c, e, d)) => {
            model.decoder = d;
            (Some(c.0), e)
        }
        None => (None, cfg.epochs - 1),
    };
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_corloc,
    })
}
