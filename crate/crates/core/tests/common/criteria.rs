//! Acceptance checks that run in well under a minute each. Every check
//! returns a one-line summary on success and the first violation on failure.

use std::time::Instant;

use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::Rng;
use tcam::cams::{softmax, CamMethod, Classifier, ClassifierTrainConfig};
use tcam::data::manifest::{FrameEntry, ShotEntry, Split, VideoEntry, VideoManifest};
use tcam::data::metrics::{evaluate, Prediction};
use tcam::data::synth::{generate_in_memory, SynthConfig};
use tcam::decoder::{train, DecoderModel, TrainConfig, TrainOutcome};
use tcam::localize::{cam_to_box, infer_frame};
use tcam::losses::{
    crf_loss, crf_loss_grad, extended_log_barrier, partial_cross_entropy_grad, size_barrier,
    size_barrier_grad, CrfKernel, LossConfig, MapGrad,
};
use tcam::pipeline::{all_video_cams, fit_classifier, from_synth, in_split, train_shots, val_frames, LoadedVideo};
use tcam::pseudo::{otsu_threshold, sample_multinomial, sample_uniform, PseudoLabelMask, BACKGROUND, FOREGROUND};
use tcam::temporal::{cam_tmp, select_sequence};
use tcam::{iou, BoundingBox, Cam, SoftmaxMaps, TcamError};

use super::*;

pub type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn runner(cases: u32) -> TestRunner {
    let cfg = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

// ---------------------------------------------------------------- 1

pub fn oracle_cam_tmp() -> Check {
    let mut r = rng(11);
    for case in 0..100 {
        let len = r.gen_range(1..=9);
        let (h, w) = (r.gen_range(1..=16), r.gen_range(1..=16));
        let shot = random_shot(&mut r, len, h, w);
        let t = r.gen_range(0..len);
        let n = r.gen_range(0..=10);
        let got = cam_tmp(&select_sequence(&shot, t, n).unwrap()).unwrap();
        ensure!(got.values == temporal_max_oracle(&shot, t, n), "case {case}: cam_tmp differs (t={t}, n={n})");
        ensure!(got.frame_index == t, "case {case}: metadata not from C_t");
    }
    Ok("cam_tmp: 100 sequences exact".into())
}

pub fn oracle_otsu() -> Check {
    let mut r = rng(12);
    for case in 0..300 {
        let (h, w) = (r.gen_range(1..=24), r.gen_range(1..=24));
        let v = match case % 4 {
            0 => random_values(&mut r, h, w),
            1 => {
                let levels = r.gen_range(1..6);
                quantized_values(&mut r, h, w, levels)
            }
            2 => Array2::from_elem((h, w), r.gen::<f32>()),
            _ => random_values(&mut r, h, w).mapv(|x| x * x * x),
        };
        let got = otsu_threshold(&v).unwrap();
        let want = otsu_oracle(&v);
        ensure!(got == want, "case {case}: otsu {got:?} vs exhaustive {want:?}");
    }
    Ok("otsu: 300 maps exact".into())
}

fn random_box(r: &mut R, size: usize) -> BoundingBox {
    let (x0, y0) = (r.gen_range(0..size - 1), r.gen_range(0..size - 1));
    BoundingBox::new(x0, y0, r.gen_range(x0 + 1..=size), r.gen_range(y0 + 1..=size)).unwrap()
}

pub fn oracle_iou_and_box() -> Check {
    let mut r = rng(13);
    for case in 0..500 {
        let (a, b) = (random_box(&mut r, 24), random_box(&mut r, 24));
        let got = iou(&a, &b).unwrap();
        ensure!(got == iou_oracle(&a, &b), "case {case}: iou {a:?} {b:?}");
    }
    for case in 0..300 {
        let (h, w) = (r.gen_range(2..=20), r.gen_range(2..=20));
        let v = match case % 3 {
            0 => random_values(&mut r, h, w),
            1 => quantized_values(&mut r, h, w, 3),
            _ => {
                let mut v = Array2::zeros((h, w));
                for _ in 0..r.gen_range(1..4) {
                    let b = gaussian_blob(h, w, r.gen_range(0.0..h as f64), r.gen_range(0.0..w as f64), 1.5, 1.5);
                    v = v + b * r.gen_range(0.3f32..1.0);
                }
                v
            }
        };
        let cam = Cam::normalized(v, 0, 0);
        let tau = r.gen_range(1..10) as f32 / 10.0;
        let got = match cam_to_box(&cam, tau) {
            Ok(b) => Some(b),
            Err(TcamError::NoLocalizableRegion) => None,
            Err(e) => return Err(format!("case {case}: {e}")),
        };
        ensure!(got == cam_box_oracle(&cam.values, tau), "case {case}: cam_to_box differs at tau {tau}");
    }
    Ok("iou: 500 pairs exact; cam_to_box: 300 maps exact".into())
}

pub fn crf_cfg(f: usize) -> LossConfig {
    LossConfig {
        crf_downsample: f,
        crf_sigma_rgb: 0.3,
        crf_sigma_xy: 4.0,
        ..LossConfig::default()
    }
}

pub fn oracle_crf() -> Check {
    let mut r = rng(14);
    let mut worst = 0.0f64;
    for case in 0..40 {
        let f = [1, 2][case % 2];
        let (h, w) = (r.gen_range(8 / f..=16 / f) * f, r.gen_range(8 / f..=16 / f) * f);
        let frame = random_frame(&mut r, h, w);
        let maps = random_maps(&mut r, h, w);
        let cfg = crf_cfg(f);
        let got = crf_loss(&maps, &frame, &cfg).unwrap();
        let e = rel_err(got, crf_oracle(&maps, &frame, &cfg));
        worst = worst.max(e);
        ensure!(e <= 1e-5, "case {case}: crf relative error {e:e}");
    }
    Ok(format!("crf: 40 domains up to 16x16, worst rel err {worst:.1e}"))
}

pub fn criterion_1() -> Check {
    let t0 = Instant::now();
    let parts = [oracle_cam_tmp()?, oracle_otsu()?, oracle_iou_and_box()?, oracle_crf()?];
    Ok(format!("{} ({:.1}s)", parts.join("; "), t0.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- 2

const FD_H: f64 = 1e-6;

/// Worst relative error between the analytic map gradient and central
/// differences taken channel by channel, and again through the logits.
/// Entries far below the instance's largest gradient are compared against
/// `1e-3` of that largest value, since the difference quotient carries
/// roundoff of about `eps * loss / h` regardless of the entry's size.
fn check_grad<F, G>(maps: &SoftmaxMaps, loss: F, grad: G) -> f64
where
    F: Fn(&SoftmaxMaps) -> f64,
    G: Fn(&SoftmaxMaps) -> MapGrad,
{
    let g = grad(maps);
    let scale = g
        .background
        .iter()
        .chain(g.foreground.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        * 1e-3;
    let rel_err = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(scale).max(1e-12);
    let mut worst = 0.0f64;
    for r in 0..2 {
        for i in 0..maps.foreground.len() {
            let bump = |d: f64| {
                let mut m = maps.clone();
                let ch = if r == 0 { &mut m.background } else { &mut m.foreground };
                ch.as_slice_mut().unwrap()[i] += d;
                loss(&m)
            };
            let num = (bump(FD_H) - bump(-FD_H)) / (2.0 * FD_H);
            let ana = g.channel(r).as_slice().unwrap()[i];
            worst = worst.max(rel_err(ana, num));
        }
    }
    // through the two-way softmax, as training uses it
    let l1 = maps.foreground.mapv(|s| (s / (1.0 - s)).ln());
    let l0 = Array2::zeros(l1.dim());
    let (d0, d1) = g.to_logits(maps);
    for i in 0..l1.len() {
        let bump = |d: f64| {
            let mut l = l1.clone();
            l.as_slice_mut().unwrap()[i] += d;
            loss(&SoftmaxMaps::from_logits(&l0, &l))
        };
        let num = (bump(FD_H) - bump(-FD_H)) / (2.0 * FD_H);
        worst = worst.max(rel_err(d1.as_slice().unwrap()[i], num));
        worst = worst.max(rel_err(d0.as_slice().unwrap()[i], -num));
    }
    worst
}

trait ChannelView {
    fn channel(&self, r: usize) -> &Array2<f64>;
}

impl ChannelView for MapGrad {
    fn channel(&self, r: usize) -> &Array2<f64> {
        if r == 0 {
            &self.background
        } else {
            &self.foreground
        }
    }
}

pub fn random_mask(r: &mut R, h: usize, w: usize) -> PseudoLabelMask {
    let mut m = PseudoLabelMask::unknown(tcam::ImageDomain::new(h, w).unwrap());
    let n = h * w;
    let fg = r.gen_range(0..n);
    let mut bg = r.gen_range(0..n);
    while bg == fg {
        bg = r.gen_range(0..n);
    }
    let s = m.labels.as_slice_mut().unwrap();
    s[fg] = FOREGROUND;
    s[bg] = BACKGROUND;
    m
}

/// Size-barrier instances: avoid the branch switch at size = 1/t^2,
/// where the barrier is only once differentiable.
fn barrier_instance(r: &mut R) -> (SoftmaxMaps, f64) {
    loop {
        let t = r.gen_range(1.0..3.0);
        let maps = random_maps(r, 8, 8);
        let kink = 1.0 / (t * t);
        let sizes = [maps.background.mean().unwrap(), maps.foreground.mean().unwrap()];
        if sizes.iter().all(|s| (s - kink).abs() > 1e-3) {
            return (maps, t);
        }
    }
}

pub fn criterion_2() -> Check {
    let t0 = Instant::now();
    let mut r = rng(21);
    let n = 25;
    let (mut ce, mut sb, mut crf) = (0.0f64, 0.0f64, 0.0f64);
    let mut interior = 0;
    for _ in 0..n {
        let maps = random_maps(&mut r, 8, 8);
        let mask = random_mask(&mut r, 8, 8);
        ce = ce.max(check_grad(
            &maps,
            |m| partial_cross_entropy_grad(&mask, m).unwrap().0,
            |m| partial_cross_entropy_grad(&mask, m).unwrap().1,
        ));

        let (maps, t) = barrier_instance(&mut r);
        let kink = 1.0 / (t * t);
        interior += [maps.background.mean().unwrap(), maps.foreground.mean().unwrap()]
            .iter()
            .any(|&s| s > kink) as usize;
        sb = sb.max(check_grad(
            &maps,
            |m| size_barrier(m, t).unwrap(),
            |m| size_barrier_grad(m, t).unwrap().1,
        ));

        let frame = random_frame(&mut r, 8, 8);
        let cfg = crf_cfg([1, 2][r.gen_range(0..2)]);
        let kernel = CrfKernel::new(&frame, &cfg).unwrap();
        let maps = random_maps(&mut r, 8, 8);
        crf = crf.max(check_grad(
            &maps,
            |m| crf_loss_grad(m, &kernel).unwrap().0,
            |m| crf_loss_grad(m, &kernel).unwrap().1,
        ));
    }
    ensure!(interior > 0, "no size-barrier instance reached the interior branch");
    for (name, e) in [("partial CE", ce), ("size barrier", sb), ("CRF", crf)] {
        ensure!(e <= 1e-4, "{name}: worst relative error {e:e} over {n} instances");
    }
    Ok(format!(
        "{n} random 8x8 instances each; worst rel err CE {ce:.1e}, size {sb:.1e} ({interior} interior), CRF {crf:.1e} ({:.1}s)",
        t0.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 3

pub fn prop_cam_tmp(cases: u32) -> Check {
    let strat = (1usize..10, 1usize..12, 1usize..12, any::<u64>(), 0usize..10, 0usize..9);
    runner(cases)
        .run(&strat, |(len, h, w, seed, t, n)| {
            let shot = random_shot(&mut rng(seed), len, h, w);
            let t = t % len;
            let base = &shot.cams[t].values;
            let a = cam_tmp(&select_sequence(&shot, t, n).unwrap()).unwrap();
            let b = cam_tmp(&select_sequence(&shot, t, n + 1).unwrap()).unwrap();
            prop_assert!(a.values.iter().zip(base).all(|(x, y)| x >= y), "below C_t");
            prop_assert!(b.values.iter().zip(&a.values).all(|(x, y)| x >= y), "shrank with n");
            Ok(())
        })
        .map(|_| format!("cam_tmp >= C_t and nondecreasing in n: {cases} cases"))
        .map_err(|e| e.to_string())
}

fn nested(inner: &BoundingBox, outer: &BoundingBox) -> bool {
    inner.x_min >= outer.x_min && inner.y_min >= outer.y_min && inner.x_max <= outer.x_max && inner.y_max <= outer.y_max
}

pub fn prop_box_tau(cases: u32) -> Check {
    let strat = (8usize..40, 8usize..40, 0.0f64..1.0, 0.0f64..1.0, 1.0f64..12.0, 1.0f64..12.0, 1u32..9, 1u32..9);
    runner(cases)
        .run(&strat, |(h, w, fy, fx, sy, sx, a, b)| {
            let cam = Cam::new(gaussian_blob(h, w, fy * (h - 1) as f64, fx * (w - 1) as f64, sy, sx), 0, 0).unwrap();
            let (lo, hi) = (a.min(b) as f32 / 10.0, a.max(b) as f32 / 10.0);
            let big = cam_to_box(&cam, lo).unwrap();
            let small = cam_to_box(&cam, hi).unwrap();
            prop_assert!(nested(&small, &big), "tau {lo}: {big:?}, tau {hi}: {small:?}");
            Ok(())
        })
        .map(|_| format!("cam_to_box nested as tau grows (unimodal maps): {cases} cases"))
        .map_err(|e| e.to_string())
}

pub fn prop_barrier(cases: u32) -> Check {
    let strat = (1.0f64..10.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0);
    runner(cases)
        .run(&strat, |(t, u, v, other)| {
            // both sizes on the interior branch: size >= 1/t^2
            let lo = 1.0 / (t * t);
            let (s1, s2) = (lo + u.min(v) * (1.0 - lo), lo + u.max(v) * (1.0 - lo));
            prop_assume!(s2 - s1 > 1e-9);
            prop_assert!(extended_log_barrier(-s2, t) < extended_log_barrier(-s1, t));
            // same through the map-level term, other channel held fixed
            let maps = |s: f64| SoftmaxMaps {
                background: Array2::from_elem((4, 4), other),
                foreground: Array2::from_elem((4, 4), s),
            };
            prop_assert!(size_barrier(&maps(s2), t).unwrap() < size_barrier(&maps(s1), t).unwrap());
            Ok(())
        })
        .map(|_| format!("size barrier decreasing in size on the interior branch: {cases} cases"))
        .map_err(|e| e.to_string())
}

pub fn criterion_3() -> Check {
    let t0 = Instant::now();
    let parts = [prop_cam_tmp(1000)?, prop_box_tau(1000)?, prop_barrier(1000)?];
    Ok(format!("{} ({:.1}s)", parts.join("; "), t0.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- 4

pub fn criterion_4() -> Check {
    let t0 = Instant::now();
    let draws = 100_000;
    let mut r = rng(41);
    let mut worst = 0.0f64;
    for (a, b) in [(0.2f32, 0.6f32), (0.9, 0.1), (0.5, 0.5), (0.03, 1.0)] {
        let cam = Cam::new(Array2::from_shape_vec((1, 2), vec![a, b]).unwrap(), 0, 0).unwrap();
        let region = [0usize, 1];
        let hits = (0..draws).filter(|_| sample_multinomial(&region, &cam, &mut r) == 0).count();
        let d = (hits as f64 / draws as f64 - a as f64 / (a + b) as f64).abs();
        worst = worst.max(d);
        ensure!(d <= 0.01, "multinomial ({a}, {b}): frequency off by {d:.4}");
    }
    let region: Vec<usize> = (3..13).collect();
    let k = region.len() as f64;
    let mut counts = [0usize; 13];
    for _ in 0..draws {
        counts[sample_uniform(&region, &mut r)] += 1;
    }
    let p = 1.0 / k;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    let mut worst_z = 0.0f64;
    for &i in &region {
        let z = (counts[i] as f64 - mean).abs() / sd;
        worst_z = worst_z.max(z);
        ensure!(z <= 3.0, "uniform pixel {i}: count {} is {z:.2} sigma from {mean}", counts[i]);
    }
    ensure!(counts[..3].iter().all(|&c| c == 0), "uniform draw left its region");
    Ok(format!(
        "multinomial worst |freq - p| {worst:.4} over 100k draws; uniform worst {worst_z:.2} sigma ({:.1}s)",
        t0.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 7

pub struct Tiny {
    pub classifier: Classifier,
    pub train: Vec<LoadedVideo>,
    pub val: Vec<LoadedVideo>,
    pub cfg: TrainConfig,
}

pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        videos: 6,
        shots_per_video: 1,
        frames_per_shot: 4,
        image_size: 32,
        body_min: 12,
        body_max: 16,
        val_videos_per_class: 1,
        test_videos_per_class: 0,
        ..SynthConfig::default()
    }
}

pub fn tiny_setup(seed: u64) -> Tiny {
    let (_, vids) = generate_in_memory(&tiny_synth(), seed).unwrap();
    let videos = from_synth(vids);
    let train_v = in_split(&videos, Split::Train);
    let ccfg = ClassifierTrainConfig {
        epochs: 1,
        batch_size: 4,
        ..Default::default()
    };
    let (classifier, _) = fit_classifier(&train_v, 2, &ccfg, 1, seed).unwrap();
    let mut cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        lr: 0.1,
        ..Default::default()
    };
    cfg.loss.lambda_crf = 1e-4;
    Tiny {
        classifier,
        val: in_split(&videos, Split::Val),
        train: train_v,
        cfg,
    }
}

pub fn tiny_train(t: &Tiny, seed: u64) -> TrainOutcome {
    let cams = all_video_cams(&t.classifier, &CamMethod::default(), &t.train).unwrap();
    let shots = train_shots(&t.train, &cams).unwrap();
    let model = DecoderModel::new(&t.classifier, t.cfg.arch.clone(), seed);
    train(model, &shots, &val_frames(&t.val), &t.cfg, seed, |_| {}).unwrap()
}

pub fn contract_encoder_freeze(t: &Tiny, out: &TrainOutcome) -> Check {
    let before = &t.classifier.backbone;
    ensure!(out.model.encoder == *before, "encoder weights changed during decoder training");
    let initial = DecoderModel::new(&t.classifier, t.cfg.arch.clone(), 5);
    ensure!(out.model.decoder != initial.decoder, "decoder did not train at all");
    Ok("encoder delta exactly 0".into())
}

pub fn contract_softmax(t: &Tiny, out: &TrainOutcome) -> Check {
    let mut worst = 0.0f64;
    for v in t.train.iter().chain(&t.val) {
        for s in &v.shots {
            for f in &s.frames {
                worst = worst.max(out.model.forward(f).unwrap().normalization_error());
                let p = t.classifier.classify(f).unwrap();
                worst = worst.max((p.sum() - 1.0).abs());
            }
        }
    }
    let mut r = rng(71);
    let l0 = Array2::from_shape_fn((8, 8), |_| r.gen_range(-800.0..800.0));
    let l1 = Array2::from_shape_fn((8, 8), |_| r.gen_range(-800.0..800.0));
    worst = worst.max(SoftmaxMaps::from_logits(&l0, &l1).normalization_error());
    let extreme = ndarray::Array1::from(vec![1e30f32, -1e30, 0.0]);
    worst = worst.max((softmax(&extreme).sum() - 1.0).abs());
    ensure!(worst <= 1e-6, "softmax normalization error {worst:e}");
    Ok(format!("softmax max |S0+S1-1| {worst:.1e}"))
}

fn fingerprint(l: &tcam::localize::Localization) -> (Option<BoundingBox>, usize, u64, Vec<u32>) {
    let cam = l.cam.as_ref().unwrap().values.iter().map(|v| v.to_bits()).collect();
    (l.bbox, l.class_id, l.score.to_bits(), cam)
}

pub fn contract_frame_independence(t: &Tiny, out: &TrainOutcome) -> Check {
    let frames: Vec<_> = t
        .train
        .iter()
        .chain(&t.val)
        .flat_map(|v| v.shots.iter().flat_map(|s| s.frames.iter()))
        .collect();
    let run = |order: &[usize]| {
        let mut res = vec![None; frames.len()];
        for &i in order {
            res[i] = Some(fingerprint(&infer_frame(&out.model, &t.classifier, frames[i], 0.5).unwrap()));
        }
        res
    };
    let fwd: Vec<usize> = (0..frames.len()).collect();
    let rev: Vec<usize> = fwd.iter().rev().copied().collect();
    let mut shuffled = fwd.clone();
    rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng(72));
    let a = run(&fwd);
    ensure!(a == run(&rev), "reversed frame order changed an output");
    ensure!(a == run(&shuffled), "shuffled frame order changed an output");
    Ok(format!("{} frames bit-identical under reordering", frames.len()))
}

pub fn contract_determinism(t: &Tiny, out: &TrainOutcome, seed: u64) -> Check {
    let again = tiny_train(t, seed);
    ensure!(out.log_jsonl() == again.log_jsonl(), "same seed produced a different metrics log");
    ensure!(out.model == again.model, "same seed produced different weights");
    let other = tiny_train(t, seed + 1);
    ensure!(out.log_jsonl() != other.log_jsonl(), "a different seed produced the same log");
    let a = tiny_setup(seed);
    ensure!(a.classifier == t.classifier, "classifier training is not deterministic");
    Ok("metrics logs byte-identical for equal seeds".into())
}

pub fn criterion_7() -> Check {
    let t0 = Instant::now();
    let seed = 5;
    let tiny = tiny_setup(seed);
    let out = tiny_train(&tiny, seed);
    let parts = [
        contract_encoder_freeze(&tiny, &out)?,
        contract_softmax(&tiny, &out)?,
        contract_frame_independence(&tiny, &out)?,
        contract_determinism(&tiny, &out, seed)?,
    ];
    Ok(format!("{} ({:.1}s)", parts.join("; "), t0.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- 8

pub fn bx(x0: usize, y0: usize, x1: usize, y1: usize) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

/// Two classes; class 0 has one test video with 4 annotated frames (plus
/// one unannotated), class 1 has one test video with 2 annotated frames
/// carrying two boxes each. A train video is present and must be ignored.
pub fn fixture_manifest() -> VideoManifest {
    let frame = |i: usize, boxes: Option<Vec<BoundingBox>>| FrameEntry {
        path: format!("{i}.png"),
        frame_index: i,
        gt_boxes: boxes,
    };
    let video = |id: &str, class_id: usize, split: Split, frames: Vec<FrameEntry>| VideoEntry {
        video_id: id.into(),
        class_id,
        split,
        shots: vec![ShotEntry {
            shot_id: "s0".into(),
            frames,
        }],
    };
    let g = bx(0, 0, 10, 10);
    let pair = vec![bx(0, 0, 10, 10), bx(20, 20, 30, 30)];
    VideoManifest {
        class_names: vec!["a".into(), "b".into()],
        image_size: (32, 32),
        videos: vec![
            video("ta", 0, Split::Train, vec![frame(0, Some(vec![g]))]),
            video(
                "va",
                0,
                Split::Test,
                vec![
                    frame(0, Some(vec![g])),
                    frame(1, Some(vec![g])),
                    frame(2, None),
                    frame(3, Some(vec![g])),
                    frame(4, Some(vec![g])),
                ],
            ),
            video("vb", 1, Split::Test, vec![frame(0, Some(pair.clone())), frame(1, Some(pair))]),
        ],
        root: std::env::temp_dir(),
    }
}

pub fn pred(video: &str, i: usize, class_id: usize, b: Option<BoundingBox>) -> Prediction {
    Prediction {
        video_id: video.into(),
        shot_id: "s0".into(),
        frame_index: i,
        class_id,
        score: 0.9,
        bbox: b,
    }
}

pub fn fixture_predictions() -> Vec<Prediction> {
    vec![
        // IoU exactly 0.5: 50 / 100, a miss under the strict rule
        pred("va", 0, 0, Some(bx(0, 0, 10, 5))),
        // IoU 100/196, just above 0.5: a hit
        pred("va", 1, 0, Some(bx(0, 0, 14, 14))),
        // no box: a miss, but the class is right
        pred("va", 3, 0, None),
        // perfect box, wrong class
        pred("va", 4, 1, Some(bx(0, 0, 10, 10))),
        // matches the second ground-truth box exactly
        pred("vb", 0, 1, Some(bx(20, 20, 30, 30))),
        // IoU 0.25 with the first box, 0 with the second
        pred("vb", 1, 0, Some(bx(0, 0, 5, 5))),
        // the unannotated frame and the train video are ignored
        pred("va", 2, 0, None),
    ]
}

pub fn criterion_8() -> Check {
    let m = fixture_manifest();
    let preds = fixture_predictions();
    let rep = evaluate(&preds, &m, Some(Split::Test)).map_err(|e| e.to_string())?;
    // class a: hits at frames 1 and 4 of 4; class b: hit at frame 0 of 2
    ensure!(rep.frames == 6, "expected 6 annotated test frames, got {}", rep.frames);
    ensure!(rep.classes[0].corloc == 2.0 / 4.0, "class a corloc {}", rep.classes[0].corloc);
    ensure!(rep.classes[1].corloc == 1.0 / 2.0, "class b corloc {}", rep.classes[1].corloc);
    ensure!(rep.overall_corloc == 3.0 / 6.0, "overall corloc {}", rep.overall_corloc);
    ensure!(rep.average_corloc == 0.5, "average corloc {}", rep.average_corloc);
    // classification: a right on 0, 1, 3 (3/4); b right on 0 (1/2)
    ensure!(rep.classes[0].cl_accuracy == 3.0 / 4.0, "class a accuracy {}", rep.classes[0].cl_accuracy);
    ensure!(rep.overall_cl_accuracy == 4.0 / 6.0, "overall accuracy {}", rep.overall_cl_accuracy);
    ensure!(rep.average_cl_accuracy == (0.75 + 0.5) / 2.0, "average accuracy {}", rep.average_cl_accuracy);

    // boundary alone: IoU exactly 0.5 never counts
    let edge = evaluate(&preds[..1], &{
        let mut m = m.clone();
        m.videos.retain(|v| v.video_id == "va");
        m.videos[0].shots[0].frames.truncate(1);
        m
    }, None)
    .map_err(|e| e.to_string())?;
    ensure!(edge.overall_corloc == 0.0, "IoU == 0.5 counted as a hit");

    let missing = evaluate(&preds[1..], &m, Some(Split::Test));
    ensure!(missing.is_err(), "a missing prediction was not reported");
    let mut dup = preds.clone();
    dup.push(preds[0].clone());
    ensure!(evaluate(&dup, &m, Some(Split::Test)).is_err(), "a duplicate prediction was not reported");
    Ok("corloc 3/6, per-class 2/4 and 1/2, accuracy 4/6; IoU == 0.5 is a miss".into())
}
