//! Stages shared by the command line and the experiments: loading videos,
//! building the classifier set, per-shot CAMs, predictions.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::arrays::{self, NamedArray};
use crate::cams::{extract_cam, ClassifierTrainConfig, CamMethod, Classifier, LabeledImage, train_classifier};
use crate::data::manifest::{Split, VideoManifest};
use crate::data::metrics::Prediction;
use crate::data::synth::SynthVideo;
use crate::decoder::{foreground_cam, DecoderModel, TrainShot, ValFrame};
use crate::domain::{BoundingBox, Cam, Frame};
use crate::error::{io_err, Result, TcamError};
use crate::localize::{cam_to_box, infer_frame, select_tau};
use crate::par;

#[derive(Debug, Clone)]
pub struct LoadedShot {
    pub shot_id: String,
    pub frames: Vec<Frame>,
    /// Parallel to `frames`.
    pub gt_boxes: Vec<Option<Vec<BoundingBox>>>,
}

#[derive(Debug, Clone)]
pub struct LoadedVideo {
    pub video_id: String,
    pub class_id: usize,
    pub split: Split,
    pub shots: Vec<LoadedShot>,
}

impl LoadedVideo {
    /// `(frame, boxes)` for every annotated frame.
    pub fn annotated(&self) -> impl Iterator<Item = (&Frame, &[BoundingBox])> {
        self.shots.iter().flat_map(|s| {
            s.frames
                .iter()
                .zip(&s.gt_boxes)
                .filter_map(|(f, b)| b.as_deref().filter(|b| !b.is_empty()).map(|b| (f, b)))
        })
    }
}

/// Reads every frame of the selected split into memory.
pub fn load_videos(m: &VideoManifest, split: Option<Split>) -> Result<Vec<LoadedVideo>> {
    let entries: Vec<_> = m
        .videos
        .iter()
        .filter(|v| split.is_none_or(|s| s == v.split))
        .collect();
    par::map(&entries, |v| -> Result<LoadedVideo> {
        let shots = v
            .shots
            .iter()
            .map(|s| {
                let mut fs: Vec<_> = s.frames.iter().collect();
                fs.sort_by_key(|f| f.frame_index);
                Ok(LoadedShot {
                    shot_id: s.shot_id.clone(),
                    frames: fs.iter().map(|f| m.load_frame(v, s, f)).collect::<Result<_>>()?,
                    gt_boxes: fs.iter().map(|f| f.gt_boxes.clone()).collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(LoadedVideo {
            video_id: v.video_id.clone(),
            class_id: v.class_id,
            split: v.split,
            shots,
        })
    })
    .into_iter()
    .collect()
}

pub fn from_synth(videos: Vec<SynthVideo>) -> Vec<LoadedVideo> {
    videos
        .into_iter()
        .map(|v| LoadedVideo {
            video_id: v.video_id,
            class_id: v.class_id,
            split: v.split,
            shots: v
                .shots
                .into_iter()
                .map(|s| LoadedShot {
                    shot_id: s.shot_id,
                    gt_boxes: s.boxes.into_iter().map(|b| Some(vec![b])).collect(),
                    frames: s.frames,
                })
                .collect(),
        })
        .collect()
}

pub fn in_split(videos: &[LoadedVideo], split: Split) -> Vec<LoadedVideo> {
    videos.iter().filter(|v| v.split == split).cloned().collect()
}

/// Every `stride`-th frame of each shot, labelled with its video's class.
pub fn classifier_set(videos: &[LoadedVideo], stride: usize) -> Vec<LabeledImage> {
    videos
        .iter()
        .flat_map(|v| {
            v.shots.iter().flat_map(move |s| {
                s.frames.iter().step_by(stride.max(1)).map(move |f| LabeledImage {
                    chw: f.to_chw(),
                    label: v.class_id,
                })
            })
        })
        .collect()
}

pub fn fit_classifier(
    train: &[LoadedVideo],
    num_classes: usize,
    cfg: &ClassifierTrainConfig,
    stride: usize,
    seed: u64,
) -> Result<(Classifier, crate::cams::ClassifierLog)> {
    train_classifier(&classifier_set(train, stride), num_classes, cfg, seed)
}

/// CAM of the video's own class for every frame, shot by shot.
pub fn video_cams(c: &Classifier, method: &CamMethod, v: &LoadedVideo) -> Result<Vec<Vec<Cam>>> {
    v.shots
        .iter()
        .map(|s| s.frames.iter().map(|f| extract_cam(c, method, f, v.class_id)).collect())
        .collect()
}

pub fn all_video_cams(c: &Classifier, method: &CamMethod, videos: &[LoadedVideo]) -> Result<Vec<Vec<Vec<Cam>>>> {
    par::map(videos, |v| video_cams(c, method, v)).into_iter().collect()
}

pub fn train_shots(videos: &[LoadedVideo], cams: &[Vec<Vec<Cam>>]) -> Result<Vec<TrainShot>> {
    let mut out = Vec::new();
    for (v, vc) in videos.iter().zip(cams) {
        for (s, sc) in v.shots.iter().zip(vc) {
            out.push(TrainShot::new(v.class_id, s.frames.clone(), sc.clone())?);
        }
    }
    Ok(out)
}

pub fn val_frames(videos: &[LoadedVideo]) -> Vec<ValFrame> {
    videos
        .iter()
        .flat_map(|v| {
            v.annotated().map(|(f, b)| ValFrame {
                frame: f.clone(),
                gt_boxes: b.to_vec(),
            })
        })
        .collect()
}

fn prediction(f: &Frame, class_id: usize, score: f64, bbox: Option<BoundingBox>) -> Prediction {
    Prediction {
        video_id: f.video_id.clone(),
        shot_id: f.shot_id.clone(),
        frame_index: f.frame_index,
        class_id,
        score,
        bbox,
    }
}

fn frames_to_predict(videos: &[LoadedVideo], all_frames: bool) -> Vec<&Frame> {
    if all_frames {
        videos
            .iter()
            .flat_map(|v| v.shots.iter().flat_map(|s| s.frames.iter()))
            .collect()
    } else {
        videos.iter().flat_map(|v| v.annotated().map(|(f, _)| f)).collect()
    }
}

/// Decoder predictions, one per annotated frame (or every frame).
pub fn predict_decoder(
    model: &DecoderModel,
    c: &Classifier,
    videos: &[LoadedVideo],
    tau: f32,
    all_frames: bool,
) -> Result<Vec<Prediction>> {
    let frames = frames_to_predict(videos, all_frames);
    par::map(&frames, |f| {
        infer_frame(model, c, f, tau).map(|l| prediction(f, l.class_id, l.score, l.bbox))
    })
    .into_iter()
    .collect()
}

/// Baseline: box straight from the classifier CAM of the predicted class.
pub fn predict_cam(
    c: &Classifier,
    method: &CamMethod,
    videos: &[LoadedVideo],
    tau: f32,
    all_frames: bool,
) -> Result<Vec<Prediction>> {
    let frames = frames_to_predict(videos, all_frames);
    par::map(&frames, |f| -> Result<Prediction> {
        let (k, score) = c.predict(f)?;
        let cam = extract_cam(c, method, f, k)?;
        let bbox = match cam_to_box(&cam, tau) {
            Ok(b) => Some(b),
            Err(TcamError::NoLocalizableRegion) => None,
            Err(e) => return Err(e),
        };
        Ok(prediction(f, k, score, bbox))
    })
    .into_iter()
    .collect()
}

/// Threshold maximizing CorLoc of the decoder's maps on validation frames.
pub fn decoder_tau(model: &DecoderModel, val: &[ValFrame], taus: &[f32]) -> Result<(f32, f64)> {
    let cams = par::map(val, |v| model.forward(&v.frame).map(|m| foreground_cam(&m, 0, 0)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<_> = cams.iter().zip(val).map(|(c, v)| (c, &v.gt_boxes[..])).collect();
    select_tau(&items, taus)
}

/// Threshold maximizing CorLoc of classifier CAMs (predicted class).
pub fn cam_tau(c: &Classifier, method: &CamMethod, val: &[ValFrame], taus: &[f32]) -> Result<(f32, f64)> {
    let cams = par::map(val, |v| -> Result<Cam> {
        let (k, _) = c.predict(&v.frame)?;
        extract_cam(c, method, &v.frame, k)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let items: Vec<_> = cams.iter().zip(val).map(|(c, v)| (c, &v.gt_boxes[..])).collect();
    select_tau(&items, taus)
}

/// `<dir>/<video>/<shot>.arrs`, one `f32 H x W` array per frame, named by
/// frame index.
pub fn save_video_cams(dir: &Path, v: &LoadedVideo, cams: &[Vec<Cam>]) -> Result<()> {
    let vdir = dir.join(&v.video_id);
    fs::create_dir_all(&vdir).map_err(io_err(&vdir))?;
    for (s, sc) in v.shots.iter().zip(cams) {
        let arrays: Vec<NamedArray> = sc
            .iter()
            .map(|c| {
                let (h, w) = c.values.dim();
                NamedArray::f32(
                    c.frame_index.to_string(),
                    ArrayD::from_shape_vec(IxDyn(&[h, w]), c.values.iter().copied().collect()).unwrap(),
                )
            })
            .collect();
        arrays::save_arrays(vdir.join(format!("{}.arrs", s.shot_id)), &arrays)?;
    }
    Ok(())
}

pub fn load_video_cams(dir: &Path, v: &LoadedVideo) -> Result<Vec<Vec<Cam>>> {
    v.shots
        .iter()
        .map(|s| {
            let file = arrays::load_arrays(dir.join(&v.video_id).join(format!("{}.arrs", s.shot_id)))?;
            s.frames
                .iter()
                .map(|f| {
                    let a = file.get_f32(&f.frame_index.to_string())?;
                    let values = a
                        .clone()
                        .into_dimensionality::<ndarray::Ix2>()
                        .map_err(|_| TcamError::CorruptContainer(format!("cam {} is not 2-D", f.frame_index)))?;
                    Cam::new(values, f.frame_index, v.class_id)
                })
                .collect()
        })
        .collect()
}
