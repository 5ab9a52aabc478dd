mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use tcam::cams::{CheckpointMeta, Classifier};
use tcam::data::manifest::Split;
use tcam::data::{evaluate, generate_synthetic, ingest_yto, Prediction, VideoManifest};
use tcam::decoder::{foreground_cam, train, DecoderMeta, DecoderModel};
use tcam::localize::tau_grid;
use tcam::pipeline;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "tcam", version, about = "Weakly supervised video object localization with temporal CAMs")]
struct Cli {
    /// Run configuration (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic dataset into the run directory.
    GenSynth,
    /// Train the frame classifier on the train split.
    TrainClassifier,
    /// Cache per-frame CAMs of the train split.
    DumpCams,
    /// Train the decoder from cached CAMs.
    TrainDecoder,
    /// Predict boxes for one split.
    Infer {
        /// train, val or test; defaults to infer.split from the config.
        #[arg(long)]
        split: Option<String>,
    },
    /// Score predictions (CorLoc and classification accuracy).
    Evaluate {
        /// Defaults to the run's preds/<split>.jsonl.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Defaults to the dataset of the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
}

struct Run {
    cfg: RunConfig,
    hash: String,
    dir: PathBuf,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn mkdir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(p)
    }

    fn write_json(&self, rel: &str, v: &impl Serialize) -> Result<()> {
        let p = self.path(rel);
        let mut bytes = serde_json::to_vec_pretty(v)?;
        bytes.push(b'\n');
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    fn manifest(&self) -> Result<VideoManifest> {
        match &self.cfg.data.root {
            None => {
                let p = self.path("data/manifest.json");
                if !p.exists() {
                    bail!("{} not found; run gen-synth first", p.display());
                }
                Ok(VideoManifest::load(p)?)
            }
            Some(r) if r.join("manifest.json").exists() => Ok(VideoManifest::load(r.join("manifest.json"))?),
            Some(r) => Ok(ingest_yto(r, &self.cfg.data.split)?),
        }
    }

    fn classifier(&self) -> Result<Classifier> {
        let p = self.path("checkpoints/classifier.arrs");
        if !p.exists() {
            bail!("{} not found; run train-classifier first", p.display());
        }
        Ok(Classifier::load(p)?.0)
    }

    fn decoder(&self, c: &Classifier) -> Result<DecoderModel> {
        let p = self.path("checkpoints/decoder.arrs");
        if !p.exists() {
            bail!("{} not found; run train-decoder first", p.display());
        }
        Ok(DecoderModel::load(p, c)?.0)
    }
}

fn parse_split(s: &str) -> Result<Split> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .with_context(|| format!("unknown split `{s}` (expected train, val or test)"))
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn init_workers() -> Result<()> {
    if let Ok(v) = std::env::var("TCAM_NUM_WORKERS") {
        let n: usize = v.parse().with_context(|| format!("TCAM_NUM_WORKERS={v} is not a number"))?;
        if n == 0 {
            bail!("TCAM_NUM_WORKERS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() {
    if let Err(e) = real_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    init_workers()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let hash = cfg.hash();
    let dir = cfg.run_dir(&cli.out);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let run = Run { cfg, hash, dir };
    run.write_json("config.json", &run.cfg)?;
    eprintln!("run directory {}", run.dir.display());
    match cli.cmd {
        Cmd::GenSynth => gen_synth(&run),
        Cmd::TrainClassifier => train_classifier(&run),
        Cmd::DumpCams => dump_cams(&run),
        Cmd::TrainDecoder => train_decoder(&run),
        Cmd::Infer { split } => {
            let s = split.map_or(Ok(run.cfg.infer.split), |s| parse_split(&s))?;
            infer(&run, s)
        }
        Cmd::Evaluate {
            predictions,
            manifest,
            split,
        } => {
            let s = split.map_or(Ok(run.cfg.infer.split), |s| parse_split(&s))?;
            evaluate_cmd(&run, predictions, manifest, s)
        }
    }
}

fn gen_synth(run: &Run) -> Result<()> {
    if run.cfg.data.root.is_some() {
        bail!("data.root is set; gen-synth only writes synthetic data into the run directory");
    }
    let dir = run.mkdir("data")?;
    let m = generate_synthetic(&run.cfg.data.synth, run.cfg.seed, &dir)?;
    let frames: usize = m.videos.iter().flat_map(|v| &v.shots).map(|s| s.frames.len()).sum();
    println!("{} videos, {frames} frames -> {}", m.videos.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    #[serde(flatten)]
    inner: T,
}

fn train_classifier(run: &Run) -> Result<()> {
    let m = run.manifest()?;
    let videos = pipeline::load_videos(&m, Some(Split::Train))?;
    let sec = &run.cfg.classifier;
    let (c, log) = pipeline::fit_classifier(&videos, m.num_classes(), &sec.train, sec.frame_stride, run.cfg.seed)?;
    run.mkdir("checkpoints")?;
    let meta = CheckpointMeta {
        arch: sec.train.arch.clone(),
        num_classes: m.num_classes(),
        input_size: m.image_size,
        seed: run.cfg.seed,
        epochs: sec.train.epochs,
        config_hash: run.hash.clone(),
    };
    c.save(run.path("checkpoints/classifier.arrs"), &meta)?;
    run.write_json(
        "checkpoints/classifier_log.json",
        &Stamped {
            config_hash: &run.hash,
            inner: &log,
        },
    )?;
    println!(
        "classifier: loss {:.4} -> {:.4}, train accuracy {:.3}",
        log.initial_loss,
        log.epoch_losses.last().copied().unwrap_or(log.initial_loss),
        log.final_accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct CamCacheMeta<'a> {
    method: &'a tcam::cams::CamMethod,
    videos: usize,
    frames: usize,
}

fn dump_cams(run: &Run) -> Result<()> {
    let m = run.manifest()?;
    let c = run.classifier()?;
    let videos = pipeline::load_videos(&m, Some(Split::Train))?;
    let cams = pipeline::all_video_cams(&c, &run.cfg.cam, &videos)?;
    let dir = run.mkdir("cams")?;
    let mut frames = 0;
    for (v, vc) in videos.iter().zip(&cams) {
        pipeline::save_video_cams(&dir, v, vc)?;
        frames += vc.iter().map(Vec::len).sum::<usize>();
    }
    run.write_json(
        "cams/meta.json",
        &Stamped {
            config_hash: &run.hash,
            inner: CamCacheMeta {
                method: &run.cfg.cam,
                videos: videos.len(),
                frames,
            },
        },
    )?;
    println!("{frames} CAMs for {} videos -> {}", videos.len(), dir.display());
    Ok(())
}

fn train_decoder(run: &Run) -> Result<()> {
    let m = run.manifest()?;
    let c = run.classifier()?;
    let videos = pipeline::load_videos(&m, Some(Split::Train))?;
    let cam_dir = run.path("cams");
    if !cam_dir.join("meta.json").exists() {
        bail!("{} has no CAM cache; run dump-cams first", cam_dir.display());
    }
    let cams = videos
        .iter()
        .map(|v| pipeline::load_video_cams(&cam_dir, v))
        .collect::<tcam::Result<Vec<_>>>()?;
    let shots = pipeline::train_shots(&videos, &cams)?;
    let val = pipeline::val_frames(&pipeline::load_videos(&m, Some(Split::Val))?);
    let cfg = &run.cfg.decoder;
    let model = DecoderModel::new(&c, cfg.arch.clone(), run.cfg.seed);
    let out = train(model, &shots, &val, cfg, run.cfg.seed, |e| {
        eprintln!(
            "epoch {:>3}  ce {:.4}  size {:.4}  crf {:.1}  val corloc {}",
            e.epoch,
            e.losses.partial_ce,
            e.losses.size_barrier,
            e.losses.crf,
            e.val_corloc.map_or("-".into(), |v| format!("{v:.3}"))
        )
    })?;
    run.mkdir("checkpoints")?;
    let meta = DecoderMeta {
        arch: cfg.arch.clone(),
        encoder_arch: c.backbone.arch.clone(),
        input_size: c.input_size,
        encoder_checksum: tcam::nn::Params::checksum(&c.backbone),
        seed: run.cfg.seed,
        best_epoch: out.best_epoch,
        config_hash: run.hash.clone(),
    };
    out.model.save(run.path("checkpoints/decoder.arrs"), &meta)?;
    let p = run.path("metrics.jsonl");
    let mut f = fs::File::create(&p).with_context(|| format!("writing {}", p.display()))?;
    for l in &out.log {
        let line = serde_json::to_string(&Stamped {
            config_hash: &run.hash,
            inner: l,
        })?;
        writeln!(f, "{line}")?;
    }
    println!(
        "decoder: best epoch {} (val corloc {})",
        out.best_epoch,
        out.best_val_corloc.map_or("-".into(), |v| format!("{v:.3}"))
    );
    Ok(())
}

#[derive(Serialize)]
struct PredMeta {
    split: Split,
    tau: f32,
    tau_source: &'static str,
    frames: usize,
}

fn infer(run: &Run, split: Split) -> Result<()> {
    let m = run.manifest()?;
    let c = run.classifier()?;
    let model = run.decoder(&c)?;
    let icfg = &run.cfg.infer;
    let (tau, source) = match icfg.tau {
        Some(t) => (t, "config"),
        None => {
            let val = pipeline::val_frames(&pipeline::load_videos(&m, Some(Split::Val))?);
            if val.is_empty() {
                (run.cfg.decoder.tau, "decoder.tau")
            } else {
                (pipeline::decoder_tau(&model, &val, &tau_grid())?.0, "validation")
            }
        }
    };
    let videos = pipeline::load_videos(&m, Some(split))?;
    let preds = pipeline::predict_decoder(&model, &c, &videos, tau, icfg.all_frames)?;
    let dir = run.mkdir("preds")?;
    let name = split_name(split);
    let p = dir.join(format!("{name}.jsonl"));
    let mut f = fs::File::create(&p).with_context(|| format!("writing {}", p.display()))?;
    for pr in &preds {
        writeln!(f, "{}", serde_json::to_string(pr)?)?;
    }
    run.write_json(
        &format!("preds/{name}.meta.json"),
        &Stamped {
            config_hash: &run.hash,
            inner: PredMeta {
                split,
                tau,
                tau_source: source,
                frames: preds.len(),
            },
        },
    )?;
    if icfg.overlays {
        write_overlays(&dir.join("overlays"), &model, &videos, &preds)?;
    }
    println!("{} predictions (tau {tau}, {source}) -> {}", preds.len(), p.display());
    Ok(())
}

fn write_overlays(dir: &Path, model: &DecoderModel, videos: &[pipeline::LoadedVideo], preds: &[Prediction]) -> Result<()> {
    let mut i = 0;
    for v in videos {
        let vdir = dir.join(&v.video_id);
        fs::create_dir_all(&vdir)?;
        for s in &v.shots {
            for (fr, gt) in s.frames.iter().zip(&s.gt_boxes) {
                let Some(p) = preds.get(i).filter(|p| p.frame_index == fr.frame_index && p.shot_id == s.shot_id) else {
                    continue;
                };
                i += 1;
                let maps = model.forward(fr)?;
                let cam = foreground_cam(&maps, fr.frame_index, p.class_id);
                let img = tcam::imageio::overlay(&fr.pixels, &cam.values, gt.as_deref().unwrap_or(&[]), p.bbox.as_ref());
                tcam::imageio::write_rgb(vdir.join(format!("{}_{:05}.png", s.shot_id, fr.frame_index)), &img)?;
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    split: Split,
    predictions: String,
    report: &'a tcam::data::LocalizationReport,
}

fn evaluate_cmd(run: &Run, preds: Option<PathBuf>, manifest: Option<PathBuf>, split: Split) -> Result<()> {
    let m = match manifest {
        Some(p) => VideoManifest::load(&p)?,
        None => run.manifest()?,
    };
    let p = preds.unwrap_or_else(|| run.path(&format!("preds/{}.jsonl", split_name(split))));
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let preds = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str::<Prediction>(l).with_context(|| format!("{}:{}", p.display(), i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&preds, &m, Some(split))?;
    println!("{report}");
    run.write_json(
        "report.json",
        &Stamped {
            config_hash: &run.hash,
            inner: ReportFile {
                split,
                predictions: p.display().to_string(),
                report: &report,
            },
        },
    )?;
    Ok(())
}
