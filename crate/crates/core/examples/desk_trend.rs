//! Ablation on the synthetic benchmark: CAM baseline, pseudo-labels only,
//! full objective over a list of temporal dependencies n.
//!
//! cargo run --release --example desk_trend -- \
//!     [seeds] [epochs] [lr] [lambda_crf] [ns] [speed] [body_min] [body_max] [emblem_scale]
//!
//! Lists are comma separated, e.g. `0,1,2`; means are printed at the end.

use std::time::Instant;

use tcam::cams::{CamMethod, ClassifierTrainConfig};
use tcam::data::manifest::Split;
use tcam::data::metrics::evaluate;
use tcam::data::synth::{generate_in_memory, SynthConfig};
use tcam::decoder::{train, DecoderModel, TrainConfig};
use tcam::localize::tau_grid;
use tcam::pipeline::*;

fn main() -> tcam::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: Vec<u64> = args
        .get(1)
        .map_or("0".into(), |s| s.clone())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    let epochs: usize = args.get(2).map_or(30, |s| s.parse().unwrap());
    let lr: f32 = args.get(3).map_or(0.1, |s| s.parse().unwrap());
    let lambda: f64 = args.get(4).map_or(1e-4, |s| s.parse().unwrap());
    let ns: Vec<usize> = args
        .get(5)
        .map_or("0,1".into(), |s| s.clone())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    let mut synth = SynthConfig::default();
    if let Some(v) = args.get(6) {
        synth.speed = v.parse().unwrap();
    }
    if let Some(v) = args.get(7) {
        synth.body_min = v.parse().unwrap();
    }
    if let Some(v) = args.get(8) {
        synth.body_max = v.parse().unwrap();
    }
    if let Some(v) = args.get(9) {
        synth.emblem_scale = v.parse().unwrap();
    }
    let mut table: Vec<(String, Vec<f64>)> = Vec::new();
    for &seed in &seeds {
        for (name, v) in run(&synth, seed, epochs, lr, lambda, &ns)? {
            match table.iter_mut().find(|(n, _)| *n == name) {
                Some((_, vs)) => vs.push(v),
                None => table.push((name, vec![v])),
            }
        }
    }
    println!("\nmean test CorLoc over seeds {seeds:?}");
    for (name, vs) in table {
        println!("  {name:<12} {:.3}  {vs:.3?}", vs.iter().sum::<f64>() / vs.len() as f64);
    }
    Ok(())
}

fn run(synth: &SynthConfig, seed: u64, epochs: usize, lr: f32, lambda: f64, ns: &[usize]) -> tcam::Result<Vec<(String, f64)>> {
    let mut results = Vec::new();
    println!("== seed {seed}");

    let t0 = Instant::now();
    let (manifest, vids) = generate_in_memory(synth, seed)?;
    let videos = from_synth(vids);
    let (train_v, val_v, test_v) = (
        in_split(&videos, Split::Train),
        in_split(&videos, Split::Val),
        in_split(&videos, Split::Test),
    );
    println!("data {:.1}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let ccfg = ClassifierTrainConfig::default();
    let (clf, log) = fit_classifier(&train_v, synth.num_classes, &ccfg, 1, seed)?;
    println!(
        "classifier {:.1}s loss {:.3} -> {:.3} acc {:.3}",
        t0.elapsed().as_secs_f64(),
        log.initial_loss,
        log.epoch_losses.last().unwrap(),
        log.final_accuracy
    );

    let method = CamMethod::default();
    let val = val_frames(&val_v);
    let (tau, vc) = cam_tau(&clf, &method, &val, &tau_grid())?;
    let preds = predict_cam(&clf, &method, &test_v, tau, false)?;
    let rep = evaluate(&preds, &manifest, Some(Split::Test))?;
    println!("cam baseline tau {tau} val {vc:.3} test corloc {:.3} cl {:.3}", rep.overall_corloc, rep.overall_cl_accuracy);
    results.push(("cam".to_string(), rep.overall_corloc));

    let t0 = Instant::now();
    let cams = all_video_cams(&clf, &method, &train_v)?;
    let shots = train_shots(&train_v, &cams)?;
    println!("cams {:.1}s, {} shots", t0.elapsed().as_secs_f64(), shots.len());

    let variants: Vec<(String, TrainConfig)> = {
        let mut base = TrainConfig { epochs, lr, ..Default::default() };
        base.loss.lambda_crf = lambda;
        let mut pseudo = base.clone();
        pseudo.n = 0;
        pseudo.loss.use_crf = false;
        pseudo.loss.use_size = false;
        let mut v = vec![("pseudo-only".to_string(), pseudo)];
        for &n in ns {
            v.push((format!("full n={n}"), TrainConfig { n, ..base.clone() }));
        }
        v
    };
    for (name, cfg) in variants {
        let t0 = Instant::now();
        let model = DecoderModel::new(&clf, cfg.arch.clone(), seed);
        let out = train(model, &shots, &val, &cfg, seed, |e| {
            eprintln!("  {} ce {:.3} size {:.3} crf {:.1} deg {} val {:?}", e.epoch, e.losses.partial_ce, e.losses.size_barrier, e.losses.crf, e.degenerate_cams, e.val_corloc)
        })?;
        let (tau, vc) = decoder_tau(&out.model, &val, &tau_grid())?;
        let preds = predict_decoder(&out.model, &clf, &test_v, tau, false)?;
        let rep = evaluate(&preds, &manifest, Some(Split::Test))?;
        println!(
            "{name}: {:.1}s best epoch {} tau {tau} val {vc:.3} test corloc {:.3}",
            t0.elapsed().as_secs_f64(),
            out.best_epoch,
            rep.overall_corloc
        );
        results.push((name.to_string(), rep.overall_corloc));
    }
    Ok(results)
}
