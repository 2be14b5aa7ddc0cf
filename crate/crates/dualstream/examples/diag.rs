//! Temporary training diagnostics for the smoke-test fixture. Not shipped.

use std::time::Instant;

use dualstream::codec::corpus::synth_corpus;
use dualstream::codec::train::{segment_corpus, TrainConfig, Trainer};
use dualstream::codec::{Codec, CodecConfig, SegmentData, Variant};
use dualstream::nn::Graph;

fn fixture_config() -> CodecConfig {
    let mut config = CodecConfig::with_variant(Variant::Hz25);
    config.h = 64;
    config.n_layers = 4;
    config.rvq1_size = 1024;
    config.rest_size = 256;
    config
}

// ── PCA floor oracle ────────────────────────────────────────────────────────

/// Top-k eigenvalues of the pooled-target frame covariance via power
/// iteration with deflation, to bound the best rank-k linear reconstruction.
fn cmd_floor() {
    let corpus = synth_corpus(1, 64, 1.0, 24000);
    let mut model = Codec::new(fixture_config(), 0).unwrap();
    model.extractor.fit(&mut model.store, &corpus).unwrap();

    let dim = model.config.h;
    let factor = 2usize;
    let mut frames: Vec<Vec<f64>> = Vec::new();
    for utt in &corpus {
        let f = model.extractor.extract(&model.store, utt).unwrap();
        let pooled_t = f.frames / factor;
        for t in 0..pooled_t {
            let mut row = vec![0.0; dim];
            for (c, slot) in row.iter_mut().enumerate() {
                for j in 0..factor {
                    *slot += f.at(c, t * factor + j) / factor as f64;
                }
            }
            frames.push(row);
        }
    }
    let n = frames.len() as f64;
    let mut mean = vec![0.0; dim];
    for row in &frames {
        for c in 0..dim {
            mean[c] += row[c] / n;
        }
    }
    let mut cov = vec![0.0; dim * dim];
    for row in &frames {
        for a in 0..dim {
            for b in 0..dim {
                cov[a * dim + b] += (row[a] - mean[a]) * (row[b] - mean[b]) / n;
            }
        }
    }
    let trace: f64 = (0..dim).map(|c| cov[c * dim + c]).sum();
    let zero_pred_mse: f64 = frames
        .iter()
        .map(|row| row.iter().map(|v| v * v).sum::<f64>() / dim as f64)
        .sum::<f64>()
        / n;

    let mut eigs = Vec::new();
    for _ in 0..16 {
        let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let mut next = vec![0.0; dim];
            for a in 0..dim {
                for b in 0..dim {
                    next[a] += cov[a * dim + b] * v[b];
                }
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut next {
                *x /= norm;
            }
            lambda = norm;
            v = next;
        }
        eigs.push(lambda);
        for a in 0..dim {
            for b in 0..dim {
                cov[a * dim + b] -= lambda * v[a] * v[b];
            }
        }
    }
    println!(
        "frames: {}  trace: {trace:.4}  zero-pred per-elem mse: {zero_pred_mse:.4}",
        frames.len()
    );
    let mut cum = 0.0;
    for (i, l) in eigs.iter().enumerate() {
        cum += l;
        println!(
            "rank {:>2}: eig {:8.4}  cum frac {:.4}  linear floor (per-elem mse) {:.4}",
            i + 1,
            l,
            cum / trace,
            (trace - cum).max(0.0) / dim as f64
        );
    }
}

// ── Gradient attribution ────────────────────────────────────────────────────

fn grad_norms_by_prefix(model: &Codec, seg: &SegmentData, loss: &str) {
    let mut g = Graph::new(&model.store);
    let f = model.forward_on_graph(&mut g, seg, 3, false).unwrap();
    let target = match loss {
        "mel" => f.mel_multi_scale,
        "ssl" => f.ssl_mse,
        "total" => f.total,
        _ => unreachable!(),
    };
    g.tape.backward(target);
    let mut groups: Vec<(&str, f64)> = vec![
        ("semantic.enc", 0.0),
        ("semantic.cb", 0.0),
        ("semantic.dec", 0.0),
        ("wave.enc", 0.0),
        ("rest", 0.0),
        ("wave.dec", 0.0),
    ];
    for entry in model.store.entries() {
        if !entry.trainable {
            continue;
        }
        let id = model.store.find(&entry.name).unwrap();
        let Some(tid) = g.binding(id) else { continue };
        let Some(grad) = g.tape.grad(tid) else { continue };
        let sq: f64 = grad.iter().map(|x| x * x).sum();
        for (prefix, acc) in groups.iter_mut() {
            if entry.name.starts_with(*prefix) {
                *acc += sq;
            }
        }
    }
    print!("{loss:>5}: ");
    for (prefix, sq) in groups {
        print!("{prefix} {:.3e}  ", sq.sqrt());
    }
    println!();
}

fn cmd_grads(steps: u64, seg_frames: usize) {
    let corpus = synth_corpus(1, 64, 1.0, 24000);
    let model = Codec::new(fixture_config(), 0).unwrap();
    let tc =
        TrainConfig { batch_size: 4, segment_frames: seg_frames, ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, &corpus, tc).unwrap();
    let chunks =
        segment_corpus(&corpus, seg_frames * trainer.model.total_stride());
    let seg = trainer.model.prepare_segment(&chunks[0]).unwrap();
    println!("at init:");
    for loss in ["mel", "ssl", "total"] {
        grad_norms_by_prefix(&trainer.model, &seg, loss);
    }
    for _ in 0..steps {
        trainer.step().unwrap();
    }
    println!("after {steps} steps:");
    for loss in ["mel", "ssl", "total"] {
        grad_norms_by_prefix(&trainer.model, &seg, loss);
    }
}

// ── Training variants ───────────────────────────────────────────────────────

fn cmd_run(seg: usize, reinit: u64, seed: u64, steps: u64) {
    let corpus = synth_corpus(1, 64, 1.0, 24000);
    let model = Codec::new(fixture_config(), 0).unwrap();
    let tc = TrainConfig {
        batch_size: 4,
        segment_frames: seg,
        reinit_interval: reinit,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, &corpus, tc).unwrap();
    let start = Instant::now();
    let mut ssl = Vec::with_capacity(steps as usize);
    let mut mel = Vec::with_capacity(steps as usize);
    for step in 1..=steps {
        let r = trainer.step().unwrap();
        ssl.push(r.losses.ssl_mse);
        mel.push(r.losses.mel_multi_scale);
        if step % 100 == 0 {
            let s = &ssl[ssl.len() - 100..];
            let m = &mel[mel.len() - 100..];
            let used = trainer.usage(0).iter().filter(|&&u| u > 0).count();
            println!(
                "step {:>5} ssl(100) {:.4} mel(100) {:.4} sem-used {}  reinit {}",
                step,
                s.iter().sum::<f64>() / 100.0,
                m.iter().sum::<f64>() / 100.0,
                used,
                r.reinit_count
            );
        }
    }
    let first = ssl[..100].iter().sum::<f64>() / 100.0;
    let last = ssl[ssl.len() - 100..].iter().sum::<f64>() / 100.0;
    let mfirst = mel[..100].iter().sum::<f64>() / 100.0;
    let mlast = mel[mel.len() - 100..].iter().sum::<f64>() / 100.0;
    println!(
        "VERDICT seg={seg} reinit={reinit} seed={seed}: ssl {first:.4} -> {last:.4} (ratio {:.3}) mel {mfirst:.4} -> {mlast:.4} (ratio {:.3}) in {:.0}s",
        last / first,
        mlast / mfirst,
        start.elapsed().as_secs_f64()
    );
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("floor") => cmd_floor(),
        Some("grads") => cmd_grads(
            args.get(1).map_or(300, |s| s.parse().unwrap()),
            args.get(2).map_or(5, |s| s.parse().unwrap()),
        ),
        Some("run") => cmd_run(
            args[1].parse().unwrap(),
            args[2].parse().unwrap(),
            args[3].parse().unwrap(),
            args[4].parse().unwrap(),
        ),
        _ => eprintln!("usage: diag floor | grads [steps] [seg] | run <seg> <reinit> <seed> <steps>"),
    }
}
