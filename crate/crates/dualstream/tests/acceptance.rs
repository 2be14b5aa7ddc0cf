//! Acceptance gate: one test per shipping criterion, each printing an
//! `ACCEPTANCE <n> PASS` or `ACCEPTANCE <n> FAIL` line. Criteria 9 and 10
//! share a single trained model built once behind a `OnceLock`.

use std::panic::AssertUnwindSafe;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use dualstream::bitstream;
use dualstream::codec::checkpoint::{load_checkpoint, save_checkpoint};
use dualstream::codec::corpus::synth_corpus;
use dualstream::codec::train::{StepReport, TrainConfig, Trainer};
use dualstream::codec::{Codec, CodecConfig, Variant};
use dualstream::dsp::mel::MelFilterbank;
use dualstream::dsp::stft::StftPlan;
use dualstream::dsp::{AudioBuffer, FeatureMap};
use dualstream::gradcheck::finite_diff_check;
use dualstream::metrics;
use dualstream::nn::{self, ConvNeXtBlock, Graph, ParamStore};
use dualstream::quant::{rvq_encode, vq_encode, ProjectedCodebook, TokenMatrix};
use dualstream::semantic::{load_feature_file, store_feature_file};
use dualstream::tensor::Tape;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ── Reporting harness ───────────────────────────────────────────────────────

fn criterion(n: u32, body: impl FnOnce()) {
    match std::panic::catch_unwind(AssertUnwindSafe(body)) {
        Ok(()) => println!("ACCEPTANCE {n} PASS"),
        Err(cause) => {
            println!("ACCEPTANCE {n} FAIL");
            std::panic::resume_unwind(cause);
        }
    }
}

fn tiny_config() -> CodecConfig {
    let mut config = CodecConfig::default();
    config.h = 8;
    config.d = 2;
    config.n_layers = 2;
    config.rvq1_size = 8;
    config.rest_size = 4;
    config.mel_loss_scales = vec![64, 256];
    config.wave_channels = vec![4, 4, 4, 4];
    config.resnet_blocks = 1;
    config
}

fn tone(seconds: f64, sr: u32) -> AudioBuffer {
    let len = (seconds * sr as f64).round() as usize;
    let samples = (0..len)
        .map(|i| {
            let t = i as f64 / sr as f64;
            0.4 * (2.0 * std::f64::consts::PI * 220.0 * t).sin()
                + 0.2 * (2.0 * std::f64::consts::PI * 660.0 * t).sin()
        })
        .collect();
    AudioBuffer::new(samples, sr)
}

// ── 1: published bitrate rows ───────────────────────────────────────────────

#[test]
fn acceptance_01_bitrate_rows_reproduce_exactly() {
    criterion(1, || {
        let start = Instant::now();
        // (frame rate, layer sizes, expected kbps); every row runs 75 tok/s.
        let rows: [(f64, Vec<u32>, f64); 7] = [
            (25.0, vec![1024, 1024, 1024], 0.75),
            (12.5, vec![1024; 6], 0.75),
            (25.0, vec![1024, 1024, 1024], 0.75),
            (25.0, vec![16384, 1024, 1024], 0.85),
            (12.5, vec![1024; 6], 0.75),
            (12.5, vec![16384, 1024, 1024, 1024, 1024, 1024], 0.80),
            (12.5, vec![16384, 4096, 4096, 4096, 4096, 4096], 0.93),
        ];
        for (rate, sizes, want_kbps) in rows {
            let bps = bitstream::bitrate_bps(rate, &sizes).unwrap();
            let kbps = bitstream::kbps_rounded(bps);
            assert_eq!(
                kbps, want_kbps,
                "rate {rate} Hz sizes {sizes:?}: got {kbps} kbps, want {want_kbps}"
            );
            let tok = bitstream::tokens_per_second(rate, sizes.len());
            assert_eq!(tok, 75.0, "rate {rate} Hz x {} layers must be 75 tok/s", sizes.len());
        }
        assert!(start.elapsed().as_secs_f64() < 1.0, "bitrate table must verify in under 1 s");
    });
}

// ── 2: frame-rate identities ────────────────────────────────────────────────

#[test]
fn acceptance_02_frame_rate_identities_are_exact() {
    criterion(2, || {
        assert_eq!(nn::frame_rate(24000, &[4, 5, 6, 8]).unwrap(), 25.0);
        assert_eq!(nn::frame_rate(24000, &[4, 5, 6, 8, 2]).unwrap(), 12.5);
        // The assembled configurations agree with the stride arithmetic.
        assert_eq!(CodecConfig::with_variant(Variant::Hz25).frame_rate(), 25.0);
        assert_eq!(CodecConfig::with_variant(Variant::Hz12_5).frame_rate(), 12.5);
    });
}

// ── 3: quantizer vs brute-force oracle ──────────────────────────────────────

/// Plain-loop nearest-codeword search with the production conventions:
/// compare L2-normalized vectors, fall back to raw distances for a zero-norm
/// frame, break ties toward the lowest index.
fn brute_force_indices(codes: &[f64], k: usize, d: usize, z_proj: &[f64], frames: usize) -> Vec<u32> {
    let normalize = |v: &[f64]| -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 { v.iter().map(|x| x / n).collect() } else { v.to_vec() }
    };
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let col: Vec<f64> = (0..d).map(|di| z_proj[di * frames + t]).collect();
        let zero = col.iter().map(|x| x * x).sum::<f64>() == 0.0;
        let probe = if zero { col.clone() } else { normalize(&col) };
        let mut best = (0u32, f64::INFINITY);
        for kk in 0..k {
            let row = &codes[kk * d..(kk + 1) * d];
            let cand: Vec<f64> = if zero { row.to_vec() } else { normalize(row) };
            let dist: f64 = probe.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.1 {
                best = (kk as u32, dist);
            }
        }
        out.push(best.0);
    }
    out
}

fn project(store: &ParamStore, cb: &ProjectedCodebook, z: &FeatureMap) -> Vec<f64> {
    let w_in = store.data(cb.w_in);
    let mut out = vec![0.0; cb.d * z.frames];
    for di in 0..cb.d {
        for t in 0..z.frames {
            let mut acc = 0.0;
            for hh in 0..cb.h {
                acc += w_in[di * cb.h + hh] * z.data[hh * z.frames + t];
            }
            out[di * z.frames + t] = acc;
        }
    }
    out
}

fn dequantize(store: &ParamStore, cb: &ProjectedCodebook, indices: &[u32], frames: usize) -> Vec<f64> {
    let codes = store.data(cb.codes);
    let w_out = store.data(cb.w_out);
    let mut out = vec![0.0; cb.h * frames];
    for (t, &idx) in indices.iter().enumerate() {
        let row = &codes[idx as usize * cb.d..(idx as usize + 1) * cb.d];
        for hh in 0..cb.h {
            let mut acc = 0.0;
            for (di, &c) in row.iter().enumerate() {
                acc += w_out[hh * cb.d + di] * c;
            }
            out[hh * frames + t] = acc;
        }
    }
    out
}

#[test]
fn acceptance_03_encode_matches_the_brute_force_oracle() {
    criterion(3, || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();

        // 1000 single-layer instances, codebooks up to K = 64.
        for i in 0..1000 {
            let k = rng.gen_range(2..=64usize);
            let d = rng.gen_range(1..=6usize);
            let h = rng.gen_range(d..=10usize);
            let frames = rng.gen_range(1..=8usize);
            let cb = ProjectedCodebook::new(&mut store, &mut rng, &format!("vq{i}"), k, d, h);
            let data = (0..h * frames).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let z = FeatureMap::new(data, h, frames, 25.0);

            let got = vq_encode(&store, &cb, &z).indices;
            let z_proj = project(&store, &cb, &z);
            let want = brute_force_indices(store.data(cb.codes), k, d, &z_proj, frames);
            assert_eq!(got, want, "instance {i} disagrees with the exhaustive argmin");
        }

        // Greedy two-layer residual quantization against the same oracle
        // applied layer by layer (exhaustive search inside each greedy step).
        for i in 0..200 {
            let d = rng.gen_range(1..=4usize);
            let h = rng.gen_range(d..=8usize);
            let frames = rng.gen_range(1..=6usize);
            let k0 = rng.gen_range(2..=32usize);
            let k1 = rng.gen_range(2..=32usize);
            let layers = vec![
                ProjectedCodebook::new(&mut store, &mut rng, &format!("rvq{i}a"), k0, d, h),
                ProjectedCodebook::new(&mut store, &mut rng, &format!("rvq{i}b"), k1, d, h),
            ];
            let data: Vec<f64> = (0..h * frames).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x = FeatureMap::new(data.clone(), h, frames, 25.0);

            let got = rvq_encode(&store, &layers, &x, 2).unwrap().rows;

            let p0 = project(&store, &layers[0], &x);
            let row0 = brute_force_indices(store.data(layers[0].codes), k0, d, &p0, frames);
            let q0 = dequantize(&store, &layers[0], &row0, frames);
            let resid: Vec<f64> = data.iter().zip(&q0).map(|(a, b)| a - b).collect();
            let r = FeatureMap::new(resid, h, frames, 25.0);
            let p1 = project(&store, &layers[1], &r);
            let row1 = brute_force_indices(store.data(layers[1].codes), k1, d, &p1, frames);
            assert_eq!(got, vec![row0, row1], "greedy instance {i} disagrees with the oracle");
        }
        assert!(start.elapsed().as_secs_f64() < 10.0, "oracle comparison must finish in under 10 s");
    });
}

// ── 4: telescoping identity ─────────────────────────────────────────────────

#[test]
fn acceptance_04_residual_telescoping_is_exact() {
    criterion(4, || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let (h, d, n) = (10, 3, 4);
        let layers: Vec<ProjectedCodebook> = (0..n)
            .map(|i| ProjectedCodebook::new(&mut store, &mut rng, &format!("l{i}"), 12, d, h))
            .collect();
        for trial in 0..50 {
            let frames = rng.gen_range(1..=9usize);
            let data = (0..h * frames).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let x = FeatureMap::new(data, h, frames, 25.0);
            for q in 0..=n {
                let r = rvq_encode(&store, &layers, &x, q).unwrap();
                let worst = x
                    .data
                    .iter()
                    .zip(r.quantized_sum.data.iter().zip(&r.final_residual.data))
                    .map(|(xv, (sv, rv))| (xv - (sv + rv)).abs())
                    .fold(0.0f64, f64::max);
                assert!(worst < 1e-12, "trial {trial} q={q}: telescoping gap {worst}");
            }
        }
    });
}

// ── 5: straight-through contract ────────────────────────────────────────────

#[test]
fn acceptance_05_straight_through_gradients_hold_bitwise() {
    criterion(5, || {
        // A fixed small graph: pass-through output feeds snake, an elementwise
        // product with fixed weights, and a sum. The gradient that lands on
        // the pre-quantization input must equal, bit for bit, the gradient a
        // plain leaf holding the quantized values would receive.
        let x_data = vec![0.3, -1.1, 0.7, 2.4, -0.6, 0.05];
        let q_data = vec![0.5, -1.0, 0.5, 2.5, -0.5, 0.0];
        let w_data = vec![1.5, -0.7, 0.2, 0.9, -1.3, 2.0];
        let downstream = |tape: &mut Tape, top: dualstream::tensor::TensorId| {
            let s = tape.snake(top, 1.0);
            let w = tape.constant(w_data.clone(), &[2, 3]);
            let p = tape.mul(s, w);
            tape.sum_all(p)
        };

        let grad_via_ste = {
            let mut tape = Tape::new();
            let x = tape.leaf(x_data.clone(), &[2, 3], true);
            let q = tape.constant(q_data.clone(), &[2, 3]);
            let out = tape.ste(x, q);
            let loss = downstream(&mut tape, out);
            tape.backward(loss);
            tape.grad(x).unwrap().to_vec()
        };
        let grad_direct = {
            let mut tape = Tape::new();
            let q = tape.leaf(q_data.clone(), &[2, 3], true);
            let loss = downstream(&mut tape, q);
            tape.backward(loss);
            tape.grad(q).unwrap().to_vec()
        };
        assert_eq!(grad_via_ste.len(), grad_direct.len());
        for (a, b) in grad_via_ste.iter().zip(&grad_direct) {
            assert_eq!(a.to_bits(), b.to_bits(), "straight-through gradient differs: {a} vs {b}");
        }

        // Codewords receive gradient only through the codebook L1 term: the
        // full loss (reconstruction + codebook + commitment) and a loss of
        // the codebook term alone give bitwise-equal codeword gradients.
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut store = ParamStore::new();
        let cb = ProjectedCodebook::new(&mut store, &mut rng, "cb", 6, 2, 5);
        let z_data: Vec<f64> = (0..5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let codes_grad = |codebook_only: bool| -> Vec<f64> {
            let mut g = Graph::new(&store);
            let z = g.tape.constant(z_data.clone(), &[5, 4]);
            let r = dualstream::quant::encode_on_tape(&mut g, &store, &cb, z);
            let loss = if codebook_only {
                r.codebook_loss
            } else {
                let t = g.tape.constant(target.clone(), &[5, 4]);
                let recon = g.tape.mse_mean(r.quantized, t);
                let a = g.tape.add(recon, r.codebook_loss);
                g.tape.add(a, r.commitment_loss)
            };
            g.tape.backward(loss);
            let bound = g.binding(cb.codes).expect("codes must be bound");
            g.tape.grad(bound).expect("codes must receive gradient").to_vec()
        };
        let full = codes_grad(false);
        let l1_only = codes_grad(true);
        assert!(full.iter().any(|v| *v != 0.0), "codeword gradient must be nonzero");
        for (a, b) in full.iter().zip(&l1_only) {
            assert_eq!(a.to_bits(), b.to_bits(), "codeword gradient leaked from another term");
        }
    });
}

// ── 6: finite-difference gradient checks ────────────────────────────────────

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

#[test]
fn acceptance_06_every_op_passes_gradient_checks() {
    criterion(6, || {
        let start = Instant::now();
        let tol = 1e-4;
        let mut worst_any = 0.0f64;
        let mut check = |name: &str, err: f64| {
            assert!(err < tol, "{name}: gradient error {err} exceeds {tol}");
            worst_any = worst_any.max(err);
        };

        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);

            // Pointwise activations.
            let d = uniform(&mut rng, 24, -2.0, 2.0);
            check("snake", finite_diff_check(|t, x| t.snake(x, 1.0), &d, &[4, 6], 1e-5));
            check("gelu", finite_diff_check(|t, x| t.gelu(x), &d, &[4, 6], 1e-5));
            check("tanh", finite_diff_check(|t, x| t.tanh(x), &d, &[4, 6], 1e-5));

            // Strided convolution, w.r.t. input and weights.
            let w = uniform(&mut rng, 3 * 2 * 4, -1.0, 1.0);
            let b = uniform(&mut rng, 3, -0.5, 0.5);
            let xin = uniform(&mut rng, 2 * 10, -1.5, 1.5);
            let (wc, bc, xc) = (w.clone(), b.clone(), xin.clone());
            check(
                "conv1d wrt x",
                finite_diff_check(
                    move |t, x| {
                        let w = t.constant(wc.clone(), &[3, 2, 4]);
                        let b = t.constant(bc.clone(), &[3]);
                        t.conv1d(x, w, b, 2, 2, false)
                    },
                    &xin,
                    &[2, 10],
                    1e-5,
                ),
            );
            let bc = b.clone();
            check(
                "conv1d wrt w",
                finite_diff_check(
                    move |t, w| {
                        let x = t.constant(xc.clone(), &[2, 10]);
                        let b = t.constant(bc.clone(), &[3]);
                        t.conv1d(x, w, b, 2, 2, false)
                    },
                    &w,
                    &[3, 2, 4],
                    1e-5,
                ),
            );

            // Depthwise convolution (the ConvNeXt spatial mix).
            let dw = uniform(&mut rng, 3 * 7, -1.0, 1.0);
            let db = uniform(&mut rng, 3, -0.5, 0.5);
            let dx = uniform(&mut rng, 3 * 9, -1.5, 1.5);
            let (dwc, dbc) = (dw.clone(), db.clone());
            check(
                "depthwise conv wrt x",
                finite_diff_check(
                    move |t, x| {
                        let w = t.constant(dwc.clone(), &[3, 1, 7]);
                        let b = t.constant(dbc.clone(), &[3]);
                        t.conv1d(x, w, b, 1, 3, true)
                    },
                    &dx,
                    &[3, 9],
                    1e-5,
                ),
            );

            // Transposed convolution, w.r.t. input and weights.
            let tw = uniform(&mut rng, 3 * 2 * 8, -1.0, 1.0);
            let tb = uniform(&mut rng, 2, -0.5, 0.5);
            let tx = uniform(&mut rng, 3 * 6, -1.5, 1.5);
            let (twc, tbc, txc) = (tw.clone(), tb.clone(), tx.clone());
            check(
                "conv_transpose1d wrt x",
                finite_diff_check(
                    move |t, x| {
                        let w = t.constant(twc.clone(), &[3, 2, 8]);
                        let b = t.constant(tbc.clone(), &[2]);
                        t.conv_transpose1d(x, w, b, 4, 2, 0)
                    },
                    &tx,
                    &[3, 6],
                    1e-5,
                ),
            );
            let tbc = tb.clone();
            check(
                "conv_transpose1d wrt w",
                finite_diff_check(
                    move |t, w| {
                        let x = t.constant(txc.clone(), &[3, 6]);
                        let b = t.constant(tbc.clone(), &[2]);
                        t.conv_transpose1d(x, w, b, 4, 2, 0)
                    },
                    &tw,
                    &[3, 2, 8],
                    1e-5,
                ),
            );

            // Average pooling at both advertised factors.
            let px = uniform(&mut rng, 3 * 12, -2.0, 2.0);
            check("avg_pool x2", finite_diff_check(|t, x| t.avg_pool1d(x, 2), &px, &[3, 12], 1e-5));
            check("avg_pool x4", finite_diff_check(|t, x| t.avg_pool1d(x, 4), &px, &[3, 12], 1e-5));

            // Per-frame channel normalization, w.r.t. input and gamma.
            let nx = uniform(&mut rng, 5 * 7, -2.0, 2.0);
            let gamma = uniform(&mut rng, 5, 0.5, 1.5);
            let beta = uniform(&mut rng, 5, -0.5, 0.5);
            let (gc, bc2) = (gamma.clone(), beta.clone());
            check(
                "layer_norm wrt x",
                finite_diff_check(
                    move |t, x| {
                        let g = t.constant(gc.clone(), &[5]);
                        let b = t.constant(bc2.clone(), &[5]);
                        t.layer_norm_ch(x, g, b, 1e-6)
                    },
                    &nx,
                    &[5, 7],
                    1e-5,
                ),
            );
            let (nxc, bc3) = (nx.clone(), beta.clone());
            check(
                "layer_norm wrt gamma",
                finite_diff_check(
                    move |t, g| {
                        let x = t.constant(nxc.clone(), &[5, 7]);
                        let b = t.constant(bc3.clone(), &[5]);
                        t.layer_norm_ch(x, g, b, 1e-6)
                    },
                    &gamma,
                    &[5],
                    1e-5,
                ),
            );

            // Matrix product (codebook projections), both operands.
            let ma = uniform(&mut rng, 3 * 4, -1.0, 1.0);
            let mb = uniform(&mut rng, 4 * 6, -1.0, 1.0);
            let (mac, mbc) = (ma.clone(), mb.clone());
            check(
                "matmul wrt a",
                finite_diff_check(
                    move |t, a| {
                        let b = t.constant(mbc.clone(), &[4, 6]);
                        t.matmul(a, b)
                    },
                    &ma,
                    &[3, 4],
                    1e-5,
                ),
            );
            check(
                "matmul wrt b",
                finite_diff_check(
                    move |t, b| {
                        let a = t.constant(mac.clone(), &[3, 4]);
                        t.matmul(a, b)
                    },
                    &mb,
                    &[4, 6],
                    1e-5,
                ),
            );

            // The full ConvNeXt block: mirror the production composition with
            // the block's own weights, verify the mirror reproduces the real
            // forward bitwise, then differentiate the mirror.
            let mut store = ParamStore::new();
            let block = ConvNeXtBlock::new(&mut store, &mut rng, "blk", 3);
            let grab = |name: &str| store.data(store.find(name).unwrap()).to_vec();
            let (dw_w, dw_b) = (grab("blk.dw.weight"), grab("blk.dw.bias"));
            let (gm, bt) = (grab("blk.norm.gamma"), grab("blk.norm.beta"));
            let (p1w, p1b) = (grab("blk.pw1.weight"), grab("blk.pw1.bias"));
            let (p2w, p2b) = (grab("blk.pw2.weight"), grab("blk.pw2.bias"));
            let bx = uniform(&mut rng, 3 * 9, -1.0, 1.0);
            let mirror = move |t: &mut Tape, x: dualstream::tensor::TensorId| {
                let w = t.constant(dw_w.clone(), &[3, 1, 7]);
                let b = t.constant(dw_b.clone(), &[3]);
                let h = t.conv1d(x, w, b, 1, 3, true);
                let g = t.constant(gm.clone(), &[3]);
                let be = t.constant(bt.clone(), &[3]);
                let h = t.layer_norm_ch(h, g, be, 1e-6);
                let w1 = t.constant(p1w.clone(), &[12, 3, 1]);
                let b1 = t.constant(p1b.clone(), &[12]);
                let h = t.conv1d(h, w1, b1, 1, 0, false);
                let h = t.gelu(h);
                let w2 = t.constant(p2w.clone(), &[3, 12, 1]);
                let b2 = t.constant(p2b.clone(), &[3]);
                let h = t.conv1d(h, w2, b2, 1, 0, false);
                t.add(x, h)
            };
            {
                let mut g = Graph::new(&store);
                let xc = g.tape.constant(bx.clone(), &[3, 9]);
                let real = block.forward(&mut g, &store, xc);
                let mut probe = Tape::new();
                let xp = probe.leaf(bx.clone(), &[3, 9], false);
                let mirrored = mirror(&mut probe, xp);
                for (a, b) in g.tape.data(real).iter().zip(probe.data(mirrored)) {
                    assert_eq!(a.to_bits(), b.to_bits(), "mirror drifted from the real block");
                }
            }
            check("convnext block wrt x", finite_diff_check(mirror, &bx, &[3, 9], 1e-5));

            // Spectral ops: magnitudes alone, then the full log-mel path.
            let audio = uniform(&mut rng, 240, -1.0, 1.0);
            let plan = Arc::new(StftPlan::new(64, 16));
            let plan2 = Arc::clone(&plan);
            check(
                "stft magnitudes",
                finite_diff_check(
                    move |t, x| t.stft_mag(x, &plan2).unwrap(),
                    &audio,
                    &[240],
                    1e-5,
                ),
            );
            let fb = MelFilterbank::new(10, 64, 24000, 0.0, 12000.0);
            let (fbw, fbm, fbb) = (fb.weights.clone(), fb.n_mels, fb.bins);
            let plan3 = Arc::clone(&plan);
            check(
                "log mel wrt audio",
                finite_diff_check(
                    move |t, x| {
                        let mag = t.stft_mag(x, &plan3).unwrap();
                        let w = t.constant(fbw.clone(), &[fbm, fbb]);
                        let mel = t.matmul(w, mag);
                        t.log_max(mel, 1e-5)
                    },
                    &audio,
                    &[240],
                    1e-5,
                ),
            );

            // Losses: squared error anywhere, absolute error away from zero.
            let pred = uniform(&mut rng, 18, 0.5, 1.5);
            let targ = uniform(&mut rng, 18, -1.5, -0.5);
            let tg = targ.clone();
            check(
                "mse_mean",
                finite_diff_check(
                    move |t, x| {
                        let c = t.constant(tg.clone(), &[3, 6]);
                        t.mse_mean(x, c)
                    },
                    &pred,
                    &[3, 6],
                    1e-5,
                ),
            );
            let tg = targ.clone();
            check(
                "l1_mean",
                finite_diff_check(
                    move |t, x| {
                        let c = t.constant(tg.clone(), &[3, 6]);
                        t.l1_mean(x, c)
                    },
                    &pred,
                    &[3, 6],
                    1e-5,
                ),
            );
        }
        println!("per-op sweep worst relative error: {worst_any:.3e}");

        // End to end: a tiny full model, quantizers bypassed so the loss is
        // smooth, differentiated against central differences on sampled
        // coordinates of every bound parameter.
        let mut model = Codec::new(tiny_config(), 0).unwrap();
        let seg = model.prepare_segment(&tone(0.1, 24000)).unwrap();
        let eval = |codec: &Codec| -> f64 {
            let mut g = Graph::new(&codec.store);
            let f = codec.forward_on_graph(&mut g, &seg, 1, true).unwrap();
            g.tape.value(f.total)
        };
        let grads = {
            let mut g = Graph::new(&model.store);
            let f = model.forward_on_graph(&mut g, &seg, 1, true).unwrap();
            g.tape.backward(f.total);
            g.grads()
        };
        assert!(!grads.is_empty());
        let h = 1e-4;
        let mut worst_e2e = 0.0f64;
        let mut coords = 0usize;
        for (pid, analytic) in &grads {
            let n = analytic.len();
            let mut picks = vec![0, n / 3, 2 * n / 3, n - 1];
            picks.dedup();
            for i in picks {
                let old = model.store.data(*pid)[i];
                model.store.data_mut(*pid)[i] = old + h;
                let hi = eval(&model);
                model.store.data_mut(*pid)[i] = old - h;
                let lo = eval(&model);
                model.store.data_mut(*pid)[i] = old;
                let numeric = (hi - lo) / (2.0 * h);
                let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1e-6);
                worst_e2e = worst_e2e.max(rel);
                coords += 1;
            }
        }
        println!("end-to-end: {coords} coordinates, worst relative error {worst_e2e:.3e}");
        assert!(worst_e2e < 1e-3, "end-to-end gradient error {worst_e2e} exceeds 1e-3");
        let secs = start.elapsed().as_secs_f64();
        assert!(secs < 120.0, "gradient checks took {secs:.0} s, budget is 120 s");
    });
}

// ── 7: stream separation at q = 0 ───────────────────────────────────────────

#[test]
fn acceptance_07_semantic_decode_ignores_residual_codebooks() {
    criterion(7, || {
        let mut codec = Codec::new(tiny_config(), 7).unwrap();
        let audio = tone(0.6, 24000);
        let tokens = codec.encode(&audio, 1).unwrap();
        assert_eq!(tokens.n_layers(), 1);
        let before = codec.decode(&tokens).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let ids: Vec<_> = codec
            .rest_layers
            .iter()
            .flat_map(|cb| [cb.w_in, cb.codes, cb.w_out])
            .collect();
        assert!(!ids.is_empty());
        for id in ids {
            for v in codec.store.data_mut(id) {
                *v = rng.gen_range(-10.0..10.0);
            }
        }

        let after = codec.decode(&tokens).unwrap();
        assert_eq!(before.samples.len(), after.samples.len());
        for (a, b) in before.samples.iter().zip(&after.samples) {
            assert_eq!(a.to_bits(), b.to_bits(), "single-row decode read a residual codebook");
        }
    });
}

// ── 8: container round-trips ────────────────────────────────────────────────

#[test]
fn acceptance_08_all_three_containers_round_trip_bitwise() {
    criterion(8, || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dir = tempfile::tempdir().unwrap();

        // Token streams.
        for i in 0..100 {
            let n_layers = rng.gen_range(1..=8usize);
            let frames = rng.gen_range(1..=60usize);
            let layer_sizes: Vec<u32> = (0..n_layers).map(|_| rng.gen_range(2..=16384)).collect();
            let codes = layer_sizes
                .iter()
                .map(|&k| (0..frames).map(|_| rng.gen_range(0..k)).collect())
                .collect();
            let rate = if rng.gen_bool(0.5) { 25.0 } else { 12.5 };
            let tokens = TokenMatrix { codes, layer_sizes, frame_rate: rate };
            let bytes = bitstream::serialize(&tokens).unwrap();
            let back = bitstream::deserialize(&bytes).unwrap();
            assert_eq!(back, tokens, "token stream instance {i}");
            assert_eq!(bitstream::serialize(&back).unwrap(), bytes);
        }

        // Feature files: payloads drawn in f32 so the narrowing is lossless.
        for i in 0..100 {
            let dim = rng.gen_range(1..=12usize);
            let frames = rng.gen_range(1..=30usize);
            let data: Vec<f64> =
                (0..dim * frames).map(|_| (rng.gen_range(-8.0..8.0) as f32) as f64).collect();
            let f = FeatureMap::new(data, dim, frames, 50.0);
            let path = dir.path().join(format!("f{i}.dcf"));
            store_feature_file(&path, &f).unwrap();
            let back = load_feature_file(&path).unwrap();
            assert_eq!(back.data, f.data, "feature payload instance {i}");
            assert_eq!((back.dim, back.frames), (dim, frames));
            let path2 = dir.path().join(format!("f{i}b.dcf"));
            store_feature_file(&path2, &back).unwrap();
            assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        }

        // Checkpoints: fresh random models, save -> load -> save byte equality.
        for i in 0..100u64 {
            let codec = Codec::new(tiny_config(), i).unwrap();
            let a = dir.path().join(format!("m{i}.dcm"));
            let b = dir.path().join(format!("m{i}b.dcm"));
            save_checkpoint(&a, &codec).unwrap();
            let loaded = load_checkpoint(&a).unwrap();
            save_checkpoint(&b, &loaded).unwrap();
            assert_eq!(
                std::fs::read(&a).unwrap(),
                std::fs::read(&b).unwrap(),
                "checkpoint instance {i}"
            );
        }
    });
}

// ── 9 and 10: training smoke test and RTF, sharing one trained model ────────

struct TrainedFixture {
    model: Codec,
    held_out: Vec<AudioBuffer>,
    reports: Vec<StepReport>,
    train_secs: f64,
}

static FIXTURE: OnceLock<TrainedFixture> = OnceLock::new();

fn trained_fixture() -> &'static TrainedFixture {
    FIXTURE.get_or_init(|| {
        let corpus = synth_corpus(1, 64, 1.0, 24000);
        let mut config = CodecConfig::with_variant(Variant::Hz25);
        config.h = 64;
        config.n_layers = 4;
        config.rvq1_size = 1024;
        config.rest_size = 256;
        let model = Codec::new(config, 0).unwrap();
        let tc = TrainConfig { batch_size: 4, ..TrainConfig::default() };
        let mut trainer = Trainer::new(model, &corpus, tc).unwrap();

        let start = Instant::now();
        let mut reports = Vec::with_capacity(2000);
        for step in 1..=2000 {
            let r = trainer.step().expect("training step failed");
            if step % 200 == 0 || step == 1 {
                println!("{}", r.format_line());
            }
            reports.push(r);
        }
        let train_secs = start.elapsed().as_secs_f64();
        println!("2000 steps in {train_secs:.0} s");

        TrainedFixture {
            model: trainer.model,
            held_out: synth_corpus(2, 8, 1.0, 24000),
            reports,
            train_secs,
        }
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn acceptance_09_training_smoke_test_converges() {
    criterion(9, || {
        let fx = trained_fixture();

        // (a) Multi-scale mel loss halves between the first and last 100 steps.
        let mel_first = mean(fx.reports[..100].iter().map(|r| r.losses.mel_multi_scale));
        let mel_last = mean(fx.reports[1900..].iter().map(|r| r.losses.mel_multi_scale));
        println!("mel loss: first-100 mean {mel_first:.4}, final-100 mean {mel_last:.4}");
        assert!(
            mel_last <= 0.5 * mel_first,
            "mel loss fell only from {mel_first:.4} to {mel_last:.4}"
        );

        // (b) Distillation MSE drops by at least 30%.
        let ssl_first = mean(fx.reports[..100].iter().map(|r| r.losses.ssl_mse));
        let ssl_last = mean(fx.reports[1900..].iter().map(|r| r.losses.ssl_mse));
        println!("ssl mse: first-100 mean {ssl_first:.4}, final-100 mean {ssl_last:.4}");
        assert!(
            ssl_last <= 0.7 * ssl_first,
            "ssl mse fell only from {ssl_first:.4} to {ssl_last:.4}"
        );

        // (c) Decoded audio beats silence on held-out utterances under MCD.
        let mut mcd_decoded = Vec::new();
        let mut mcd_silence = Vec::new();
        let mut wins = 0usize;
        for utt in &fx.held_out {
            let tokens = fx.model.encode(utt, 4).unwrap();
            let decoded = fx.model.decode(&tokens).unwrap();
            let silence = AudioBuffer::new(vec![0.0; utt.samples.len()], utt.sample_rate);
            let md = metrics::mcd(utt, &decoded).unwrap();
            let ms = metrics::mcd(utt, &silence).unwrap();
            if md < ms {
                wins += 1;
            }
            mcd_decoded.push(md);
            mcd_silence.push(ms);
        }
        let md = mean(mcd_decoded.iter().copied());
        let ms = mean(mcd_silence.iter().copied());
        println!(
            "mcd: decoded mean {md:.3}, silence mean {ms:.3}, decoded wins {wins}/{}",
            fx.held_out.len()
        );
        assert!(md < ms, "decoded audio ({md:.3}) must beat silence ({ms:.3}) under MCD");

        // (d) Four layers beat one layer on at least 80% of held-out files.
        let scales = &fx.model.config.mel_loss_scales;
        let mut better = 0usize;
        for utt in &fx.held_out {
            let d4 = fx.model.decode(&fx.model.encode(utt, 4).unwrap()).unwrap();
            let d1 = fx.model.decode(&fx.model.encode(utt, 1).unwrap()).unwrap();
            let e4 = metrics::mel_distance(utt, &d4, scales).unwrap();
            let e1 = metrics::mel_distance(utt, &d1, scales).unwrap();
            if e4 <= e1 {
                better += 1;
            }
        }
        println!("4-layer beats 1-layer on {better}/{} held-out files", fx.held_out.len());
        assert!(
            better as f64 >= 0.8 * fx.held_out.len() as f64,
            "more quantizer layers must reduce mel distance on at least 80% of files"
        );

        assert!(
            fx.train_secs < 1800.0,
            "training took {:.0} s, budget is 1800 s",
            fx.train_secs
        );
    });
}

#[test]
fn acceptance_10_real_time_factors_are_finite_and_positive() {
    criterion(10, || {
        let fx = trained_fixture();
        let rtf_encode = metrics::measure_rtf(
            |x| {
                fx.model.encode(x, 4).unwrap();
            },
            &fx.held_out,
        );
        let all_tokens: Vec<TokenMatrix> =
            fx.held_out.iter().map(|x| fx.model.encode(x, 4).unwrap()).collect();
        let mut idx = 0usize;
        let rtf_decode = metrics::measure_rtf(
            |_| {
                fx.model.decode(&all_tokens[idx]).unwrap();
                idx += 1;
            },
            &fx.held_out,
        );

        // Assemble the same report the evaluation command prints.
        let mut mcd_sum = 0.0;
        let mut mel_sum = 0.0;
        let mut snr_sum = 0.0;
        for (utt, tokens) in fx.held_out.iter().zip(&all_tokens) {
            let decoded = fx.model.decode(tokens).unwrap();
            mcd_sum += metrics::mcd(utt, &decoded).unwrap();
            mel_sum +=
                metrics::mel_distance(utt, &decoded, &fx.model.config.mel_loss_scales).unwrap();
            snr_sum += metrics::si_snr(utt, &decoded).unwrap();
        }
        let n = fx.held_out.len();
        let report = metrics::MetricReport {
            mcd: mcd_sum / n as f64,
            mel_distance: mel_sum / n as f64,
            si_snr: snr_sum / n as f64,
            rtf_encode,
            rtf_decode,
            n_files: n,
        };
        report.validate().unwrap();
        print!("{}", report.key_value_lines());
        assert!(rtf_encode.is_finite() && rtf_encode > 0.0, "encode RTF {rtf_encode}");
        assert!(rtf_decode.is_finite() && rtf_decode > 0.0, "decode RTF {rtf_decode}");
    });
}

// ── 11: scope statement ─────────────────────────────────────────────────────

#[test]
fn acceptance_11_paper_scale_results_are_out_of_scope() {
    criterion(11, || {
        // Large-corpus perceptual scores (WER, PESQ, UTMOS, MUSHRA, TTS
        // pipelines) need pretrained models, GPU-scale training, and human
        // raters; none of that exists here by design. The substitute is the
        // self-contained suite above: exact rate arithmetic, oracle-checked
        // quantization, verified gradients, bit-exact containers, and a
        // desk-scale convergence run, all offline and seeded from scratch.
        let model = Codec::new(tiny_config(), 0).unwrap();
        let trainable = model.store.entries().iter().filter(|e| e.trainable).count();
        assert!(trainable > 0, "every model trains from scratch; nothing is pretrained");
        println!(
            "substitute suite covers criteria 1-10; no network access, no pretrained weights"
        );
    });
}
