//! Property tests for the projected quantizer beyond the acceptance checks:
//! invariances, dropout statistics, and capacity monotonicity of the
//! nearest-codeword search.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualstream::dsp::FeatureMap;
use dualstream::nn::ParamStore;
use dualstream::quant::{
    rvq_encode, sample_dropout_q, select_indices, vq_encode, ProjectedCodebook,
};

// ── Helpers ─────────────────────────────────────────────────────────────────

fn random_codebook(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    k: usize,
    d: usize,
    h: usize,
) -> ProjectedCodebook {
    ProjectedCodebook::new(store, rng, name, k, d, h)
}

fn random_feature(rng: &mut ChaCha8Rng, h: usize, frames: usize) -> FeatureMap {
    let data = (0..h * frames).map(|_| rng.gen_range(-2.0..2.0)).collect();
    FeatureMap::new(data, h, frames, 25.0)
}

// ── Selection invariances ───────────────────────────────────────────────────

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Distances are computed on the unit sphere, so any positive rescaling
    /// of the input leaves the chosen indices alone.
    #[test]
    fn indices_are_invariant_to_positive_input_scaling(
        seed in 0u64..1000,
        scale in 1e-3f64..1e3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, d, frames) = (7, 3, 9);
        let codes: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..d * frames).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = z.iter().map(|v| v * scale).collect();
        let a = select_indices(&codes, k, d, &z, frames);
        let b = select_indices(&codes, k, d, &scaled, frames);
        prop_assert_eq!(a, b);
    }

    /// Rescaling a codeword by a positive factor does not change whether it
    /// wins either: codewords are normalized too.
    #[test]
    fn indices_are_invariant_to_positive_codeword_scaling(
        seed in 0u64..1000,
        scale in 1e-3f64..1e3,
        row in 0usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, d, frames) = (5, 4, 6);
        let codes: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..d * frames).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut scaled = codes.clone();
        for v in &mut scaled[row * d..(row + 1) * d] {
            *v *= scale;
        }
        let a = select_indices(&codes, k, d, &z, frames);
        let b = select_indices(&scaled, k, d, &z, frames);
        prop_assert_eq!(a, b);
    }

    /// Growing the codebook can only improve (or tie) the winning distance:
    /// an argmin over a superset is never worse.
    #[test]
    fn extra_codewords_never_worsen_the_winning_distance(
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, extra, d, frames) = (6, 3, 3, 8);
        let codes: Vec<f64> = (0..(k + extra) * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..d * frames).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let dist_of = |table: &[f64], n: usize, pick: &[(u32, bool)]| -> Vec<f64> {
            // Recompute the normalized distance of each frame's winner.
            let mut normed = vec![0.0; n * d];
            for kk in 0..n {
                let row = &table[kk * d..(kk + 1) * d];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (o, &v) in normed[kk * d..(kk + 1) * d].iter_mut().zip(row) {
                    *o = if norm > 0.0 { v / norm } else { v };
                }
            }
            (0..frames)
                .map(|t| {
                    let mut col: Vec<f64> = (0..d).map(|di| z[di * frames + t]).collect();
                    let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        for c in &mut col {
                            *c /= norm;
                        }
                    }
                    let idx = pick[t].0 as usize;
                    let row = &normed[idx * d..(idx + 1) * d];
                    col.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum()
                })
                .collect()
        };

        let small_pick = select_indices(&codes[..k * d], k, d, &z, frames);
        let big_pick = select_indices(&codes, k + extra, d, &z, frames);
        let small = dist_of(&codes[..k * d], k, &small_pick);
        let big = dist_of(&codes, k + extra, &big_pick);
        for (s, b) in small.iter().zip(&big) {
            prop_assert!(b <= &(s + 1e-12), "superset distance {b} worse than subset {s}");
        }
    }

    /// Residual quantization telescopes exactly at any depth.
    #[test]
    fn telescoping_holds_for_random_models(seed in 0u64..500, q in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers: Vec<ProjectedCodebook> = (0..3)
            .map(|i| random_codebook(&mut store, &mut rng, &format!("l{i}"), 5, 2, 4))
            .collect();
        let x = random_feature(&mut rng, 4, 7);
        let q = q.min(3);
        let r = rvq_encode(&store, &layers, &x, q).unwrap();
        for i in 0..x.data.len() {
            let rebuilt = r.quantized_sum.data[i] + r.final_residual.data[i];
            prop_assert!((x.data[i] - rebuilt).abs() < 1e-12);
        }
    }
}

// ── Tie-breaking ────────────────────────────────────────────────────────────

#[test]
fn duplicate_codewords_break_ties_to_the_lowest_index() {
    // Rows 0 and 1 share a direction, so they tie after normalization and
    // row 0 must win; the input leans strongly toward that direction.
    let codes = vec![0.5, 0.0, 1.0, 0.0, 0.0, 1.0];
    let z = vec![3.0, 0.1];
    let picks = select_indices(&codes, 3, 2, &z, 1);
    assert_eq!(picks, vec![(0, false)]);
}

// ── Dropout statistics ──────────────────────────────────────────────────────

#[test]
fn dropout_draw_is_uniform_over_zero_to_n() {
    let n_rest = 7;
    let draws = 100_000usize;
    let mut counts = vec![0usize; n_rest + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for _ in 0..draws {
        counts[sample_dropout_q(&mut rng, n_rest)] += 1;
    }
    let expected = draws as f64 / (n_rest + 1) as f64;
    for (q, &c) in counts.iter().enumerate() {
        let dev = (c as f64 - expected).abs() / expected;
        assert!(dev < 0.02, "q={q} drawn {c} times, {:.1}% off uniform", dev * 100.0);
    }
}

// ── Encode against a fully independent oracle ───────────────────────────────

/// Plain-loop reimplementation of projection, normalization, and argmin.
fn oracle_indices(store: &ParamStore, cb: &ProjectedCodebook, z: &FeatureMap) -> Vec<u32> {
    let w_in = store.data(cb.w_in);
    let codes = store.data(cb.codes);
    let mut out = Vec::with_capacity(z.frames);
    for t in 0..z.frames {
        let mut proj = vec![0.0; cb.d];
        for (di, p) in proj.iter_mut().enumerate() {
            for hi in 0..cb.h {
                *p += w_in[di * cb.h + hi] * z.data[hi * z.frames + t];
            }
        }
        let pn = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit: Vec<f64> = if pn > 0.0 {
            proj.iter().map(|v| v / pn).collect()
        } else {
            proj.clone()
        };
        let mut best = (0usize, f64::INFINITY);
        for kk in 0..cb.k {
            let row = &codes[kk * cb.d..(kk + 1) * cb.d];
            let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cand: Vec<f64> = if pn == 0.0 {
                row.to_vec()
            } else if rn > 0.0 {
                row.iter().map(|v| v / rn).collect()
            } else {
                row.to_vec()
            };
            let dist: f64 = unit.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.1 {
                best = (kk, dist);
            }
        }
        out.push(best.0 as u32);
    }
    out
}

#[test]
fn vq_encode_agrees_with_the_loop_oracle_on_many_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..200 {
        let k = rng.gen_range(2..=64);
        let d = rng.gen_range(1..=8);
        let h = rng.gen_range(d..=12);
        let frames = rng.gen_range(1..=12);
        let mut store = ParamStore::new();
        let cb = random_codebook(&mut store, &mut rng, "cb", k, d, h);
        let z = random_feature(&mut rng, h, frames);
        let got = vq_encode(&store, &cb, &z).indices;
        let want = oracle_indices(&store, &cb, &z);
        assert_eq!(got, want, "instance {i}: k={k} d={d} h={h} frames={frames}");
    }
}
