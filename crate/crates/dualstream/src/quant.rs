//! Projected vector quantization and the residual VQ stack. Each layer
//! projects the latent into a small code space, picks the nearest codeword on
//! the unit sphere, and projects the raw codeword back out. Two paths share
//! one index-selection routine: a pure path over `FeatureMap`s for frozen
//! models, and a tape path that wires straight-through gradients and the
//! quantization losses for training.

use std::sync::Arc;

use rand::Rng;

use crate::dsp::FeatureMap;
use crate::error::{CodecError, Result};
use crate::linalg;
use crate::nn::{uniform_init, Graph, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};

// ── Token container ─────────────────────────────────────────────────────────

/// Discrete code rows, one per quantizer layer. Row 0 is the semantic-stream
/// layer; rows 1.. are the waveform-residual layers.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    /// `codes[layer][frame]`
    pub codes: Vec<Vec<u32>>,
    pub layer_sizes: Vec<u32>,
    pub frame_rate: f64,
}

impl TokenMatrix {
    pub fn n_layers(&self) -> usize {
        self.codes.len()
    }

    pub fn frames(&self) -> usize {
        self.codes.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.codes.len() != self.layer_sizes.len() {
            return Err(CodecError::format(format!(
                "token matrix has {} rows but {} layer sizes",
                self.codes.len(),
                self.layer_sizes.len()
            )));
        }
        let frames = self.frames();
        for (l, row) in self.codes.iter().enumerate() {
            if row.len() != frames {
                return Err(CodecError::format(format!(
                    "token row {l} has {} frames, row 0 has {frames}",
                    row.len()
                )));
            }
            let k = self.layer_sizes[l];
            if let Some((t, &c)) = row.iter().enumerate().find(|(_, &c)| c >= k) {
                return Err(CodecError::format(format!(
                    "token {c} at layer {l}, frame {t} exceeds codebook size {k}"
                )));
            }
        }
        Ok(())
    }
}

// ── Codebook ────────────────────────────────────────────────────────────────

/// One factorized VQ layer: input projection (D x H), K codewords in R^D,
/// output projection (H x D).
pub struct ProjectedCodebook {
    pub w_in: ParamId,
    pub codes: ParamId,
    pub w_out: ParamId,
    pub k: usize,
    pub d: usize,
    pub h: usize,
}

impl ProjectedCodebook {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        k: usize,
        d: usize,
        h: usize,
    ) -> ProjectedCodebook {
        assert!(k >= 2, "codebook size must be at least 2, got {k}");
        assert!(d <= h, "code dim {d} must not exceed latent dim {h}");
        let w_in = store.register(&format!("{name}.w_in"), &[d, h], uniform_init(rng, d * h, h), true);
        let codes = store.register(&format!("{name}.codes"), &[k, d], uniform_init(rng, k * d, d), true);
        let w_out = store.register(&format!("{name}.w_out"), &[h, d], uniform_init(rng, h * d, d), true);
        ProjectedCodebook { w_in, codes, w_out, k, d, h }
    }

    pub fn bits_per_token(&self) -> u32 {
        (self.k as f64).log2().ceil() as u32
    }
}

// ── Index selection ─────────────────────────────────────────────────────────

/// Nearest-codeword search on the unit sphere. `z_proj` is (D x frames)
/// row-major. Distances compare the L2-normalized projected vector against
/// each L2-normalized codeword; a zero-norm projected frame falls back to
/// raw (un-normalized) distances and is flagged. Ties break to the lowest
/// index.
pub fn select_indices(
    codes: &[f64],
    k: usize,
    d: usize,
    z_proj: &[f64],
    frames: usize,
) -> Vec<(u32, bool)> {
    assert_eq!(codes.len(), k * d);
    assert_eq!(z_proj.len(), d * frames);
    let mut normed = vec![0.0; k * d];
    for kk in 0..k {
        let row = &codes[kk * d..(kk + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dst = &mut normed[kk * d..(kk + 1) * d];
        if norm > 0.0 {
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = v / norm;
            }
        } else {
            dst.copy_from_slice(row);
        }
    }

    let mut out = Vec::with_capacity(frames);
    let mut col = vec![0.0; d];
    for t in 0..frames {
        for (di, c) in col.iter_mut().enumerate() {
            *c = z_proj[di * frames + t];
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let fallback = norm == 0.0;
        if !fallback {
            for c in col.iter_mut() {
                *c /= norm;
            }
        }
        let table = if fallback { codes } else { &normed[..] };
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for kk in 0..k {
            let row = &table[kk * d..(kk + 1) * d];
            let dist: f64 = col.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_dist {
                best_dist = dist;
                best = kk;
            }
        }
        out.push((best as u32, fallback));
    }
    out
}

/// Gather selected codewords into a (D x frames) column matrix.
fn gather_columns(codes: &[f64], d: usize, indices: &[u32], frames: usize) -> Vec<f64> {
    let mut e_sel = vec![0.0; d * frames];
    for (t, &idx) in indices.iter().enumerate() {
        for di in 0..d {
            e_sel[di * frames + t] = codes[idx as usize * d + di];
        }
    }
    e_sel
}

// ── Pure (frozen-model) path ────────────────────────────────────────────────

/// One layer's quantization of a feature map.
pub struct QuantizationResult {
    pub indices: Vec<u32>,
    /// Frames whose projected vector had zero norm.
    pub fallback: Vec<bool>,
    /// (H x frames), post output projection.
    pub quantized: FeatureMap,
    /// input − quantized, exactly.
    pub residual: FeatureMap,
    /// Mean |z_proj − e_sel| over the projected space.
    pub codebook_loss: f64,
    /// Mean (z_proj − e_sel)² over the projected space.
    pub commitment_loss: f64,
}

pub fn vq_encode(store: &ParamStore, cb: &ProjectedCodebook, z: &FeatureMap) -> QuantizationResult {
    assert_eq!(z.dim, cb.h, "input has {} channels, codebook expects {}", z.dim, cb.h);
    let t = z.frames;
    let mut z_proj = vec![0.0; cb.d * t];
    linalg::gemm(cb.d, cb.h, t, store.data(cb.w_in), &z.data, &mut z_proj);

    let sel = select_indices(store.data(cb.codes), cb.k, cb.d, &z_proj, t);
    let indices: Vec<u32> = sel.iter().map(|&(i, _)| i).collect();
    let fallback: Vec<bool> = sel.iter().map(|&(_, f)| f).collect();

    let e_sel = gather_columns(store.data(cb.codes), cb.d, &indices, t);
    let mut qdata = vec![0.0; cb.h * t];
    linalg::gemm(cb.h, cb.d, t, store.data(cb.w_out), &e_sel, &mut qdata);

    let residual: Vec<f64> = z.data.iter().zip(&qdata).map(|(a, b)| a - b).collect();
    let n = (cb.d * t) as f64;
    let codebook_loss = z_proj.iter().zip(&e_sel).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let commitment_loss = z_proj.iter().zip(&e_sel).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;

    QuantizationResult {
        indices,
        fallback,
        quantized: FeatureMap::new(qdata, cb.h, t, z.frame_rate),
        residual: FeatureMap::new(residual, cb.h, t, z.frame_rate),
        codebook_loss,
        commitment_loss,
    }
}

pub struct RvqEncodeResult {
    pub rows: Vec<Vec<u32>>,
    pub quantized_sum: FeatureMap,
    pub final_residual: FeatureMap,
}

/// Greedy residual quantization through the first `q` layers.
pub fn rvq_encode(
    store: &ParamStore,
    layers: &[ProjectedCodebook],
    x: &FeatureMap,
    q: usize,
) -> Result<RvqEncodeResult> {
    if q > layers.len() {
        return Err(CodecError::config(format!(
            "dropout q={q} exceeds the {} available layers",
            layers.len()
        )));
    }
    let mut rows = Vec::with_capacity(q);
    let mut residual = x.clone();
    let mut sum = FeatureMap::new(vec![0.0; x.dim * x.frames], x.dim, x.frames, x.frame_rate);
    for layer in &layers[..q] {
        let r = vq_encode(store, layer, &residual);
        rows.push(r.indices);
        for (s, v) in sum.data.iter_mut().zip(&r.quantized.data) {
            *s += v;
        }
        residual = r.residual;
    }
    Ok(RvqEncodeResult { rows, quantized_sum: sum, final_residual: residual })
}

/// Dequantize one layer's token row: W_out · codes[index] per frame.
pub fn decode_layer(
    store: &ParamStore,
    cb: &ProjectedCodebook,
    indices: &[u32],
    frame_rate: f64,
) -> Result<FeatureMap> {
    let t = indices.len();
    for (ti, &idx) in indices.iter().enumerate() {
        if idx as usize >= cb.k {
            return Err(CodecError::format(format!(
                "token {idx} at frame {ti} exceeds codebook size {}",
                cb.k
            )));
        }
    }
    let e_sel = gather_columns(store.data(cb.codes), cb.d, indices, t);
    let mut out = vec![0.0; cb.h * t];
    linalg::gemm(cb.h, cb.d, t, store.data(cb.w_out), &e_sel, &mut out);
    Ok(FeatureMap::new(out, cb.h, t, frame_rate))
}

// ── Tape (training) path ────────────────────────────────────────────────────

/// One layer's quantization recorded on a tape. Forward values match the
/// pure path bitwise; gradients flow straight through to the input, and
/// codewords learn only via the codebook L1 term.
pub struct VqTapeResult {
    pub indices: Vec<u32>,
    pub fallback: Vec<bool>,
    pub z_proj: TensorId,
    /// (H x frames) = W_out · ste(z_proj, e_sel).
    pub quantized: TensorId,
    pub codebook_loss: TensorId,
    pub commitment_loss: TensorId,
}

pub fn encode_on_tape(
    g: &mut Graph,
    store: &ParamStore,
    cb: &ProjectedCodebook,
    z: TensorId,
) -> VqTapeResult {
    assert_eq!(g.tape.shape(z)[0], cb.h, "input channel count does not match codebook latent dim");
    let frames = g.tape.shape(z)[1];
    let w_in = g.param(store, cb.w_in);
    let codes = g.param(store, cb.codes);
    let w_out = g.param(store, cb.w_out);

    let z_proj = g.tape.matmul(w_in, z);
    let sel = select_indices(g.tape.data(codes), cb.k, cb.d, g.tape.data(z_proj), frames);
    let indices: Vec<u32> = sel.iter().map(|&(i, _)| i).collect();
    let fallback: Vec<bool> = sel.iter().map(|&(_, f)| f).collect();

    let idx_usize: Arc<Vec<usize>> = Arc::new(indices.iter().map(|&i| i as usize).collect());
    let e_sel = g.tape.gather_codewords(codes, idx_usize);

    let z_detached = g.tape.detach(z_proj);
    let codebook_loss = g.tape.l1_mean(z_detached, e_sel);
    let e_detached = g.tape.detach(e_sel);
    let commitment_loss = g.tape.mse_mean(z_proj, e_detached);

    let ste_out = g.tape.ste(z_proj, e_sel);
    let quantized = g.tape.matmul(w_out, ste_out);

    VqTapeResult { indices, fallback, z_proj, quantized, codebook_loss, commitment_loss }
}

/// Smooth stand-in for a quantizer layer used by gradient checking: the
/// codeword lookup becomes the identity in code space, so the output is
/// W_out · W_in · z with no argmin discontinuity.
pub fn bypass_on_tape(
    g: &mut Graph,
    store: &ParamStore,
    cb: &ProjectedCodebook,
    z: TensorId,
) -> TensorId {
    let w_in = g.param(store, cb.w_in);
    let w_out = g.param(store, cb.w_out);
    let z_proj = g.tape.matmul(w_in, z);
    g.tape.matmul(w_out, z_proj)
}

/// codebook term + beta · commitment term.
pub fn quantization_loss(tape: &mut Tape, r: &VqTapeResult, beta: f64) -> TensorId {
    assert!(beta >= 0.0, "commitment weight must be non-negative");
    let scaled = tape.scale(r.commitment_loss, beta);
    tape.add(r.codebook_loss, scaled)
}

pub struct RvqTapeResult {
    pub rows: Vec<Vec<u32>>,
    pub quantized_sum: TensorId,
    pub final_residual: TensorId,
    pub codebook_losses: Vec<TensorId>,
    pub commitment_losses: Vec<TensorId>,
    /// Per-layer projected inputs (D x frames), for usage bookkeeping.
    pub layer_proj: Vec<TensorId>,
}

pub fn rvq_forward_on_tape(
    g: &mut Graph,
    store: &ParamStore,
    layers: &[ProjectedCodebook],
    x: TensorId,
    q: usize,
) -> Result<RvqTapeResult> {
    if q > layers.len() {
        return Err(CodecError::config(format!(
            "dropout q={q} exceeds the {} available layers",
            layers.len()
        )));
    }
    let shape = g.tape.shape(x).to_vec();
    let mut rows = Vec::with_capacity(q);
    let mut codebook_losses = Vec::with_capacity(q);
    let mut commitment_losses = Vec::with_capacity(q);
    let mut layer_proj = Vec::with_capacity(q);
    let mut residual = x;
    let mut sum: Option<TensorId> = None;
    for layer in &layers[..q] {
        let r = encode_on_tape(g, store, layer, residual);
        rows.push(r.indices.clone());
        codebook_losses.push(r.codebook_loss);
        commitment_losses.push(r.commitment_loss);
        layer_proj.push(r.z_proj);
        sum = Some(match sum {
            None => r.quantized,
            Some(s) => g.tape.add(s, r.quantized),
        });
        residual = g.tape.sub(residual, r.quantized);
    }
    let quantized_sum =
        sum.unwrap_or_else(|| g.tape.constant(vec![0.0; shape.iter().product()], &shape));
    Ok(RvqTapeResult {
        rows,
        quantized_sum,
        final_residual: residual,
        codebook_losses,
        commitment_losses,
        layer_proj,
    })
}

// ── Dropout and codebook maintenance ────────────────────────────────────────

/// Uniform draw of how many residual layers stay active this step; 0 keeps
/// only the semantic stream.
pub fn sample_dropout_q(rng: &mut impl Rng, n_rest_layers: usize) -> usize {
    assert!(n_rest_layers >= 1, "need at least one residual layer");
    rng.gen_range(0..=n_rest_layers)
}

/// Overwrite codewords whose usage count is zero with randomly chosen rows
/// from `batch_proj` (n_frames x D, projected encoder outputs), plus a small
/// jitter so codes reseeded from the same row still separate: exact
/// duplicates tie on distance and all but the lowest index stay dead.
/// Returns how many were reset; an empty batch is a no-op.
pub fn reinit_dead_codes(
    store: &mut ParamStore,
    cb: &ProjectedCodebook,
    usage: &[u64],
    batch_proj: &[f64],
    rng: &mut impl Rng,
) -> usize {
    assert_eq!(usage.len(), cb.k);
    assert_eq!(batch_proj.len() % cb.d, 0);
    let n_frames = batch_proj.len() / cb.d;
    if n_frames == 0 {
        return 0;
    }
    let mut count = 0;
    for (kk, &used) in usage.iter().enumerate() {
        if used > 0 {
            continue;
        }
        let src = rng.gen_range(0..n_frames);
        for di in 0..cb.d {
            let jitter = rng.gen_range(-1e-3..1e-3);
            store.data_mut(cb.codes)[kk * cb.d + di] = batch_proj[src * cb.d + di] + jitter;
        }
        store.reset_moments(cb.codes, kk * cb.d..(kk + 1) * cb.d);
        count += 1;
    }
    count
}

/// Seed every codeword from a random projected batch frame plus a small
/// jitter so duplicated draws still separate. No-op on an empty batch.
pub fn init_codebook_from_batch(
    store: &mut ParamStore,
    cb: &ProjectedCodebook,
    batch_proj: &[f64],
    rng: &mut impl Rng,
) {
    assert_eq!(batch_proj.len() % cb.d, 0);
    let n_frames = batch_proj.len() / cb.d;
    if n_frames == 0 {
        return;
    }
    for kk in 0..cb.k {
        let src = rng.gen_range(0..n_frames);
        for di in 0..cb.d {
            let jitter = rng.gen_range(-1e-3..1e-3);
            store.data_mut(cb.codes)[kk * cb.d + di] = batch_proj[src * cb.d + di] + jitter;
        }
    }
}
