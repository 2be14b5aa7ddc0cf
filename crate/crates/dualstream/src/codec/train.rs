//! Training loop: segmenting the corpus, data-dependent codebook seeding,
//! batched forward/backward on a shared tape, Adam updates with global
//! gradient clipping, codeword usage tracking, and periodic dead-code
//! reseeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{AudioBuffer, FeatureMap};
use crate::error::{CodecError, Result};
use crate::linalg;
use crate::nn::{Adam, Graph};
use crate::quant::{init_codebook_from_batch, reinit_dead_codes, rvq_encode, sample_dropout_q};
use crate::semantic::semantic_encode;

use super::{Codec, LossReport, SegmentData};

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Segment length in codec frames; samples per segment is this times the
    /// total stride.
    pub segment_frames: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// Dead codewords are reseeded every this many steps.
    pub reinit_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            segment_frames: 5,
            lr: 1e-4,
            grad_clip: 1e3,
            reinit_interval: 250,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CodecError::config("batch size must be at least 1"));
        }
        if self.segment_frames == 0 {
            return Err(CodecError::config("segment length must be at least 1 frame"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(CodecError::config(format!("learning rate {} must be positive", self.lr)));
        }
        if !self.grad_clip.is_finite() || self.grad_clip <= 0.0 {
            return Err(CodecError::config(format!(
                "gradient clip {} must be positive",
                self.grad_clip
            )));
        }
        if self.reinit_interval == 0 {
            return Err(CodecError::config("reinit interval must be at least 1 step"));
        }
        Ok(())
    }
}

// ── Corpus segmentation ─────────────────────────────────────────────────────

/// Chop every utterance into fixed-length windows of `seg_samples`. An
/// utterance shorter than one window is zero-padded up to one; otherwise the
/// partial tail is dropped.
pub fn segment_corpus(corpus: &[AudioBuffer], seg_samples: usize) -> Vec<AudioBuffer> {
    assert!(seg_samples > 0);
    let mut out = Vec::new();
    for utt in corpus {
        if utt.samples.is_empty() {
            continue;
        }
        if utt.samples.len() < seg_samples {
            let mut s = utt.samples.clone();
            s.resize(seg_samples, 0.0);
            out.push(AudioBuffer::new(s, utt.sample_rate));
        } else {
            for chunk in utt.samples.chunks_exact(seg_samples) {
                out.push(AudioBuffer::new(chunk.to_vec(), utt.sample_rate));
            }
        }
    }
    out
}

// ── Step reporting ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    /// Residual layers active this step.
    pub q: usize,
    /// Batch-mean losses.
    pub losses: LossReport,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Codewords reseeded at the end of this step (0 outside sweep steps).
    pub reinit_count: usize,
}

impl StepReport {
    pub fn format_line(&self) -> String {
        format!(
            "step {:>6} q={} total={:.6} mel={:.6} ssl={:.6} cb={:.6} commit={:.6} gnorm={:.3e} reinit={}",
            self.step,
            self.q,
            self.losses.total,
            self.losses.mel_multi_scale,
            self.losses.ssl_mse,
            self.losses.codebook_l1,
            self.losses.commitment,
            self.grad_norm,
            self.reinit_count
        )
    }
}

// ── Trainer ─────────────────────────────────────────────────────────────────

/// Rows kept per layer in the dead-code reseeding pool.
const RESEED_POOL_ROWS: usize = 1024;

pub struct Trainer {
    pub model: Codec,
    pub config: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    segments: Vec<SegmentData>,
    /// Per codebook layer (semantic first): usage counts since the last sweep.
    usage: Vec<Vec<u64>>,
    /// Which layers took part in at least one step since the last sweep.
    window_active: Vec<bool>,
    /// Reservoir sample of the window's projected frames, (rows x D)
    /// flattened, per layer; dead codes are reseeded from this pool so a
    /// sweep sees the whole window's distribution, not just the last batch.
    pool: Vec<Vec<f64>>,
    /// Frames offered to each layer's reservoir since the last sweep.
    pool_seen: Vec<u64>,
    step: u64,
}

impl Trainer {
    /// Fits the frozen extractor on the corpus, segments and caches targets,
    /// and seeds every codebook from projected data so early training does
    /// not fight arbitrary codewords.
    pub fn new(mut model: Codec, corpus: &[AudioBuffer], config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(CodecError::config("cannot train on an empty corpus"));
        }
        model.extractor.fit(&mut model.store, corpus)?;

        let seg_samples = config.segment_frames * model.total_stride();
        let chunks = segment_corpus(corpus, seg_samples);
        if chunks.is_empty() {
            return Err(CodecError::config("corpus segmented to nothing"));
        }
        let segments: Vec<SegmentData> =
            chunks.iter().map(|c| model.prepare_segment(c)).collect::<Result<_>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        seed_codebooks(&mut model, &segments, &mut rng)?;

        let n_layers = model.config.n_layers;
        let mut usage = Vec::with_capacity(n_layers);
        usage.push(vec![0u64; model.sem_cb.k]);
        for layer in &model.rest_layers {
            usage.push(vec![0u64; layer.k]);
        }
        let adam = Adam::new(config.lr);
        Ok(Trainer {
            model,
            config,
            adam,
            rng,
            segments,
            usage,
            window_active: vec![false; n_layers],
            pool: vec![Vec::new(); n_layers],
            pool_seen: vec![0; n_layers],
            step: 0,
        })
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn usage(&self, layer: usize) -> &[u64] {
        &self.usage[layer]
    }

    /// One optimizer step: sample the layer dropout, run a batch forward on
    /// one tape, backpropagate the batch-mean total, update, and track
    /// codeword usage. A non-finite loss aborts before any update.
    pub fn step(&mut self) -> Result<StepReport> {
        let n_rest = self.model.rest_layers.len();
        let q = sample_dropout_q(&mut self.rng, n_rest);
        let batch: Vec<usize> =
            (0..self.config.batch_size).map(|_| self.rng.gen_range(0..self.segments.len())).collect();

        let mut g = Graph::new(&self.model.store);
        let mut items = Vec::with_capacity(batch.len());
        for &idx in &batch {
            let f = self.model.forward_on_graph(&mut g, &self.segments[idx], q, false)?;
            items.push(f);
        }

        let mut report = LossReport {
            ssl_mse: 0.0,
            mel_multi_scale: 0.0,
            codebook_l1: 0.0,
            commitment: 0.0,
            total: 0.0,
        };
        let inv = 1.0 / batch.len() as f64;
        for f in &items {
            report.ssl_mse += g.tape.value(f.ssl_mse) * inv;
            report.mel_multi_scale += g.tape.value(f.mel_multi_scale) * inv;
            report.codebook_l1 += g.tape.value(f.codebook_l1) * inv;
            report.commitment += g.tape.value(f.commitment) * inv;
            report.total += g.tape.value(f.total) * inv;
        }
        report.validate().map_err(|e| {
            CodecError::numeric(format!(
                "aborting step {} before the update (q={q}, segments {:?}): {e}",
                self.step + 1,
                batch
            ))
        })?;

        let mean_total = {
            let mut sum = items[0].total;
            for f in &items[1..] {
                sum = g.tape.add(sum, f.total);
            }
            g.tape.scale(sum, inv)
        };
        g.tape.backward(mean_total);

        let grads = g.grads();
        let grad_norm = self.adam.step(&mut self.model.store, &grads, self.config.grad_clip);

        // Usage bookkeeping: semantic layer first, then the q active rest
        // layers; feed the window's projections into the reseeding pools.
        let mut step_proj: Vec<Vec<f64>> = vec![Vec::new(); self.usage.len()];
        for f in &items {
            for &tok in &f.sem_tokens {
                self.usage[0][tok as usize] += 1;
            }
            for (i, row) in f.rest_tokens.iter().enumerate() {
                for &tok in row {
                    self.usage[i + 1][tok as usize] += 1;
                }
            }
            for (slot, &pid) in f.layer_proj.iter().enumerate() {
                let d = g.tape.shape(pid)[0];
                let t = g.tape.shape(pid)[1];
                let data = g.tape.data(pid);
                let rows = &mut step_proj[slot];
                rows.reserve(d * t);
                for ti in 0..t {
                    for c in 0..d {
                        rows.push(data[c * t + ti]);
                    }
                }
            }
        }
        self.window_active[0] = true;
        for i in 0..q {
            self.window_active[i + 1] = true;
        }
        let d = self.model.config.d;
        for (l, rows) in step_proj.into_iter().enumerate() {
            for row in rows.chunks_exact(d) {
                self.pool_seen[l] += 1;
                if self.pool[l].len() / d < RESEED_POOL_ROWS {
                    self.pool[l].extend_from_slice(row);
                } else {
                    let j = self.rng.gen_range(0..self.pool_seen[l]) as usize;
                    if j < RESEED_POOL_ROWS {
                        self.pool[l][j * d..(j + 1) * d].copy_from_slice(row);
                    }
                }
            }
        }

        self.step += 1;
        let mut reinit_count = 0;
        if self.step % self.config.reinit_interval == 0 {
            reinit_count = self.reinit_sweep();
        }

        Ok(StepReport { step: self.step, q, losses: report, grad_norm, reinit_count })
    }

    /// Reseed dead codewords in every layer that was active since the last
    /// sweep, then reset the window and its pools.
    fn reinit_sweep(&mut self) -> usize {
        let mut total = 0;
        for l in 0..self.usage.len() {
            if !self.window_active[l] || self.pool[l].is_empty() {
                continue;
            }
            let cb = if l == 0 { &self.model.sem_cb } else { &self.model.rest_layers[l - 1] };
            total += reinit_dead_codes(
                &mut self.model.store,
                cb,
                &self.usage[l],
                &self.pool[l],
                &mut self.rng,
            );
        }
        for u in &mut self.usage {
            u.iter_mut().for_each(|v| *v = 0);
        }
        self.window_active.iter_mut().for_each(|v| *v = false);
        self.pool.iter_mut().for_each(Vec::clear);
        self.pool_seen.iter_mut().for_each(|v| *v = 0);
        total
    }
}

/// Initialize every codebook from what its layer will actually see: the
/// semantic codebook from projected encoder outputs, each residual layer from
/// the projected residual left over after the layers before it.
fn seed_codebooks(model: &mut Codec, segments: &[SegmentData], rng: &mut ChaCha8Rng) -> Result<()> {
    let factor = model.config.variant.downsample_factor();
    let d = model.config.d;

    // Semantic layer: projections of the ResNet-encoded pooled feature.
    let mut batch = Vec::new();
    for seg in segments {
        let mut g = Graph::new(&model.store);
        let raw = g.tape.constant(seg.ssl.data.clone(), &[seg.ssl.dim, seg.ssl.frames]);
        let pooled = g.tape.avg_pool1d(raw, factor);
        let z = model.sem_enc.forward(&mut g, &model.store, pooled);
        let w_in = g.param(&model.store, model.sem_cb.w_in);
        let z_proj = g.tape.matmul(w_in, z);
        append_rows(&mut batch, g.tape.data(z_proj), d);
    }
    init_codebook_from_batch(&mut model.store, &model.sem_cb, &batch, rng);

    // Residual base per segment, with the semantic codebook just seeded.
    let mut residuals = Vec::with_capacity(segments.len());
    for seg in segments {
        let mut g = Graph::new(&model.store);
        let sem = semantic_encode(
            &mut g,
            &model.store,
            &seg.ssl,
            factor,
            &model.sem_enc,
            &model.sem_cb,
            &model.sem_dec,
        )?;
        let x = g.tape.constant(seg.samples.clone(), &[1, seg.samples.len()]);
        let wave = model.wave_enc.forward(&mut g, &model.store, x);
        let t = g.tape.shape(sem.rvq1_feat)[1].min(g.tape.shape(wave)[1]);
        let sem_t = g.tape.shape(sem.rvq1_feat)[1];
        let wave_t = g.tape.shape(wave)[1];
        let rf = g.tape.data(sem.rvq1_feat);
        let wf = g.tape.data(wave);
        let h = model.config.h;
        let mut data = vec![0.0; h * t];
        for c in 0..h {
            for ti in 0..t {
                data[c * t + ti] = wf[c * wave_t + ti] - rf[c * sem_t + ti];
            }
        }
        residuals.push(FeatureMap::new(data, h, t, model.frame_rate()));
    }

    // Each residual layer sees what the previous ones left behind.
    for i in 0..model.rest_layers.len() {
        let mut batch = Vec::new();
        for r in &residuals {
            let left = if i == 0 {
                r.clone()
            } else {
                rvq_encode(&model.store, &model.rest_layers, r, i)?.final_residual
            };
            let mut z_proj = vec![0.0; d * left.frames];
            linalg::gemm(
                d,
                model.config.h,
                left.frames,
                model.store.data(model.rest_layers[i].w_in),
                &left.data,
                &mut z_proj,
            );
            append_rows(&mut batch, &z_proj, d);
        }
        let layer = &model.rest_layers[i];
        init_codebook_from_batch(&mut model.store, layer, &batch, rng);
    }
    Ok(())
}

/// Append a (D x T) column-per-frame block as T rows of D values.
fn append_rows(rows: &mut Vec<f64>, data: &[f64], d: usize) {
    let t = data.len() / d;
    rows.reserve(d * t);
    for ti in 0..t {
        for c in 0..d {
            rows.push(data[c * t + ti]);
        }
    }
}
