//! The assembled codec: configuration, both streams, losses, and the
//! encode/decode entry points. The semantic stream distills pooled extractor
//! features into the first token layer; the waveform stream quantizes what
//! that layer misses; a mirrored transposed-conv decoder turns the summed
//! features back into audio.

pub mod checkpoint;
pub mod corpus;
pub mod train;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::mel::MelFilterbank;
use crate::dsp::stft::StftPlan;
use crate::dsp::{AudioBuffer, FeatureMap};
use crate::error::{CodecError, Result};
use crate::metrics::{mel_bands_for_scale, MEL_LOG_FLOOR};
use crate::nn::{Graph, ParamStore, ResNetStack, WaveDecoder, WaveEncoder};
use crate::quant::{
    bypass_on_tape, rvq_encode, rvq_forward_on_tape, ProjectedCodebook, TokenMatrix,
};
use crate::semantic::{semantic_encode, SslExtractor};
use crate::tensor::TensorId;

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "25hz")]
    Hz25,
    #[serde(rename = "12.5hz")]
    Hz12_5,
}

impl Variant {
    pub fn strides(self) -> &'static [usize] {
        match self {
            Variant::Hz25 => &[4, 5, 6, 8],
            Variant::Hz12_5 => &[4, 5, 6, 8, 2],
        }
    }

    /// Average-pool factor taking 50 Hz extractor features to the codec rate.
    pub fn downsample_factor(self) -> usize {
        match self {
            Variant::Hz25 => 2,
            Variant::Hz12_5 => 4,
        }
    }

    pub fn default_wave_channels(self) -> Vec<usize> {
        match self {
            Variant::Hz25 => vec![32, 64, 64, 64],
            Variant::Hz12_5 => vec![32, 64, 64, 64, 64],
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Hz25 => write!(f, "25hz"),
            Variant::Hz12_5 => write!(f, "12.5hz"),
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct CodecConfig {
    pub variant: Variant,
    /// Total codebook layers including the semantic layer.
    pub n_layers: usize,
    pub rvq1_size: usize,
    pub rest_size: usize,
    pub h: usize,
    pub d: usize,
    pub sample_rate: u32,
    pub mel_loss_scales: Vec<usize>,
    pub w_mel: f64,
    pub w_ssl: f64,
    pub w_codebook: f64,
    pub w_commit: f64,
    pub wave_channels: Vec<usize>,
    pub resnet_blocks: usize,
}

impl Default for CodecConfig {
    fn default() -> CodecConfig {
        CodecConfig {
            variant: Variant::Hz25,
            n_layers: 8,
            rvq1_size: 1024,
            rest_size: 1024,
            h: 64,
            d: 8,
            sample_rate: 24000,
            mel_loss_scales: vec![64, 128, 256, 512, 1024, 2048],
            w_mel: 15.0,
            w_ssl: 1.0,
            w_codebook: 1.0,
            w_commit: 0.25,
            wave_channels: Variant::Hz25.default_wave_channels(),
            resnet_blocks: 2,
        }
    }
}

impl CodecConfig {
    pub fn with_variant(variant: Variant) -> CodecConfig {
        CodecConfig {
            variant,
            wave_channels: variant.default_wave_channels(),
            ..CodecConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(CodecError::config(format!(
                "need at least 2 codebook layers, got {}",
                self.n_layers
            )));
        }
        if self.rvq1_size < 2 || self.rest_size < 2 {
            return Err(CodecError::config(format!(
                "codebook sizes must be at least 2, got ({}, {})",
                self.rvq1_size, self.rest_size
            )));
        }
        if self.d > self.h {
            return Err(CodecError::config(format!(
                "code dim {} exceeds latent dim {}",
                self.d, self.h
            )));
        }
        if self.h < 3 {
            return Err(CodecError::config(format!("latent dim {} is too small", self.h)));
        }
        if self.wave_channels.len() != self.variant.strides().len() {
            return Err(CodecError::config(format!(
                "{} wave channel widths for {} strides",
                self.wave_channels.len(),
                self.variant.strides().len()
            )));
        }
        if self.sample_rate == 0 {
            return Err(CodecError::config("zero sample rate"));
        }
        if self.mel_loss_scales.is_empty() {
            return Err(CodecError::config("mel loss needs at least one scale"));
        }
        for &s in &self.mel_loss_scales {
            mel_bands_for_scale(s)?;
        }
        for w in [self.w_mel, self.w_ssl, self.w_codebook, self.w_commit] {
            if !w.is_finite() || w < 0.0 {
                return Err(CodecError::config(format!("loss weight {w} must be finite and >= 0")));
            }
        }
        if self.resnet_blocks == 0 {
            return Err(CodecError::config("semantic stacks need at least one block"));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.variant.strides().iter().product()
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.total_stride() as f64
    }

    /// Codebook size per layer, row 0 first.
    pub fn layer_sizes(&self, n_layers: usize) -> Vec<u32> {
        let mut sizes = vec![self.rvq1_size as u32];
        sizes.extend(std::iter::repeat(self.rest_size as u32).take(n_layers - 1));
        sizes
    }
}

// ── Loss report ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub ssl_mse: f64,
    pub mel_multi_scale: f64,
    pub codebook_l1: f64,
    pub commitment: f64,
    pub total: f64,
}

impl LossReport {
    pub fn validate(&self) -> Result<()> {
        let parts = [
            ("ssl_mse", self.ssl_mse),
            ("mel_multi_scale", self.mel_multi_scale),
            ("codebook_l1", self.codebook_l1),
            ("commitment", self.commitment),
            ("total", self.total),
        ];
        let bad: Vec<&str> =
            parts.iter().filter(|(_, v)| !v.is_finite()).map(|&(n, _)| n).collect();
        if !bad.is_empty() {
            return Err(CodecError::numeric(format!(
                "non-finite loss terms: {} (report: {:?})",
                bad.join(", "),
                self
            )));
        }
        Ok(())
    }
}

// ── Model ───────────────────────────────────────────────────────────────────

/// A prepared training/eval item: padded samples, the frozen 50 Hz feature,
/// and the per-scale log-mel targets of the padded input.
pub struct SegmentData {
    pub samples: Vec<f64>,
    pub ssl: FeatureMap,
    pub mel_targets: Vec<FeatureMap>,
}

/// Per-item tensors from one training forward pass.
pub struct ItemForward {
    pub total: TensorId,
    pub ssl_mse: TensorId,
    pub mel_multi_scale: TensorId,
    pub codebook_l1: TensorId,
    pub commitment: TensorId,
    pub decoded: TensorId,
    pub sem_tokens: Vec<u32>,
    pub rest_tokens: Vec<Vec<u32>>,
    /// Projected inputs per codebook layer (semantic first), for usage
    /// tracking and dead-code reseeding.
    pub layer_proj: Vec<TensorId>,
}

pub struct Codec {
    pub config: CodecConfig,
    pub store: ParamStore,
    pub extractor: SslExtractor,
    pub sem_enc: ResNetStack,
    pub sem_cb: ProjectedCodebook,
    pub sem_dec: ResNetStack,
    pub wave_enc: WaveEncoder,
    pub rest_layers: Vec<ProjectedCodebook>,
    pub wave_dec: WaveDecoder,
    mel_banks: Vec<(usize, Arc<StftPlan>, Arc<MelFilterbank>)>,
}

impl Codec {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Codec> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let strides = config.variant.strides();

        let extractor = SslExtractor::new(&mut store, "extractor", config.h, config.sample_rate);
        let sem_enc =
            ResNetStack::new(&mut store, &mut rng, "semantic.enc", config.h, config.resnet_blocks);
        let sem_cb = ProjectedCodebook::new(
            &mut store,
            &mut rng,
            "semantic.cb",
            config.rvq1_size,
            config.d,
            config.h,
        );
        let sem_dec =
            ResNetStack::new(&mut store, &mut rng, "semantic.dec", config.h, config.resnet_blocks);
        let wave_enc = WaveEncoder::new(
            &mut store,
            &mut rng,
            "wave.enc",
            strides,
            &config.wave_channels,
            config.h,
        );
        let rest_layers: Vec<ProjectedCodebook> = (0..config.n_layers - 1)
            .map(|i| {
                ProjectedCodebook::new(
                    &mut store,
                    &mut rng,
                    &format!("rest{i}.cb"),
                    config.rest_size,
                    config.d,
                    config.h,
                )
            })
            .collect();
        let wave_dec = WaveDecoder::new(
            &mut store,
            &mut rng,
            "wave.dec",
            strides,
            &config.wave_channels,
            config.h,
        );

        let mel_banks = config
            .mel_loss_scales
            .iter()
            .map(|&n_fft| {
                let bands = mel_bands_for_scale(n_fft).expect("validated scale");
                let plan = StftPlan::new(n_fft, n_fft / 4);
                let fb = MelFilterbank::new(
                    bands,
                    n_fft,
                    config.sample_rate,
                    0.0,
                    config.sample_rate as f64 / 2.0,
                );
                (n_fft, plan, fb)
            })
            .collect();

        Ok(Codec {
            config,
            store,
            extractor,
            sem_enc,
            sem_cb,
            sem_dec,
            wave_enc,
            rest_layers,
            wave_dec,
            mel_banks,
        })
    }

    pub fn total_stride(&self) -> usize {
        self.config.total_stride()
    }

    pub fn frame_rate(&self) -> f64 {
        self.config.frame_rate()
    }

    /// Pads, extracts the frozen feature, and precomputes per-scale log-mel
    /// targets so repeated training passes over the same item are cheap.
    pub fn prepare_segment(&self, audio: &AudioBuffer) -> Result<SegmentData> {
        if audio.sample_rate != self.config.sample_rate {
            return Err(CodecError::config(format!(
                "expected {} Hz audio, got {} Hz",
                self.config.sample_rate, audio.sample_rate
            )));
        }
        let padded = audio.padded_to_multiple(self.total_stride());
        let ssl = self.extractor.extract(&self.store, &padded)?;
        let mut mel_targets = Vec::with_capacity(self.mel_banks.len());
        for (_, plan, fb) in &self.mel_banks {
            let spec = plan.magnitudes(&padded.samples)?;
            mel_targets.push(crate::dsp::mel::log_mel(&spec, fb, MEL_LOG_FLOOR));
        }
        Ok(SegmentData { samples: padded.samples, ssl, mel_targets })
    }

    /// Semantic-stream forward on a tape. Returns (tokens, rvq1_feat,
    /// ssl_target, codebook loss, commitment loss, z_proj).
    #[allow(clippy::type_complexity)]
    fn semantic_on_graph(
        &self,
        g: &mut Graph,
        ssl: &FeatureMap,
        bypass: bool,
    ) -> Result<(Vec<u32>, TensorId, TensorId, TensorId, TensorId, Option<TensorId>)> {
        let factor = self.config.variant.downsample_factor();
        if bypass {
            let raw = g.tape.constant(ssl.data.clone(), &[ssl.dim, ssl.frames]);
            let target = g.tape.avg_pool1d(raw, factor);
            let z = self.sem_enc.forward(g, &self.store, target);
            let quantized = bypass_on_tape(g, &self.store, &self.sem_cb, z);
            let feat = self.sem_dec.forward(g, &self.store, quantized);
            let zero_a = g.tape.scalar_const(0.0);
            let zero_b = g.tape.scalar_const(0.0);
            Ok((Vec::new(), feat, target, zero_a, zero_b, None))
        } else {
            let r = semantic_encode(
                g,
                &self.store,
                ssl,
                factor,
                &self.sem_enc,
                &self.sem_cb,
                &self.sem_dec,
            )?;
            Ok((
                r.tokens,
                r.rvq1_feat,
                r.ssl_target,
                r.codebook_loss,
                r.commitment_loss,
                Some(r.rvq1_z_proj),
            ))
        }
    }

    /// Full training forward for one prepared item on a shared graph.
    /// `q` residual layers are active; `bypass` replaces every quantizer
    /// with its smooth projection stand-in (used by gradient checks).
    pub fn forward_on_graph(
        &self,
        g: &mut Graph,
        seg: &SegmentData,
        q: usize,
        bypass: bool,
    ) -> Result<ItemForward> {
        let stride = self.total_stride();
        if seg.samples.len() % stride != 0 || seg.samples.is_empty() {
            return Err(CodecError::config(format!(
                "segment length {} is not a positive multiple of the total stride {stride}",
                seg.samples.len()
            )));
        }
        if q > self.rest_layers.len() {
            return Err(CodecError::config(format!(
                "dropout q={q} exceeds the {} available layers",
                self.rest_layers.len()
            )));
        }

        let (sem_tokens, rvq1_feat, ssl_target, sem_cb_loss, sem_commit, sem_proj) =
            self.semantic_on_graph(g, &seg.ssl, bypass)?;

        let x = g.tape.constant(seg.samples.clone(), &[1, seg.samples.len()]);
        let wave_feat = self.wave_enc.forward(g, &self.store, x);

        let (rvq1_feat, ssl_target, wave_feat) =
            self.align_frames(g, rvq1_feat, ssl_target, wave_feat)?;

        let residual = g.tape.sub(wave_feat, rvq1_feat);

        let (rest_tokens, quantized_sum, rest_cb, rest_commit, rest_proj) = if bypass {
            let shape = g.tape.shape(residual).to_vec();
            let mut sum: Option<TensorId> = None;
            let mut r = residual;
            for layer in &self.rest_layers[..q] {
                let quantized = bypass_on_tape(g, &self.store, layer, r);
                sum = Some(match sum {
                    None => quantized,
                    Some(s) => g.tape.add(s, quantized),
                });
                r = g.tape.sub(r, quantized);
            }
            let sum = sum
                .unwrap_or_else(|| g.tape.constant(vec![0.0; shape.iter().product()], &shape));
            (Vec::new(), sum, Vec::new(), Vec::new(), Vec::new())
        } else {
            let rvq = rvq_forward_on_tape(g, &self.store, &self.rest_layers, residual, q)?;
            (
                rvq.rows,
                rvq.quantized_sum,
                rvq.codebook_losses,
                rvq.commitment_losses,
                rvq.layer_proj,
            )
        };

        let dec_in = g.tape.add(rvq1_feat, quantized_sum);
        let decoded = self.wave_dec.forward(g, &self.store, dec_in);

        let ssl_mse = g.tape.mse_mean(rvq1_feat, ssl_target);

        let mut mel_total: Option<TensorId> = None;
        for ((_, plan, fb), target) in self.mel_banks.iter().zip(&seg.mel_targets) {
            let mag = g.tape.stft_mag(decoded, plan)?;
            let fbc = g.tape.constant(fb.weights.clone(), &[fb.n_mels, fb.bins]);
            let mel = g.tape.matmul(fbc, mag);
            let logm = g.tape.log_max(mel, MEL_LOG_FLOOR);
            let tgt = g.tape.constant(target.data.clone(), &[target.dim, target.frames]);
            let term = g.tape.l1_mean(logm, tgt);
            mel_total = Some(match mel_total {
                None => term,
                Some(acc) => g.tape.add(acc, term),
            });
        }
        let mel_multi_scale = mel_total.expect("validated non-empty scales");

        let mut codebook_l1 = sem_cb_loss;
        for &l in &rest_cb {
            codebook_l1 = g.tape.add(codebook_l1, l);
        }
        let mut commitment = sem_commit;
        for &l in &rest_commit {
            commitment = g.tape.add(commitment, l);
        }

        let wm = g.tape.scale(mel_multi_scale, self.config.w_mel);
        let ws = g.tape.scale(ssl_mse, self.config.w_ssl);
        let wc = g.tape.scale(codebook_l1, self.config.w_codebook);
        let wk = g.tape.scale(commitment, self.config.w_commit);
        let total = {
            let a = g.tape.add(wm, ws);
            let b = g.tape.add(a, wc);
            g.tape.add(b, wk)
        };

        let mut layer_proj = Vec::new();
        if let Some(p) = sem_proj {
            layer_proj.push(p);
        }
        layer_proj.extend(rest_proj);

        Ok(ItemForward {
            total,
            ssl_mse,
            mel_multi_scale,
            codebook_l1,
            commitment,
            decoded,
            sem_tokens,
            rest_tokens,
            layer_proj,
        })
    }

    /// Truncates the semantic and waveform streams to a common frame count.
    /// After padding they match exactly; anything off by more than one frame
    /// is a configuration bug.
    fn align_frames(
        &self,
        g: &mut Graph,
        rvq1_feat: TensorId,
        ssl_target: TensorId,
        wave_feat: TensorId,
    ) -> Result<(TensorId, TensorId, TensorId)> {
        let sem_t = g.tape.shape(rvq1_feat)[1];
        let wave_t = g.tape.shape(wave_feat)[1];
        if sem_t.abs_diff(wave_t) > 1 {
            return Err(CodecError::config(format!(
                "stream frame counts diverge: semantic {sem_t}, waveform {wave_t}"
            )));
        }
        let t = sem_t.min(wave_t);
        let a = if sem_t > t { g.tape.truncate_cols(rvq1_feat, t) } else { rvq1_feat };
        let b = if sem_t > t { g.tape.truncate_cols(ssl_target, t) } else { ssl_target };
        let c = if wave_t > t { g.tape.truncate_cols(wave_feat, t) } else { wave_feat };
        Ok((a, b, c))
    }

    /// One losses-only forward pass; the public training-loss probe.
    pub fn forward_train(&self, audio: &AudioBuffer, q: usize) -> Result<LossReport> {
        let seg = self.prepare_segment(audio)?;
        let mut g = Graph::new(&self.store);
        let f = self.forward_on_graph(&mut g, &seg, q, false)?;
        let report = LossReport {
            ssl_mse: g.tape.value(f.ssl_mse),
            mel_multi_scale: g.tape.value(f.mel_multi_scale),
            codebook_l1: g.tape.value(f.codebook_l1),
            commitment: g.tape.value(f.commitment),
            total: g.tape.value(f.total),
        };
        report.validate()?;
        Ok(report)
    }

    /// Audio to tokens. Row 0 always carries the semantic layer; rows 1..
    /// carry `n_layers - 1` residual layers.
    pub fn encode(&self, audio: &AudioBuffer, n_layers: usize) -> Result<TokenMatrix> {
        if n_layers == 0 || n_layers > self.config.n_layers {
            return Err(CodecError::config(format!(
                "layer count {n_layers} outside 1..={}",
                self.config.n_layers
            )));
        }
        if audio.sample_rate != self.config.sample_rate {
            return Err(CodecError::config(format!(
                "expected {} Hz audio, got {} Hz",
                self.config.sample_rate, audio.sample_rate
            )));
        }
        if audio.samples.is_empty() {
            return Err(CodecError::config("cannot encode empty audio"));
        }
        let padded = audio.padded_to_multiple(self.total_stride());
        let ssl = self.extractor.extract(&self.store, &padded)?;

        let mut g = Graph::new(&self.store);
        let (sem_tokens, rvq1_feat, _target, _cb, _commit, _proj) =
            self.semantic_on_graph(&mut g, &ssl, false)?;
        let x = g.tape.constant(padded.samples.clone(), &[1, padded.samples.len()]);
        let wave_feat = self.wave_enc.forward(&mut g, &self.store, x);

        let sem_t = g.tape.shape(rvq1_feat)[1];
        let wave_t = g.tape.shape(wave_feat)[1];
        if sem_t.abs_diff(wave_t) > 1 {
            return Err(CodecError::config(format!(
                "stream frame counts diverge: semantic {sem_t}, waveform {wave_t}"
            )));
        }
        let t = sem_t.min(wave_t);

        let frames = t;
        let residual: Vec<f64> = {
            let rf = g.tape.data(rvq1_feat);
            let wf = g.tape.data(wave_feat);
            let mut out = vec![0.0; self.config.h * t];
            for c in 0..self.config.h {
                for ti in 0..t {
                    out[c * t + ti] = wf[c * wave_t + ti] - rf[c * sem_t + ti];
                }
            }
            out
        };
        let residual_fm = FeatureMap::new(residual, self.config.h, frames, self.frame_rate());
        let rest = rvq_encode(&self.store, &self.rest_layers, &residual_fm, n_layers - 1)?;

        let mut codes = Vec::with_capacity(n_layers);
        codes.push(sem_tokens[..t].to_vec());
        codes.extend(rest.rows);
        let tokens = TokenMatrix {
            codes,
            layer_sizes: self.config.layer_sizes(n_layers),
            frame_rate: self.frame_rate(),
        };
        tokens.validate()?;
        Ok(tokens)
    }

    /// Tokens to audio. Never touches the extractor: row 0 goes through the
    /// semantic codebook and ResNet decoder, rest rows dequantize directly,
    /// and the sum drives the waveform decoder.
    pub fn decode(&self, tokens: &TokenMatrix) -> Result<AudioBuffer> {
        tokens.validate()?;
        if tokens.n_layers() == 0 || tokens.n_layers() > self.config.n_layers {
            return Err(CodecError::format(format!(
                "token matrix has {} layers, model supports 1..={}",
                tokens.n_layers(),
                self.config.n_layers
            )));
        }
        let expected = self.config.layer_sizes(tokens.n_layers());
        if tokens.layer_sizes != expected {
            return Err(CodecError::format(format!(
                "token layer sizes {:?} do not match the model's {:?}",
                tokens.layer_sizes, expected
            )));
        }
        if (tokens.frame_rate - self.frame_rate()).abs() > 1e-9 {
            return Err(CodecError::format(format!(
                "token frame rate {} does not match the model's {}",
                tokens.frame_rate,
                self.frame_rate()
            )));
        }
        if tokens.frames() == 0 {
            return Err(CodecError::format("cannot decode an empty token stream"));
        }

        let quantized_h = crate::quant::decode_layer(
            &self.store,
            &self.sem_cb,
            &tokens.codes[0],
            self.frame_rate(),
        )
        .map_err(|e| CodecError::format(format!("layer 0: {e}")))?;

        let mut rest_sum = vec![0.0; self.config.h * tokens.frames()];
        for (i, row) in tokens.codes[1..].iter().enumerate() {
            let layer = &self.rest_layers[i];
            let f = crate::quant::decode_layer(&self.store, layer, row, self.frame_rate())
                .map_err(|e| CodecError::format(format!("layer {}: {e}", i + 1)))?;
            for (s, v) in rest_sum.iter_mut().zip(&f.data) {
                *s += v;
            }
        }

        let mut g = Graph::new(&self.store);
        let qh = g.tape.constant(quantized_h.data, &[self.config.h, tokens.frames()]);
        let rvq1_feat = self.sem_dec.forward(&mut g, &self.store, qh);
        let rest = g.tape.constant(rest_sum, &[self.config.h, tokens.frames()]);
        let dec_in = g.tape.add(rvq1_feat, rest);
        let audio = self.wave_dec.forward(&mut g, &self.store, dec_in);
        Ok(AudioBuffer::new(g.tape.data(audio).to_vec(), self.config.sample_rate))
    }
}
