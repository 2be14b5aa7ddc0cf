//! Semantic stream: a frozen, deterministic feature extractor (standardized
//! stacked log-mel at 50 Hz, standing in for a pretrained speech model),
//! average-pool downsampling to the codec frame rate, and the ResNet-VQ-ResNet
//! path that turns pooled features into the first token layer and its
//! reconstructed feature.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::bytes;
use crate::dsp::mel::{log_mel, MelFilterbank};
use crate::dsp::stft::StftPlan;
use crate::dsp::{AudioBuffer, FeatureMap};
use crate::error::{CodecError, Result};
use crate::nn::{Graph, ParamId, ParamStore, ResNetStack};
use crate::quant::{encode_on_tape, ProjectedCodebook};
use crate::tensor::TensorId;

// ── Pseudo-SSL extractor ────────────────────────────────────────────────────

pub const SSL_HOP: usize = 480;
pub const SSL_N_FFT: usize = 512;

/// Frozen 50 Hz feature extractor: log-mel with one frame of context stacked
/// on each side, truncated to `dim` rows, standardized per dimension with
/// corpus statistics. Carries no trainable state; the statistics live in the
/// parameter store as non-trainable entries so checkpoints round-trip them.
pub struct SslExtractor {
    pub dim: usize,
    pub n_base: usize,
    pub sample_rate: u32,
    pub mean: ParamId,
    pub std: ParamId,
    plan: Arc<StftPlan>,
    fb: Arc<MelFilterbank>,
}

impl SslExtractor {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, sample_rate: u32) -> SslExtractor {
        assert!(dim >= 3, "extractor dim must be at least 3");
        let n_base = dim.div_ceil(3);
        let plan = StftPlan::new(SSL_N_FFT, SSL_HOP);
        let fb = MelFilterbank::new(n_base, SSL_N_FFT, sample_rate, 0.0, sample_rate as f64 / 2.0);
        let mean = store.register(&format!("{name}.mean"), &[dim], vec![0.0; dim], false);
        let std = store.register(&format!("{name}.std"), &[dim], vec![1.0; dim], false);
        SslExtractor { dim, n_base, sample_rate, mean, std, plan, fb }
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / SSL_HOP as f64
    }

    /// Stacked log-mel before standardization: exactly floor(len/hop) frames.
    fn raw_features(&self, audio: &AudioBuffer) -> Result<FeatureMap> {
        if audio.sample_rate != self.sample_rate {
            return Err(CodecError::config(format!(
                "extractor expects {} Hz audio, got {} Hz",
                self.sample_rate, audio.sample_rate
            )));
        }
        if audio.samples.len() < SSL_HOP {
            return Err(CodecError::config(format!(
                "audio too short for feature extraction: {} samples, need at least {SSL_HOP}",
                audio.samples.len()
            )));
        }
        let spec = self.plan.magnitudes(&audio.samples)?;
        let mel = log_mel(&spec, &self.fb, 1e-5);
        let frames = audio.samples.len() / SSL_HOP;

        // Stack [t-1, t, t+1] with edge clamping, keep the first `dim` rows.
        let nb = self.n_base;
        let mut data = vec![0.0; self.dim * frames];
        for c in 0..self.dim {
            let (off, base_c) = (c / nb, c % nb);
            for t in 0..frames {
                let src_t = (t + off).saturating_sub(1).min(frames - 1);
                data[c * frames + t] = mel.at(base_c, src_t);
            }
        }
        Ok(FeatureMap::new(data, self.dim, frames, self.frame_rate()))
    }

    pub fn extract(&self, store: &ParamStore, audio: &AudioBuffer) -> Result<FeatureMap> {
        let mut f = self.raw_features(audio)?;
        let mean = store.data(self.mean);
        let std = store.data(self.std);
        for c in 0..f.dim {
            for t in 0..f.frames {
                f.data[c * f.frames + t] = (f.data[c * f.frames + t] - mean[c]) / std[c];
            }
        }
        Ok(f)
    }

    /// Fits per-dimension mean and standard deviation over the corpus,
    /// flooring the deviation at 1e-8 so constant dimensions stay finite.
    pub fn fit(&self, store: &mut ParamStore, corpus: &[AudioBuffer]) -> Result<()> {
        if corpus.is_empty() {
            return Err(CodecError::config("cannot fit extractor statistics on an empty corpus"));
        }
        let mut sum = vec![0.0; self.dim];
        let mut sum_sq = vec![0.0; self.dim];
        let mut n = 0usize;
        for audio in corpus {
            let f = self.raw_features(audio)?;
            n += f.frames;
            for c in 0..self.dim {
                for t in 0..f.frames {
                    let v = f.at(c, t);
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
        }
        let nf = n as f64;
        for c in 0..self.dim {
            let mean = sum[c] / nf;
            let var = (sum_sq[c] / nf - mean * mean).max(0.0);
            store.data_mut(self.mean)[c] = mean;
            store.data_mut(self.std)[c] = var.sqrt().max(1e-8);
        }
        Ok(())
    }
}

// ── Semantic encode ─────────────────────────────────────────────────────────

pub struct SemanticEncodeResult {
    pub tokens: Vec<u32>,
    pub fallback: Vec<bool>,
    /// (H x T_codec): ResNet-decoded quantized feature.
    pub rvq1_feat: TensorId,
    /// (H x T_codec): pooled extractor feature, the distillation target.
    pub ssl_target: TensorId,
    pub codebook_loss: TensorId,
    pub commitment_loss: TensorId,
    /// (D x T_codec): projected encoder output, for usage bookkeeping.
    pub rvq1_z_proj: TensorId,
}

/// Pool the 50 Hz feature down to the codec rate, encode, quantize, decode.
/// `factor` is 2 for the 25 Hz variant and 4 for 12.5 Hz.
pub fn semantic_encode(
    g: &mut Graph,
    store: &ParamStore,
    ssl_feat: &FeatureMap,
    factor: usize,
    enc: &ResNetStack,
    cb: &ProjectedCodebook,
    dec: &ResNetStack,
) -> Result<SemanticEncodeResult> {
    if factor != 2 && factor != 4 {
        return Err(CodecError::config(format!(
            "downsample factor must be 2 (25 Hz) or 4 (12.5 Hz), got {factor}"
        )));
    }
    if ssl_feat.frames < factor {
        return Err(CodecError::config(format!(
            "feature too short to pool: {} frames, factor {factor}",
            ssl_feat.frames
        )));
    }
    let raw = g.tape.constant(ssl_feat.data.clone(), &[ssl_feat.dim, ssl_feat.frames]);
    let ssl_target = g.tape.avg_pool1d(raw, factor);
    let z_ssl = enc.forward(g, store, ssl_target);
    let q = encode_on_tape(g, store, cb, z_ssl);
    let rvq1_feat = dec.forward(g, store, q.quantized);
    Ok(SemanticEncodeResult {
        tokens: q.indices,
        fallback: q.fallback,
        rvq1_feat,
        ssl_target,
        codebook_loss: q.codebook_loss,
        commitment_loss: q.commitment_loss,
        rvq1_z_proj: q.z_proj,
    })
}

// ── Feature file format ─────────────────────────────────────────────────────

const FEATURE_MAGIC: &[u8; 4] = b"DCF1";
const FEATURE_VERSION: u32 = 1;

/// Header: magic, u32 version, u32 dim, u32 frame rate in milli-Hz,
/// u64 frame count; payload row-major f32 little-endian.
pub fn store_feature_file(path: &Path, f: &FeatureMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    bytes::write_u32(&mut w, FEATURE_VERSION)?;
    bytes::write_u32(&mut w, f.dim as u32)?;
    bytes::write_u32(&mut w, (f.frame_rate * 1000.0).round() as u32)?;
    bytes::write_u64(&mut w, f.frames as u64)?;
    for &v in &f.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_feature_file(path: &Path) -> Result<FeatureMap> {
    let mut r = BufReader::new(File::open(path)?);
    bytes::expect_magic(&mut r, FEATURE_MAGIC)?;
    let version = bytes::read_u32(&mut r, "version")?;
    if version != FEATURE_VERSION {
        return Err(CodecError::format(format!(
            "unsupported feature file version {version}, expected {FEATURE_VERSION}"
        )));
    }
    let dim = bytes::read_u32(&mut r, "dim")? as usize;
    if dim == 0 {
        return Err(CodecError::format("feature file declares zero dimensions"));
    }
    let milli_hz = bytes::read_u32(&mut r, "frame rate")?;
    if milli_hz == 0 {
        return Err(CodecError::format("feature file declares a zero frame rate"));
    }
    let frames = bytes::read_u64(&mut r, "frame count")? as usize;
    let expected = dim * frames * 4;
    let mut payload = vec![0u8; expected];
    r.read_exact(&mut payload).map_err(|_| {
        let got = payload.len();
        CodecError::format(format!(
            "truncated feature payload: expected {expected} bytes for {dim} x {frames}, file ended early (read under {got})"
        ))
    })?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(FeatureMap::new(data, dim, frames, milli_hz as f64 / 1000.0))
}
