//! Objective reconstruction metrics: mel-cepstral distortion, the multi-scale
//! log-mel distance (the training loss reused unweighted), scale-invariant
//! SNR, and amortized real-time-factor measurement.

use std::time::Instant;

use serde::Serialize;

use crate::dsp::mel::{log_mel, MelFilterbank};
use crate::dsp::stft::StftPlan;
use crate::dsp::AudioBuffer;
use crate::error::{CodecError, Result};

/// Mel band counts paired with the analysis sizes of the multi-scale loss;
/// hop is always n_fft/4.
pub const MEL_SCALES: [(usize, usize); 6] =
    [(64, 10), (128, 15), (256, 20), (512, 25), (1024, 30), (2048, 35)];

pub fn mel_bands_for_scale(n_fft: usize) -> Result<usize> {
    MEL_SCALES
        .iter()
        .find(|&&(s, _)| s == n_fft)
        .map(|&(_, m)| m)
        .ok_or_else(|| {
            CodecError::config(format!(
                "unsupported mel loss scale {n_fft}; known scales: {:?}",
                MEL_SCALES.map(|(s, _)| s)
            ))
        })
}

pub const MEL_LOG_FLOOR: f64 = 1e-5;

// ── Mel-cepstral distortion ─────────────────────────────────────────────────

const MCD_N_FFT: usize = 1024;
const MCD_HOP: usize = 256;
const MCD_BANDS: usize = 23;
const MCD_COEFFS: usize = 13;

/// Orthonormal DCT-II of one frame of log-mel values.
fn dct_ii(x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, &v) in x.iter().enumerate() {
            acc += v * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        *o = acc * scale;
    }
}

/// Mel cepstra (coefficients 1..=13, c0 dropped) per frame, flattened
/// frame-major.
fn mel_cepstra(audio: &AudioBuffer) -> Result<Vec<f64>> {
    let plan = StftPlan::new(MCD_N_FFT, MCD_HOP);
    let fb = MelFilterbank::new(MCD_BANDS, MCD_N_FFT, audio.sample_rate, 0.0, audio.sample_rate as f64 / 2.0);
    let spec = plan.magnitudes(&audio.samples).map_err(|e| {
        CodecError::config(format!("signal too short for cepstral analysis: {e}"))
    })?;
    let lm = log_mel(&spec, &fb, MEL_LOG_FLOOR);
    let mut frame = vec![0.0; MCD_BANDS];
    let mut coeffs = vec![0.0; MCD_BANDS];
    let mut out = Vec::with_capacity(lm.frames * MCD_COEFFS);
    for t in 0..lm.frames {
        for (c, f) in frame.iter_mut().enumerate() {
            *f = lm.at(c, t);
        }
        dct_ii(&frame, &mut coeffs);
        out.extend_from_slice(&coeffs[1..=MCD_COEFFS]);
    }
    Ok(out)
}

/// (10/ln10)·sqrt(2) times the per-frame cepstral distance, averaged.
pub(crate) fn mcd_from_cepstra(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    let frames = a.len() / MCD_COEFFS;
    let mut total = 0.0;
    for t in 0..frames {
        let sumsq: f64 = (0..MCD_COEFFS)
            .map(|c| {
                let d = a[t * MCD_COEFFS + c] - b[t * MCD_COEFFS + c];
                d * d
            })
            .sum();
        total += sumsq.sqrt();
    }
    (10.0 / std::f64::consts::LN_10) * std::f64::consts::SQRT_2 * total / frames as f64
}

/// Mel-cepstral distortion in dB, frame-aligned by index (no warping). Both
/// signals are truncated to the shorter length first.
pub fn mcd(reference: &AudioBuffer, degraded: &AudioBuffer) -> Result<f64> {
    if reference.sample_rate != degraded.sample_rate {
        return Err(CodecError::config(format!(
            "sample rates differ: {} vs {}",
            reference.sample_rate, degraded.sample_rate
        )));
    }
    let n = reference.samples.len().min(degraded.samples.len());
    if n == 0 {
        return Err(CodecError::config("empty signal"));
    }
    let r = AudioBuffer::new(reference.samples[..n].to_vec(), reference.sample_rate);
    let d = AudioBuffer::new(degraded.samples[..n].to_vec(), degraded.sample_rate);
    Ok(mcd_from_cepstra(&mel_cepstra(&r)?, &mel_cepstra(&d)?))
}

// ── Multi-scale mel distance ────────────────────────────────────────────────

/// Sum over scales of the mean |log-mel difference|: the training
/// reconstruction loss without its weight. `scales` are FFT sizes from
/// `MEL_SCALES`.
pub fn mel_distance(reference: &AudioBuffer, degraded: &AudioBuffer, scales: &[usize]) -> Result<f64> {
    if reference.sample_rate != degraded.sample_rate {
        return Err(CodecError::config(format!(
            "sample rates differ: {} vs {}",
            reference.sample_rate, degraded.sample_rate
        )));
    }
    if scales.is_empty() {
        return Err(CodecError::config("mel distance needs at least one scale"));
    }
    let n = reference.samples.len().min(degraded.samples.len());
    let r = &reference.samples[..n];
    let d = &degraded.samples[..n];
    let mut total = 0.0;
    for &n_fft in scales {
        let bands = mel_bands_for_scale(n_fft)?;
        let plan = StftPlan::new(n_fft, n_fft / 4);
        let fb = MelFilterbank::new(bands, n_fft, reference.sample_rate, 0.0, reference.sample_rate as f64 / 2.0);
        let lr = log_mel(&plan.magnitudes(r)?, &fb, MEL_LOG_FLOOR);
        let ld = log_mel(&plan.magnitudes(d)?, &fb, MEL_LOG_FLOOR);
        let l1: f64 =
            lr.data.iter().zip(&ld.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / lr.data.len() as f64;
        total += l1;
    }
    Ok(total)
}

// ── Scale-invariant SNR ─────────────────────────────────────────────────────

/// SI-SNR in dB: project the degraded signal onto the reference (both made
/// zero-mean), compare target and error energies. Capped at +100 dB so exact
/// reconstructions stay finite.
pub fn si_snr(reference: &AudioBuffer, degraded: &AudioBuffer) -> Result<f64> {
    let n = reference.samples.len().min(degraded.samples.len());
    if n == 0 {
        return Err(CodecError::config("empty signal"));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let rm = mean(&reference.samples[..n]);
    let dm = mean(&degraded.samples[..n]);
    let r: Vec<f64> = reference.samples[..n].iter().map(|v| v - rm).collect();
    let d: Vec<f64> = degraded.samples[..n].iter().map(|v| v - dm).collect();

    let r_energy: f64 = r.iter().map(|v| v * v).sum();
    // Relative floor: a constant signal leaves rounding dust after mean
    // removal, which must still count as zero energy.
    let raw_energy: f64 = reference.samples[..n].iter().map(|v| v * v).sum();
    if r_energy <= 1e-18 * raw_energy.max(1e-30) {
        return Err(CodecError::config("reference signal has zero energy"));
    }
    let dot: f64 = d.iter().zip(&r).map(|(a, b)| a * b).sum();
    let alpha = dot / r_energy;
    let target_energy = alpha * alpha * r_energy;
    let err_energy: f64 = d.iter().zip(&r).map(|(a, b)| (a - alpha * b) * (a - alpha * b)).sum();
    if err_energy == 0.0 || target_energy / err_energy > 1e10 {
        return Ok(100.0);
    }
    Ok((10.0 * (target_energy / err_energy).log10()).min(100.0))
}

// ── Real-time factor ────────────────────────────────────────────────────────

/// Total processing wall-clock time over total audio duration, batch size 1.
pub fn measure_rtf<F: FnMut(&AudioBuffer)>(mut f: F, corpus: &[AudioBuffer]) -> f64 {
    assert!(!corpus.is_empty(), "RTF needs at least one file");
    let total_audio: f64 = corpus.iter().map(AudioBuffer::duration_secs).sum();
    let start = Instant::now();
    for a in corpus {
        f(a);
    }
    start.elapsed().as_secs_f64() / total_audio
}

// ── Report ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub mcd: f64,
    pub mel_distance: f64,
    pub si_snr: f64,
    pub rtf_encode: f64,
    pub rtf_decode: f64,
    pub n_files: usize,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.mcd, self.mel_distance, self.si_snr, self.rtf_encode, self.rtf_decode];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::numeric("metric report contains a non-finite value"));
        }
        if self.rtf_encode < 0.0 || self.rtf_decode < 0.0 {
            return Err(CodecError::numeric("negative real-time factor"));
        }
        if self.n_files == 0 {
            return Err(CodecError::config("metric report over zero files"));
        }
        Ok(())
    }

    /// Stable key=value lines for terminal output.
    pub fn key_value_lines(&self) -> String {
        format!(
            "mcd={:.6}\nmel_distance={:.6}\nsi_snr={:.6}\nrtf_encode={:.6}\nrtf_decode={:.6}\nn_files={}\n",
            self.mcd, self.mel_distance, self.si_snr, self.rtf_encode, self.rtf_decode, self.n_files
        )
    }
}
