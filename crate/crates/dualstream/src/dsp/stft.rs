//! Short-time Fourier magnitude analysis as a framed matrix product against
//! precomputed Hann-windowed DFT bases. A matmul formulation keeps the
//! transform differentiable by construction and fast enough at these sizes;
//! FFT speed is unnecessary here.

use std::sync::Arc;

use crate::error::{CodecError, Result};
use crate::linalg;

/// Magnitude spectrogram: (bins x frames), `bins == n_fft/2 + 1`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub magnitudes: Vec<f64>,
    pub bins: usize,
    pub frames: usize,
    pub hop: usize,
    pub n_fft: usize,
}

/// Precomputed analysis plan for one (n_fft, hop) pair.
///
/// `basis` is a (2*bins x n_fft) row-major matrix whose first `bins` rows are
/// `hann[n] * cos(2 pi b n / n_fft)` and last `bins` rows are
/// `hann[n] * -sin(2 pi b n / n_fft)`, so `basis . frames` yields stacked
/// real/imaginary DFT parts.
#[derive(Debug)]
pub struct StftPlan {
    pub n_fft: usize,
    pub hop: usize,
    pub bins: usize,
    basis: Vec<f64>,
}

/// Full analysis output; `re_im` and `src_idx` are retained so a backward
/// pass can reuse them.
pub struct StftOutput {
    pub magnitudes: Vec<f64>,
    pub re_im: Vec<f64>,
    pub src_idx: Vec<u32>,
    pub frames: usize,
}

impl StftPlan {
    pub fn new(n_fft: usize, hop: usize) -> Arc<StftPlan> {
        assert!(
            n_fft.is_power_of_two() && (32..=4096).contains(&n_fft),
            "n_fft must be a power of two in [32, 4096], got {n_fft}"
        );
        assert!(hop > 0 && hop <= n_fft, "hop must be in (0, n_fft], got {hop}");
        let bins = n_fft / 2 + 1;
        let window: Vec<f64> = (0..n_fft)
            .map(|n| {
                let phase = 2.0 * std::f64::consts::PI * n as f64 / n_fft as f64;
                0.5 * (1.0 - phase.cos())
            })
            .collect();
        let mut basis = vec![0.0; 2 * bins * n_fft];
        for b in 0..bins {
            for n in 0..n_fft {
                let angle = 2.0 * std::f64::consts::PI * b as f64 * n as f64 / n_fft as f64;
                basis[b * n_fft + n] = window[n] * angle.cos();
                basis[(bins + b) * n_fft + n] = window[n] * -angle.sin();
            }
        }
        Arc::new(StftPlan { n_fft, hop, bins, basis })
    }

    pub(crate) fn basis(&self) -> &[f64] {
        &self.basis
    }

    /// Frame count after reflection center padding by n_fft/2 on both sides:
    /// floor(len/hop) + 1.
    pub fn frames_for_len(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Gather map from (frame, in-frame position) to source sample index,
    /// realizing reflection center padding. (n_fft x frames) row-major.
    pub fn frame_source_indices(&self, len: usize) -> Result<Vec<u32>> {
        if len == 0 {
            return Err(CodecError::format("empty audio"));
        }
        let half = self.n_fft / 2;
        if len < half + 1 {
            return Err(CodecError::format(format!(
                "audio of {len} samples is too short to reflect-pad by {half}"
            )));
        }
        let frames = self.frames_for_len(len);
        let mut idx = vec![0u32; self.n_fft * frames];
        for f in 0..frames {
            let start = f * self.hop;
            for n in 0..self.n_fft {
                let padded = start + n;
                let src = padded as isize - half as isize;
                let src = if src < 0 {
                    (-src) as usize
                } else if src as usize >= len {
                    2 * (len - 1) - src as usize
                } else {
                    src as usize
                };
                idx[n * frames + f] = src as u32;
            }
        }
        Ok(idx)
    }

    /// Windowed DFT of every frame: magnitudes plus the real/imaginary parts
    /// they came from.
    pub fn analyze(&self, x: &[f64]) -> Result<StftOutput> {
        let src_idx = self.frame_source_indices(x.len())?;
        let frames = self.frames_for_len(x.len());
        let mut framed = vec![0.0; self.n_fft * frames];
        for (dst, &src) in framed.iter_mut().zip(src_idx.iter()) {
            *dst = x[src as usize];
        }
        let mut re_im = vec![0.0; 2 * self.bins * frames];
        linalg::gemm(2 * self.bins, self.n_fft, frames, &self.basis, &framed, &mut re_im);
        let mut magnitudes = vec![0.0; self.bins * frames];
        let im_off = self.bins * frames;
        for i in 0..magnitudes.len() {
            magnitudes[i] = (re_im[i] * re_im[i] + re_im[im_off + i] * re_im[im_off + i]).sqrt();
        }
        Ok(StftOutput { magnitudes, re_im, src_idx, frames })
    }

    pub fn magnitudes(&self, x: &[f64]) -> Result<Spectrogram> {
        let out = self.analyze(x)?;
        Ok(Spectrogram {
            magnitudes: out.magnitudes,
            bins: self.bins,
            frames: out.frames,
            hop: self.hop,
            n_fft: self.n_fft,
        })
    }
}
