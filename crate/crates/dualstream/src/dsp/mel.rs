//! HTK-style mel filterbanks: mel = 2595 * log10(1 + f/700), triangular
//! responses over FFT bin center frequencies, no area normalization.

use std::sync::Arc;

use super::stft::Spectrogram;
use super::FeatureMap;
use crate::linalg;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Debug)]
pub struct MelFilterbank {
    /// (n_mels x bins), row-major.
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_fft: usize,
    pub bins: usize,
    pub sample_rate: u32,
    pub f_min: f64,
    pub f_max: f64,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Arc<Self> {
        assert!(n_mels >= 1);
        assert!(f_min >= 0.0 && f_max > f_min && f_max <= sample_rate as f64 / 2.0);
        let bins = n_fft / 2 + 1;
        let lo = hz_to_mel(f_min);
        let hi = hz_to_mel(f_max);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for b in 0..bins {
                let f = b as f64 * sample_rate as f64 / n_fft as f64;
                let up = (f - left) / (center - left).max(1e-12);
                let down = (right - f) / (right - center).max(1e-12);
                weights[m * bins + b] = up.min(down).max(0.0);
            }
        }
        Arc::new(MelFilterbank { weights, n_mels, n_fft, bins, sample_rate, f_min, f_max })
    }

    /// Mel energies: weights . magnitudes, (n_mels x frames).
    pub fn apply(&self, spec: &Spectrogram) -> Vec<f64> {
        assert_eq!(spec.n_fft, self.n_fft, "filterbank n_fft does not match spectrogram");
        let mut out = vec![0.0; self.n_mels * spec.frames];
        linalg::gemm(self.n_mels, self.bins, spec.frames, &self.weights, &spec.magnitudes, &mut out);
        out
    }
}

/// log(max(fb . magnitudes, floor)) with the frame rate implied by the hop.
pub fn log_mel(spec: &Spectrogram, fb: &MelFilterbank, floor: f64) -> FeatureMap {
    assert!(floor > 0.0, "log floor must be positive");
    let mut data = fb.apply(spec);
    for v in data.iter_mut() {
        *v = v.max(floor).ln();
    }
    let frame_rate = fb.sample_rate as f64 / spec.hop as f64;
    FeatureMap::new(data, fb.n_mels, spec.frames, frame_rate)
}
