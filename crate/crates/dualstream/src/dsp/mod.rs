//! Audio containers and spectral transforms: WAV I/O, short-time Fourier
//! analysis against precomputed windowed DFT bases, and HTK-style mel
//! filterbanks.

pub mod mel;
pub mod stft;
pub mod wav;

/// Mono audio at a fixed sample rate, samples nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        AudioBuffer { samples, sample_rate }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copy with zeros appended so the length is a multiple of `m`.
    pub fn padded_to_multiple(&self, m: usize) -> AudioBuffer {
        assert!(m > 0);
        let len = self.samples.len();
        let target = len.div_ceil(m) * m;
        let mut samples = self.samples.clone();
        samples.resize(target, 0.0);
        AudioBuffer { samples, sample_rate: self.sample_rate }
    }
}

/// A (channels x frames) feature sequence with its frame rate. Row-major:
/// `data[c * frames + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Vec<f64>,
    pub dim: usize,
    pub frames: usize,
    pub frame_rate: f64,
}

impl FeatureMap {
    pub fn new(data: Vec<f64>, dim: usize, frames: usize, frame_rate: f64) -> Self {
        assert_eq!(data.len(), dim * frames, "feature payload does not match dim x frames");
        assert!(frame_rate > 0.0);
        FeatureMap { data, dim, frames, frame_rate }
    }

    pub fn at(&self, c: usize, t: usize) -> f64 {
        self.data[c * self.frames + t]
    }
}
