//! Deterministic synthetic speech-like corpus: harmonic tones with a slow
//! amplitude envelope and a noise floor. Good enough to exercise every part
//! of the pipeline without shipping audio data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::AudioBuffer;

/// Peak amplitude after normalization.
pub const CORPUS_PEAK: f64 = 0.7;

/// Generate `n_utts` harmonic utterances of `duration` seconds each.
/// The same (seed, n_utts, duration, sample_rate) always yields the same
/// corpus, sample for sample.
pub fn synth_corpus(seed: u64, n_utts: usize, duration: f64, sample_rate: u32) -> Vec<AudioBuffer> {
    assert!(duration >= 0.5, "utterances shorter than 0.5 s are not useful here");
    assert!(sample_rate > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (duration * sample_rate as f64).round() as usize;
    let noise_amp = 10f64.powf(-30.0 / 20.0);

    (0..n_utts)
        .map(|_| {
            let f0: f64 = rng.gen_range(80.0..400.0);
            let n_harmonics: usize = rng.gen_range(2..=5);
            let harmonics: Vec<(f64, f64, f64)> = (0..n_harmonics)
                .map(|h| {
                    let freq = f0 * (h + 1) as f64;
                    let amp = rng.gen_range(0.5..1.0) / (h + 1) as f64;
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    (freq, amp, phase)
                })
                .collect();

            let mut samples = Vec::with_capacity(len);
            for i in 0..len {
                let t = i as f64 / sample_rate as f64;
                let env = (std::f64::consts::PI * i as f64 / (len - 1) as f64).sin().sqrt();
                let mut v = 0.0;
                for &(freq, amp, phase) in &harmonics {
                    v += amp * (std::f64::consts::TAU * freq * t + phase).sin();
                }
                let noise = noise_amp * rng.gen_range(-1.0..1.0);
                samples.push(env * v + noise);
            }

            let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            if peak > 0.0 {
                let g = CORPUS_PEAK / peak;
                for v in &mut samples {
                    *v *= g;
                }
            }
            AudioBuffer::new(samples, sample_rate)
        })
        .collect()
}
