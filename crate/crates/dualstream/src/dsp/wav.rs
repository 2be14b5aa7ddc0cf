//! 16-bit PCM mono WAV reader/writer.
//!
//! Writing clamps to [-1, 1] and quantizes by `round(x * 32768)` clamped to
//! the i16 range; reading maps back as `v / 32768`. Round trips are exact to
//! within one quantization step (max abs error 1/32768, hit only at +1.0).

use std::fs;
use std::path::Path;

use super::AudioBuffer;
use crate::error::{CodecError, Result};

const SCALE: f64 = 32768.0;

pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let bytes = fs::read(path)?;
    parse_wav(&bytes).map_err(|msg| CodecError::format(format!("{}: {msg}", path.display())))
}

pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    fs::write(path, encode_wav(audio))?;
    Ok(())
}

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn parse_wav(b: &[u8]) -> std::result::Result<AudioBuffer, String> {
    if b.len() < 12 {
        return Err(format!("truncated header: {} bytes, need at least 12", b.len()));
    }
    if &b[0..4] != b"RIFF" || &b[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut off = 12;
    while off + 8 <= b.len() {
        let id = &b[off..off + 4];
        let size = u32_at(b, off + 4) as usize;
        let body_start = off + 8;
        if body_start + size > b.len() {
            return Err(format!(
                "chunk {:?} claims {size} bytes but only {} remain",
                String::from_utf8_lossy(id),
                b.len() - body_start
            ));
        }
        let body = &b[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(format!("fmt chunk too short: {size} bytes"));
                }
                fmt = Some((u16_at(body, 0), u16_at(body, 2), u32_at(body, 4), u16_at(body, 14)));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        off = body_start + size + (size & 1);
    }

    let (format_tag, channels, sample_rate, bits) =
        fmt.ok_or_else(|| "missing fmt chunk".to_string())?;
    if format_tag != 1 {
        return Err(format!("unsupported format tag {format_tag}, only PCM (1) is supported"));
    }
    if channels != 1 {
        return Err(format!("unsupported channel count {channels}, only mono is supported"));
    }
    if bits != 16 {
        return Err(format!("unsupported bit depth {bits}, only 16-bit is supported"));
    }
    let data = data.ok_or_else(|| "missing data chunk".to_string())?;
    if data.len() % 2 != 0 {
        return Err(format!("data chunk has odd length {}", data.len()));
    }

    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / SCALE)
        .collect();
    Ok(AudioBuffer { samples, sample_rate })
}

fn encode_wav(audio: &AudioBuffer) -> Vec<u8> {
    let n = audio.samples.len();
    let data_len = (n * 2) as u32;
    let sr = audio.sample_rate;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sr.to_le_bytes());
    out.extend_from_slice(&(sr * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &audio.samples {
        let clamped = s.clamp(-1.0, 1.0);
        let q = (clamped * SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}
