//! Bit-exact token serialization and bitrate accounting. Tokens pack
//! MSB-first in layer-major order, ceil(log2 K) bits each; the header carries
//! the frame rate in milli-Hz so fractional rates survive integer encoding.

use crate::error::{CodecError, Result};
use crate::quant::TokenMatrix;

const STREAM_MAGIC: &[u8; 4] = b"DCS1";
const STREAM_VERSION: u8 = 1;

// ── Rate accounting ─────────────────────────────────────────────────────────

pub fn bits_per_code(k: u32) -> Result<u32> {
    if k < 2 {
        return Err(CodecError::config(format!("codebook size {k} cannot be coded, need K >= 2")));
    }
    Ok((k as f64).log2().ceil() as u32)
}

/// frame_rate x sum of ceil(log2 K) over layers, in bits per second.
pub fn bitrate_bps(frame_rate: f64, layer_sizes: &[u32]) -> Result<f64> {
    let mut bits = 0u32;
    for &k in layer_sizes {
        bits += bits_per_code(k)?;
    }
    Ok(frame_rate * bits as f64)
}

pub fn tokens_per_second(frame_rate: f64, n_layers: usize) -> f64 {
    assert!(n_layers >= 1, "token rate needs at least one layer");
    frame_rate * n_layers as f64
}

/// Bitrate in kbps rounded to two decimals, half away from zero (925 bps
/// prints as 0.93).
pub fn kbps_rounded(bps: f64) -> f64 {
    (bps / 10.0).round() / 100.0
}

// ── Bit-level packing ───────────────────────────────────────────────────────

struct BitWriter {
    bytes: Vec<u8>,
    bit: u8,
}

impl BitWriter {
    fn new(bytes: Vec<u8>) -> BitWriter {
        BitWriter { bytes, bit: 0 }
    }

    fn push(&mut self, value: u32, width: u32) {
        for i in (0..width).rev() {
            if self.bit == 0 {
                self.bytes.push(0);
            }
            let b = (value >> i) & 1;
            let last = self.bytes.len() - 1;
            self.bytes[last] |= (b as u8) << (7 - self.bit);
            self.bit = (self.bit + 1) % 8;
        }
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> BitReader<'a> {
        BitReader { bytes, pos: 0 }
    }

    fn pull(&mut self, width: u32) -> Option<u32> {
        let mut v = 0u32;
        for _ in 0..width {
            let byte = self.bytes.get(self.pos / 8)?;
            let bit = (byte >> (7 - (self.pos % 8) as u8)) & 1;
            v = (v << 1) | bit as u32;
            self.pos += 1;
        }
        Some(v)
    }
}

// ── Container ───────────────────────────────────────────────────────────────

/// Header: magic, u8 version, u32 frame rate in milli-Hz, u8 layer count,
/// u32 codebook size per layer, u32 frame count; then the packed payload.
pub fn serialize(tokens: &TokenMatrix) -> Result<Vec<u8>> {
    tokens.validate()?;
    if tokens.codes.is_empty() {
        return Err(CodecError::format("cannot serialize an empty token matrix"));
    }
    if tokens.n_layers() > u8::MAX as usize {
        return Err(CodecError::format(format!("too many layers: {}", tokens.n_layers())));
    }
    let milli_hz = (tokens.frame_rate * 1000.0).round();
    if !(1.0..=u32::MAX as f64).contains(&milli_hz) {
        return Err(CodecError::format(format!(
            "frame rate {} Hz does not fit the milli-Hz header field",
            tokens.frame_rate
        )));
    }

    let mut head = Vec::new();
    head.extend_from_slice(STREAM_MAGIC);
    head.push(STREAM_VERSION);
    head.extend_from_slice(&(milli_hz as u32).to_le_bytes());
    head.push(tokens.n_layers() as u8);
    for &k in &tokens.layer_sizes {
        bits_per_code(k).map_err(|_| {
            CodecError::format(format!("layer size {k} too small to serialize"))
        })?;
        head.extend_from_slice(&k.to_le_bytes());
    }
    head.extend_from_slice(&(tokens.frames() as u32).to_le_bytes());

    let mut w = BitWriter::new(head);
    for (row, &k) in tokens.codes.iter().zip(&tokens.layer_sizes) {
        let width = bits_per_code(k)?;
        for &code in row {
            w.push(code, width);
        }
    }
    Ok(w.finish())
}

pub fn deserialize(bytes: &[u8]) -> Result<TokenMatrix> {
    let mut r = std::io::Cursor::new(bytes);
    crate::bytes::expect_magic(&mut r, STREAM_MAGIC)?;
    let version = crate::bytes::read_u8(&mut r, "version")?;
    if version != STREAM_VERSION {
        return Err(CodecError::format(format!(
            "unsupported token stream version {version}, expected {STREAM_VERSION}"
        )));
    }
    let milli_hz = crate::bytes::read_u32(&mut r, "frame rate")?;
    if milli_hz == 0 {
        return Err(CodecError::format("token stream declares a zero frame rate"));
    }
    let n_layers = crate::bytes::read_u8(&mut r, "layer count")? as usize;
    if n_layers == 0 {
        return Err(CodecError::format("token stream declares zero layers"));
    }
    let mut layer_sizes = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let k = crate::bytes::read_u32(&mut r, "codebook size")?;
        if k < 2 {
            return Err(CodecError::format(format!("layer {l} declares codebook size {k}, need >= 2")));
        }
        layer_sizes.push(k);
    }
    let frames = crate::bytes::read_u32(&mut r, "frame count")? as usize;

    let payload_off = r.position() as usize;
    let payload = &bytes[payload_off..];
    let mut br = BitReader::new(payload);
    let mut codes = Vec::with_capacity(n_layers);
    for (l, &k) in layer_sizes.iter().enumerate() {
        let width = bits_per_code(k)?;
        let mut row = Vec::with_capacity(frames);
        for t in 0..frames {
            let c = br.pull(width).ok_or_else(|| {
                CodecError::format(format!(
                    "truncated payload at layer {l}, frame {t} (byte offset {})",
                    payload_off + br.pos / 8
                ))
            })?;
            if c >= k {
                return Err(CodecError::format(format!(
                    "token {c} at layer {l}, frame {t} exceeds codebook size {k} (byte offset {})",
                    payload_off + (br.pos - width as usize) / 8
                )));
            }
            row.push(c);
        }
        codes.push(row);
    }
    Ok(TokenMatrix { codes, layer_sizes, frame_rate: milli_hz as f64 / 1000.0 })
}
