//! Model checkpoints. A checkpoint stores the configuration as JSON plus
//! every parameter tensor (trainable or frozen) in full f64 precision, so a
//! save/load round trip is bitwise exact. Optimizer moments are not stored;
//! resumed training restarts Adam.
//!
//! Layout: magic "DCM1", u32 version, u32 config JSON length + bytes,
//! u32 parameter count, then per parameter: u32 name length + UTF-8 name,
//! u32 rank, u64 dims, u8 trainable flag, f64 little-endian data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::bytes;
use crate::error::{CodecError, Result};

use super::{Codec, CodecConfig};

const CHECKPOINT_MAGIC: &[u8; 4] = b"DCM1";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, codec: &Codec) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    bytes::write_u32(&mut w, CHECKPOINT_VERSION)?;

    let cfg = serde_json::to_vec(&codec.config)
        .map_err(|e| CodecError::format(format!("could not serialize config: {e}")))?;
    bytes::write_u32(&mut w, cfg.len() as u32)?;
    w.write_all(&cfg)?;

    let entries = codec.store.entries();
    bytes::write_u32(&mut w, entries.len() as u32)?;
    for e in entries {
        bytes::write_u32(&mut w, e.name.len() as u32)?;
        w.write_all(e.name.as_bytes())?;
        bytes::write_u32(&mut w, e.shape.len() as u32)?;
        for &d in &e.shape {
            bytes::write_u64(&mut w, d as u64)?;
        }
        bytes::write_u8(&mut w, e.trainable as u8)?;
        for &v in &e.data {
            bytes::write_f64(&mut w, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Codec> {
    let mut r = BufReader::new(File::open(path)?);
    bytes::expect_magic(&mut r, CHECKPOINT_MAGIC)?;
    let version = bytes::read_u32(&mut r, "checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CodecError::format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }

    let cfg_len = bytes::read_u32(&mut r, "config length")? as usize;
    if cfg_len > (1 << 20) {
        return Err(CodecError::format(format!("implausible config length {cfg_len}")));
    }
    let mut cfg_bytes = vec![0u8; cfg_len];
    bytes::read_field(&mut r, &mut cfg_bytes, "config JSON")?;
    let config: CodecConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| CodecError::format(format!("could not parse checkpoint config: {e}")))?;

    // Rebuild the architecture from the config, then overwrite every tensor.
    let mut codec = Codec::new(config, 0)?;

    let n_params = bytes::read_u32(&mut r, "parameter count")? as usize;
    if n_params != codec.store.len() {
        return Err(CodecError::format(format!(
            "checkpoint has {n_params} parameters, model built from its config has {}",
            codec.store.len()
        )));
    }
    let mut seen = vec![false; codec.store.len()];
    for _ in 0..n_params {
        let name_len = bytes::read_u32(&mut r, "parameter name length")? as usize;
        if name_len > (1 << 16) {
            return Err(CodecError::format(format!("implausible parameter name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        bytes::read_field(&mut r, &mut name_bytes, "parameter name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CodecError::format("parameter name is not UTF-8"))?;

        let rank = bytes::read_u32(&mut r, "parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(bytes::read_u64(&mut r, "parameter dim")? as usize);
        }
        let trainable = bytes::read_u8(&mut r, "trainable flag")? != 0;
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        for v in data.iter_mut() {
            *v = bytes::read_f64(&mut r, "parameter data")?;
        }

        let id = codec
            .store
            .find(&name)
            .ok_or_else(|| CodecError::format(format!("unknown parameter {name:?} in checkpoint")))?;
        if seen[id.0] {
            return Err(CodecError::format(format!("duplicate parameter {name:?} in checkpoint")));
        }
        seen[id.0] = true;
        if codec.store.shape(id) != shape.as_slice() {
            return Err(CodecError::format(format!(
                "parameter {name:?} has shape {:?} in checkpoint but {:?} in model",
                shape,
                codec.store.shape(id)
            )));
        }
        if codec.store.entries()[id.0].trainable != trainable {
            return Err(CodecError::format(format!(
                "parameter {name:?} trainable flag disagrees with the model"
            )));
        }
        codec.store.data_mut(id).copy_from_slice(&data);
    }

    // Any leftover bytes mean the file is not what the header claims.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(CodecError::format("trailing bytes after last parameter"));
    }
    Ok(codec)
}
