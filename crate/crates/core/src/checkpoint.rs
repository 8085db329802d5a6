//! Checkpoint file format.
//!
//! Little-endian layout: magic `PM3C`, u16 version = 1, u32 config length and
//! the run config as UTF-8 `key = value` text, u32 tensor count, then every
//! parameter tensor in the fixed store order (projectors, identifiers,
//! `[mu]`/`[sigma]` tokens, registers, blocks, decoders, alpha, beta), each as
//! u32 rows, u32 cols, then rows * cols f64 values. Round-trips bit-exactly.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::Cursor;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PM3C";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn to_bytes(params: &ModelParams, cfg: &RunConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.write_u16::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    let text = cfg.to_text();
    out.write_u32::<LittleEndian>(text.len() as u32).unwrap();
    out.extend_from_slice(text.as_bytes());
    out.write_u32::<LittleEndian>(params.tensor_count() as u32)
        .unwrap();
    for (_, t) in params.tensors() {
        out.write_u32::<LittleEndian>(t.rows as u32).unwrap();
        out.write_u32::<LittleEndian>(t.cols as u32).unwrap();
        for &v in &t.data {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(RunConfig, ModelParams)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 4,
            actual: bytes.len() as u64,
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let mut cur = Cursor::new(&bytes[4..]);
    let short = |_| Error::Truncated {
        expected: bytes.len() as u64 + 1,
        actual: bytes.len() as u64,
    };
    let version = cur.read_u16::<LittleEndian>().map_err(short)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let cfg_len = cur.read_u32::<LittleEndian>().map_err(short)? as usize;
    let pos = cur.position() as usize;
    let cfg_bytes = bytes
        .get(4 + pos..4 + pos + cfg_len)
        .ok_or(Error::Truncated {
            expected: (4 + pos + cfg_len) as u64,
            actual: bytes.len() as u64,
        })?;
    let text = std::str::from_utf8(cfg_bytes)
        .map_err(|_| Error::Data("checkpoint config is not valid UTF-8".into()))?;
    let cfg = RunConfig::from_text(text)?;
    cur.set_position((pos + cfg_len) as u64);

    // Rebuild the parameter structure, then overwrite every value.
    let mut params = ModelParams::init(
        &cfg.model,
        cfg.loss.alpha_init,
        cfg.loss.beta_init,
        cfg.seed,
    )?;
    let count = cur.read_u32::<LittleEndian>().map_err(short)? as usize;
    if count != params.tensor_count() {
        return Err(Error::Data(format!(
            "checkpoint holds {count} tensors, model wants {}",
            params.tensor_count()
        )));
    }
    for i in 0..count {
        let rows = cur.read_u32::<LittleEndian>().map_err(short)? as usize;
        let cols = cur.read_u32::<LittleEndian>().map_err(short)? as usize;
        let t = params.tensor_mut(i);
        if rows != t.rows || cols != t.cols {
            return Err(Error::Data(format!(
                "tensor {i} has shape {rows}x{cols}, model wants {}x{}",
                t.rows, t.cols
            )));
        }
        for v in t.data.iter_mut() {
            *v = cur.read_f64::<LittleEndian>().map_err(short)?;
        }
    }
    Ok((cfg, params))
}

pub fn save(params: &ModelParams, cfg: &RunConfig, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params, cfg))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RunConfig, ModelParams)> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut small = RunConfig::default();
        small.set("modality_count", "3").unwrap();
        small.set("d_in", "8").unwrap();
        small.set("encoder_dim", "8").unwrap();
        let params = ModelParams::init(&small.model, -5.0, 5.0, 3).unwrap();
        let bytes = to_bytes(&params, &small);
        let (cfg2, params2) = from_bytes(&bytes).unwrap();
        assert_eq!(small, cfg2);
        assert_eq!(params.content_hash(), params2.content_hash());
        assert_eq!(to_bytes(&params2, &cfg2), bytes);
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut small = RunConfig::default();
        small.set("modality_count", "2").unwrap();
        small.set("d_in", "4").unwrap();
        small.set("encoder_dim", "4").unwrap();
        let params = ModelParams::init(&small.model, -5.0, 5.0, 3).unwrap();
        let mut bytes = to_bytes(&params, &small);
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }
}
