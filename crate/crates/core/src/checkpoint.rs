//! Model checkpoint files.
//!
//! A checkpoint is a flat container: a header with the format magic and the
//! config hash, the config text itself, the parameter tensors path-sorted
//! as little-endian f32 arrays, and a whole-file SHA-256 trailer. Loading
//! re-validates everything: trailer, config hash, config contents, and the
//! parameter set against the architecture the config demands.
//!
//! Parameters are stored in f32; fresh initializations are drawn on the f32
//! grid, so save/load of an untrained or just-loaded model is bit-exact.
//! Trained f64 parameters are rounded to the nearest f32 on save, which is
//! the precision contract for everything downstream of training.

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

/// File format identifier; also the magic bytes at the start of every file.
pub const FORMAT_ID: &str = "TSCKPT01";

const MAGIC: &[u8; 8] = b"TSCKPT01";
const HASH_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn sha256(bytes: &[u8]) -> [u8; HASH_LEN] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

fn encode(cfg: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    params.check_complete(cfg)?;
    let config_text = cfg.to_toml();
    encode_raw(&config_text, &sha256(config_text.as_bytes()), params)
}

/// Body writer, split out so tests can produce tampered files.
fn encode_raw(
    config_text: &str,
    config_hash: &[u8; HASH_LEN],
    params: &ModelParams,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(config_hash);
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (path, t) in params.iter() {
        if path.len() > u16::MAX as usize {
            return Err(CheckpointError::Format(format!(
                "parameter path too long: '{path}'"
            )));
        }
        out.extend_from_slice(&(path.len() as u16).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        if t.shape().len() > u8::MAX as usize {
            return Err(CheckpointError::Format(format!(
                "parameter '{path}' rank {} exceeds the format limit",
                t.shape().len()
            )));
        }
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let trailer = sha256(&out);
    out.extend_from_slice(&trailer);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Format(format!(
                "truncated while reading {what}"
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    if bytes.len() < MAGIC.len() + 2 * HASH_LEN {
        return Err(CheckpointError::Format("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - HASH_LEN);
    if sha256(body) != *trailer {
        return Err(CheckpointError::Integrity(
            "file hash trailer does not match contents".into(),
        ));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(CheckpointError::Format(
            "not a model checkpoint (bad magic)".into(),
        ));
    }
    let stored_hash: [u8; HASH_LEN] = r.take(HASH_LEN, "config hash")?.try_into().unwrap();
    let cfg_len = r.u32("config length")? as usize;
    let cfg_bytes = r.take(cfg_len, "config text")?;
    if sha256(cfg_bytes) != stored_hash {
        return Err(CheckpointError::Integrity(
            "config hash does not match embedded config".into(),
        ));
    }
    let cfg_text = std::str::from_utf8(cfg_bytes)
        .map_err(|e| CheckpointError::Format(format!("config text not utf-8: {e}")))?;
    let cfg = ModelConfig::from_toml(cfg_text)?;

    let n_params = r.u32("parameter count")? as usize;
    let mut params = ModelParams::default();
    for _ in 0..n_params {
        let plen = r.u16("path length")? as usize;
        let path = std::str::from_utf8(r.take(plen, "path")?)
            .map_err(|e| CheckpointError::Format(format!("path not utf-8: {e}")))?
            .to_string();
        let ndim = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Format(format!("parameter '{path}': {e}")))?;
        params.insert(path, t);
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing bytes after parameters",
            body.len() - r.pos
        )));
    }
    params.check_complete(&cfg)?;
    Ok((cfg, params))
}

/// Writes a checkpoint; parameters are rounded to f32 on the way out.
pub fn save(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    std::fs::write(path, encode(cfg, params)?)?;
    Ok(())
}

/// Loads and fully validates a checkpoint.
pub fn load(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// SHA-256 of a checkpoint file, hex-encoded; evaluation reports record it.
pub fn file_hash_hex(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(HASH_LEN * 2);
    use std::fmt::Write;
    for b in digest {
        write!(s, "{b:02x}").expect("write to string");
    }
    Ok(s)
}

/// Rounds every parameter to the f32 grid, the precision a save/load cycle
/// imposes. Training uses it to keep "checkpoint we wrote" and "params we
/// keep evaluating with" identical.
pub fn quantize(params: &ModelParams) -> ModelParams {
    let mut out = ModelParams::default();
    for (path, t) in params.iter() {
        let data: Vec<f64> = t.data().iter().map(|&v| v as f32 as f64).collect();
        out.insert(
            path.clone(),
            Tensor::new(t.shape().to_vec(), data).expect("shape unchanged"),
        );
    }
    out
}
