//! Binary checkpoint format:
//!
//! ```text
//! magic "NWMCKPT1" | version u32 | config_len u64 | canonical JSON
//! | count u64 | count x (name_len u32 | name | dtype u8 | rank u32 | dims u64.. | LE data)
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use super::config::ModelConfig;
use super::model::Model;
use crate::autodiff::{DType, Real, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::world::write_file_atomic;

pub const MAGIC: &[u8; 8] = b"NWMCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON with object keys sorted, so equal values serialize identically.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Map is ordered by key unless `preserve_order` is enabled.
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

pub fn encode_checkpoint<T: Serialize, E: Real>(config: &T, params: &ParamStore<E>) -> Result<Vec<u8>> {
    let json = canonical_json(config)?;
    let mut out = Vec::with_capacity(64 + json.len() + params.num_scalars() * E::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(E::DTYPE.code());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn take<const N: usize>(cur: &mut Cursor<&[u8]>, path: &Path) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    cur.read_exact(&mut buf).map_err(|_| Error::format(path, "truncated checkpoint"))?;
    Ok(buf)
}

fn take_vec(cur: &mut Cursor<&[u8]>, len: usize, path: &Path) -> Result<Vec<u8>> {
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if len > remaining {
        return Err(Error::format(path, "truncated checkpoint"));
    }
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf).map_err(|_| Error::format(path, "truncated checkpoint"))?;
    Ok(buf)
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn decode_checkpoint<T: DeserializeOwned, E: Real>(bytes: &[u8], path: &Path) -> Result<(T, ParamStore<E>)> {
    let mut cur = Cursor::new(bytes);
    if &take::<8>(&mut cur, path)? != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut cur, path)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let json_len = u64::from_le_bytes(take(&mut cur, path)?) as usize;
    let json = take_vec(&mut cur, json_len, path)?;
    let config: T = serde_json::from_slice(&json).map_err(|e| Error::format(path, format!("config: {e}")))?;
    let count = u64::from_le_bytes(take(&mut cur, path)?);
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut cur, path)?) as usize;
        let name = String::from_utf8(take_vec(&mut cur, name_len, path)?).map_err(|_| Error::format(path, "tensor name is not utf-8"))?;
        let [code] = take::<1>(&mut cur, path)?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::format(path, format!("unknown dtype {code}")))?;
        if dtype != E::DTYPE {
            return Err(Error::format(path, format!("{name}: stored as {dtype:?}, requested {:?}", E::DTYPE)));
        }
        let rank = u32::from_le_bytes(take(&mut cur, path)?) as usize;
        let shape = (0..rank).map(|_| Ok(u64::from_le_bytes(take(&mut cur, path)?) as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = take_vec(&mut cur, numel * dtype.size_of(), path)?;
        let data = raw.chunks_exact(dtype.size_of()).map(E::read_le).collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
        params.insert(name, tensor).map_err(|e| Error::format(path, e.to_string()))?;
    }
    if cur.position() as usize != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok((config, params))
}

pub fn save_checkpoint<T: Serialize, E: Real>(path: &Path, config: &T, params: &ParamStore<E>) -> Result<()> {
    write_file_atomic(path, &encode_checkpoint(config, params)?)
}

pub fn load_checkpoint<T: DeserializeOwned, E: Real>(path: &Path) -> Result<(T, ParamStore<E>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config, &self.params)
    }

    /// Loads weights and checks them against a fresh initialization's layout.
    pub fn load(path: &Path) -> Result<Self> {
        let (config, params): (ModelConfig, ParamStore<f32>) = load_checkpoint(path)?;
        Model::from_parts(config, params).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Wraps loaded weights, checking them against a fresh initialization's
    /// layout.
    pub fn from_parts(config: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        let layout = super::model::init_params::<f32, _>(&config, &mut crate::rng::from_seed(0))?;
        if layout.names() != params.names() || layout.iter().zip(params.iter()).any(|(a, b)| a.1.shape() != b.1.shape()) {
            return Err(Error::invalid("parameter layout does not match config"));
        }
        Ok(Model { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn byte_exact_round_trip() {
        let cfg = ModelConfig { depth: 1, dim: 16, heads: 2, height: 8, width: 8, ..Default::default() };
        let mut model = Model::new(cfg, &mut rng::from_seed(1)).unwrap();
        model.params.get_mut("final.proj.w").unwrap().data_mut()[3] = f32::MIN_POSITIVE;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back, model);
        let bytes = std::fs::read(&path).unwrap();
        back.save(&dir.path().join("again.ckpt")).unwrap();
        assert_eq!(std::fs::read(dir.path().join("again.ckpt")).unwrap(), bytes);
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let s = canonical_json(&serde_json::json!({"b": 1, "a": {"z": 0, "y": 2.5}})).unwrap();
        assert_eq!(s, r#"{"a":{"y":2.5,"z":0},"b":1}"#);
    }

    #[test]
    fn corrupt_files_rejected() {
        let cfg = ModelConfig { depth: 1, dim: 16, heads: 2, height: 8, width: 8, ..Default::default() };
        let model = Model::new(cfg, &mut rng::from_seed(1)).unwrap();
        let bytes = encode_checkpoint(&model.config, &model.params).unwrap();
        let p = Path::new("mem");
        assert!(decode_checkpoint::<ModelConfig, f32>(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint::<ModelConfig, f32>(&bad, p).is_err());
        assert!(decode_checkpoint::<ModelConfig, f64>(&bytes, p).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint::<ModelConfig, f32>(&extra, p).is_err());
    }
}
