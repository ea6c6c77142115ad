//! Binary checkpoint container: config, stage tag, and all named tensors.
//! Writes are atomic (temp file in the target directory, then rename).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"STRD";
const VERSION: u32 = 1;

pub fn save_checkpoint(
    path: &Path,
    stage: u8,
    config: &TrainConfig,
    store: &ParamStore,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(stage);
    let cfg = serde_json::to_vec(config)
        .map_err(|e| Error::runtime(format!("config serialization failed: {e}")))?;
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg);
    let tensors: Vec<_> = store.iter().collect();
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, param) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u64).to_le_bytes());
        buf.extend_from_slice(nb);
        let (r, c) = param.value.dim();
        buf.extend_from_slice(&(r as u64).to_le_bytes());
        buf.extend_from_slice(&(c as u64).to_le_bytes());
        buf.push(param.trainable as u8);
        for v in param.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(u8, TrainConfig, ParamStore)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut at = 0usize;
    let corrupt = |what: &str| {
        Error::validation(format!(
            "checkpoint {} is not readable: {what}",
            path.display()
        ))
    };
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(corrupt("truncated"));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let take_u64 = |at: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(at, 8)?.try_into().unwrap()))
    };
    if take(&mut at, 4)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let stage = take(&mut at, 1)?[0];
    let cfg_len = take_u64(&mut at)? as usize;
    let config: TrainConfig = serde_json::from_slice(take(&mut at, cfg_len)?)
        .map_err(|_| corrupt("bad embedded config"))?;
    let count = take_u64(&mut at)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = take_u64(&mut at)? as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|_| corrupt("bad tensor name"))?;
        let r = take_u64(&mut at)? as usize;
        let c = take_u64(&mut at)? as usize;
        let trainable = take(&mut at, 1)?[0] != 0;
        let data = take(&mut at, r * c * 8)?;
        let vals: Vec<f64> = data
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let value = Array2::from_shape_vec((r, c), vals).map_err(|_| corrupt("bad shape"))?;
        store.insert(&name, value, trainable);
    }
    if at != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((stage, config, store))
}
