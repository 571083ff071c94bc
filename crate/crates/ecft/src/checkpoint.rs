//! Self-describing binary checkpoints: magic, format version, config
//! hash, step counter, named tensor entries, then the flat f64 data
//! (little-endian). Files are written atomically (temp + rename).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{EcftError, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"ECFT";
const VERSION: u32 = 1;

/// Stable hash of the model configuration; checkpoints refuse to load
/// under a different architecture.
pub fn config_hash(cfg: &ModelConfig) -> u64 {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, step: u64, store: &ParamStore) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_u32::<LittleEndian>(VERSION)?;
        f.write_u64::<LittleEndian>(config_hash(cfg))?;
        f.write_u64::<LittleEndian>(step)?;
        f.write_u32::<LittleEndian>(store.entries().len() as u32)?;
        for e in store.entries() {
            f.write_u32::<LittleEndian>(e.name.len() as u32)?;
            f.write_all(e.name.as_bytes())?;
            f.write_u64::<LittleEndian>(e.rows as u64)?;
            f.write_u64::<LittleEndian>(e.cols as u64)?;
        }
        for &v in &store.data {
            f.write_f64::<LittleEndian>(v)?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<(u64, ParamStore)> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(EcftError::CheckpointFormat("bad magic".into()));
    }
    let version = f.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(EcftError::CheckpointFormat(format!("unsupported version {version}")));
    }
    let hash = f.read_u64::<LittleEndian>()?;
    if hash != config_hash(cfg) {
        return Err(EcftError::CheckpointFormat("config hash mismatch".into()));
    }
    let step = f.read_u64::<LittleEndian>()?;
    let n_entries = f.read_u32::<LittleEndian>()? as usize;
    let mut store = ParamStore::new();
    let mut ids = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = f.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| EcftError::CheckpointFormat("non-utf8 entry name".into()))?;
        let rows = f.read_u64::<LittleEndian>()? as usize;
        let cols = f.read_u64::<LittleEndian>()? as usize;
        ids.push(store.add_const(&name, rows, cols, 0.0));
    }
    for id in ids {
        for v in store.view_mut(id).iter_mut() {
            *v = f.read_f64::<LittleEndian>()?;
        }
    }
    Ok((step, store))
}
