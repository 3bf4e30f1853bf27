//! Binary checkpoint format.
//!
//! ```text
//! b"DPTK" | u32 version | u32 count
//! per tensor: u16 name_len | name (utf-8) | u8 rank | u32 dims[rank] | f32 data (LE)
//! ```
//! All integers little-endian. Buffers (batch-norm statistics) are stored
//! alongside trainable tensors.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

use super::{Tracker, TrackerConfig};

pub const MAGIC: &[u8; 4] = b"DPTK";
pub const VERSION: u32 = 1;

/// Serialize every tensor of `store` in registration order.
pub fn write_store(store: &ParamStore<f32>, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, e) in store.iter() {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {}", e.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        let shape = e.tensor.shape();
        w.write_all(&[u8::try_from(shape.len()).map_err(|_| Error::Checkpoint("rank above 255".into()))?])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * e.tensor.numel());
        for v in e.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

/// Named tensors in file order.
pub fn read_tensors(r: &mut impl Read) -> Result<Vec<(String, Tensor<f32>)>> {
    if &read_exact::<4>(r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a DPTK checkpoint".into()));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let rank = read_exact::<1>(r)?[0] as usize;
        let shape = (0..rank)
            .map(|_| read_exact::<4>(r).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = numel(&shape);
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw).map_err(|e| Error::Checkpoint(format!("truncated data for {name}: {e}")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// Overwrite the values of `store` from a checkpoint stream.
pub fn read_into(store: &mut ParamStore<f32>, r: &mut impl Read) -> Result<()> {
    let tensors = read_tensors(r)?;
    let mut loaded = ParamStore::new();
    for (name, t) in tensors {
        if loaded.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        loaded.add(name, t, crate::params::ParamKind::Buffer);
    }
    store.load_from(&loaded)
}

/// Path of the JSON config stored next to a checkpoint.
pub fn config_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

/// Write the checkpoint and its config sidecar.
pub fn save(path: &Path, model: &Tracker, store: &ParamStore<f32>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_store(store, &mut f)?;
    f.flush()?;
    std::fs::write(config_path(path), serde_json::to_string_pretty(&model.cfg)?)?;
    Ok(())
}

/// Rebuild the model from the sidecar config and load its weights.
pub fn load(path: &Path) -> Result<(Tracker, ParamStore<f32>)> {
    let cfg: TrackerConfig = serde_json::from_str(&std::fs::read_to_string(config_path(path))?)?;
    let (model, mut store) = Tracker::new::<f32>(&cfg)?;
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_into(&mut store, &mut f)?;
    Ok((model, store))
}
