//! Binary parameter snapshots.
//!
//! Layout: `ACCL`, a little-endian `u32` format version, then one record per
//! parameter: name length (`u32`), UTF-8 name, rank (`u32`), extents (`u32`
//! each), values (`f64` each). All integers and reals are little-endian.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::nets::{NetConfig, ParamSet, UNetLite};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ACCL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint does not match the network: {0}")]
    Shape(String),
    #[error("invalid parameter record: {0}")]
    Record(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Serialized size of `params` in bytes.
pub fn encoded_len(params: &ParamSet) -> usize {
    8 + params
        .names()
        .iter()
        .zip(params.tensors())
        .map(|(n, t)| 4 + n.len() + 4 + 4 * t.shape().len() + 8 * t.numel())
        .sum::<usize>()
}

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(params));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses every record; names and tensors in file order.
pub fn decode(bytes: &[u8]) -> Result<(Vec<String>, Vec<Tensor>), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| CheckpointError::BadMagic(bytes.to_vec()))?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic.to_vec()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (mut names, mut tensors) = (Vec::new(), Vec::new());
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Record("name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated("values"))?, "values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, values)
            .map_err(|e| CheckpointError::Record(format!("{name}: {e}")))?;
        names.push(name);
        tensors.push(t);
    }
    Ok((names, tensors))
}

pub fn save(model: &UNetLite, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode(model.params())).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read(path: &Path) -> Result<(Vec<String>, Vec<Tensor>), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

/// Loads parameters into a fresh network built from `config`; nothing is
/// applied unless every name and shape matches.
pub fn restore(path: &Path, config: NetConfig) -> Result<UNetLite, CheckpointError> {
    let (names, tensors) = read(path)?;
    restore_params(config, &names, tensors)
}

pub fn restore_params(
    config: NetConfig,
    names: &[String],
    tensors: Vec<Tensor>,
) -> Result<UNetLite, CheckpointError> {
    let mut model = UNetLite::new(config).map_err(|e| CheckpointError::Shape(e.to_string()))?;
    model
        .params_mut()
        .replace(names, tensors)
        .map_err(CheckpointError::Shape)?;
    Ok(model)
}

/// Architecture implied by a checkpoint's parameter names and shapes.
pub fn infer_config(
    names: &[String],
    tensors: &[Tensor],
    image_side: usize,
) -> Result<NetConfig, CheckpointError> {
    let depth = names
        .iter()
        .filter(|n| n.starts_with("down") && n.ends_with(".weight"))
        .count();
    let base = names
        .iter()
        .position(|n| n == "enc0.weight")
        .map(|i| tensors[i].shape()[0])
        .ok_or_else(|| CheckpointError::Shape("missing enc0.weight".into()))?;
    Ok(NetConfig {
        unet_depth: depth,
        base_channels: base,
        image_side,
        ..NetConfig::default()
    })
}

/// Restores a generator without a config file, inferring depth and width.
pub fn restore_inferred(path: &Path, image_side: usize) -> Result<UNetLite, CheckpointError> {
    let (names, tensors) = read(path)?;
    let config = infer_config(&names, &tensors, image_side)?;
    restore_params(config, &names, tensors)
}
