//! `T4NN` checkpoints: magic, `u16` version, a fixed-order little-endian
//! config block, then every parameter tensor in declaration order as
//! little-endian `f64`.
//!
//! Config block: `in_channels`, `base_width`, `depth`, `head` (0 regression,
//! 1 heading), `horizon`, `tile_h`, `tile_w` as `u32`, then `seed` as `u64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{HeadKind, NetConfig, Network, Param, UNetModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"T4NN";
pub const CHECKPOINT_VERSION: u16 = 1;
const CONFIG_LEN: usize = 7 * 4 + 8;

pub fn write_checkpoint(model: &UNetModel) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(6 + CONFIG_LEN + 8 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let head = match c.head {
        HeadKind::Regression => 0u32,
        HeadKind::Heading => 1,
    };
    for v in [c.in_channels as u32, c.base_width as u32, c.depth as u32, head, c.horizon as u32, c.tile.0 as u32, c.tile.1 as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&model.seed().to_le_bytes());
    for p in model.params() {
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<UNetModel> {
    if bytes.len() < 6 + CONFIG_LEN {
        return Err(Error::Truncated {
            expected: 6 + CONFIG_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
    let head = match word(3) {
        0 => HeadKind::Regression,
        1 => HeadKind::Heading,
        other => return Err(Error::Format(format!("unknown head kind {other}"))),
    };
    let config = NetConfig {
        in_channels: word(0),
        base_width: word(1),
        depth: word(2),
        head,
        horizon: word(4),
        tile: (word(5), word(6)),
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let seed = u64::from_le_bytes(bytes[6 + 28..6 + CONFIG_LEN].try_into().unwrap());
    let template = UNetModel::new(config, seed)?;
    let expected = 6 + CONFIG_LEN + 8 * template.param_count();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - expected)));
    }
    let mut values = bytes[6 + CONFIG_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let params: Vec<Param> = template
        .params()
        .iter()
        .map(|p| Param {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: values.by_ref().take(p.data.len()).collect(),
        })
        .collect();
    if params.iter().flat_map(|p| &p.data).any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite parameter in checkpoint".into()));
    }
    UNetModel::from_parts(config, seed, params)
}

pub fn save_checkpoint(model: &UNetModel, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<UNetModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
