//! Binary checkpoint for [`ModelParams`].
//!
//! Layout, all little-endian:
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 8     | magic `b"DPDMLP\0\0"`                     |
//! | 4     | format version (`u32`, currently 1)       |
//! | 12    | `D`, `H`, `K` as `u32`                    |
//! | ...   | `f64` blocks: hidden weights (D x H, row-major), hidden bias (H), output weights (H x K, row-major), output bias (K) |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const MAGIC: &[u8; 8] = b"DPDMLP\0\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 12;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let (d, h, k) = params.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [d, h, k] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for layer in params.layers() {
        for v in layer {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<ModelParams> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(origin, "checkpoint shorter than its header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format(origin, "not a checkpoint (bad magic)"));
    }
    let version = u32_at(bytes, 8);
    if version != VERSION {
        return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
    }
    let (d, h, k) = (
        u32_at(bytes, 12) as usize,
        u32_at(bytes, 16) as usize,
        u32_at(bytes, 20) as usize,
    );
    let sizes = [d * h, h, h * k, k];
    let expected = HEADER_LEN + 8 * sizes.iter().sum::<usize>();
    if bytes.len() != expected {
        return Err(Error::format(
            origin,
            format!("checkpoint has {} bytes, dims {d}x{h}x{k} need {expected}", bytes.len()),
        ));
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut block = |n: usize| values.by_ref().take(n).collect::<Vec<f64>>();
    let (w1, b1, w2, b2) = (block(sizes[0]), block(sizes[1]), block(sizes[2]), block(sizes[3]));
    ModelParams::from_parts(d, h, k, w1, b1, w2, b2)
        .map_err(|e| Error::format(origin, format!("invalid parameters: {e}")))
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
