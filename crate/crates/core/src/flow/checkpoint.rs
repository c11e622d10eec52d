//! Model checkpoint file.
//!
//! ```text
//! magic      8 bytes  b"TDMCKPT\0"
//! version    u32      1
//! config     u32 × 10 grid_height grid_width token_dim blocks heads head_dim
//!                     mlp_hidden vocab time_features adapter_branches
//! injection  u32 count, then count × u32 block index
//! tensors    u32 count, then count × (u32 rows, u32 cols)
//! payload    every tensor in `Params::tensors` order, row-major f32
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::net::{ModelConfig, Params, VelocityNet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TDMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(net: &VelocityNet) -> Vec<u8> {
    let c = net.config();
    let mut out = Vec::with_capacity(net.params().count() * 4 + 256);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let put = |v: usize, out: &mut Vec<u8>| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(CHECKPOINT_VERSION as usize, &mut out);
    for v in [
        c.grid_height,
        c.grid_width,
        c.token_dim,
        c.blocks,
        c.heads,
        c.head_dim,
        c.mlp_hidden,
        c.vocab,
        c.time_features,
        c.adapter_branches,
    ] {
        put(v, &mut out);
    }
    put(c.injection_blocks.len(), &mut out);
    for &b in &c.injection_blocks {
        put(b, &mut out);
    }
    let tensors = net.params().tensors();
    put(tensors.len(), &mut out);
    for t in &tensors {
        put(t.nrows(), &mut out);
        put(t.ncols(), &mut out);
    }
    for t in &tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, net: &VelocityNet) -> Result<()> {
    fs::write(path, checkpoint_bytes(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<VelocityNet> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<VelocityNet> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut f = [0usize; 10];
    for v in f.iter_mut() {
        *v = r.u32()?;
    }
    let n_inj = r.u32()?;
    if n_inj > f[3] {
        return Err(Error::format("more injection blocks than blocks"));
    }
    let injection_blocks = (0..n_inj).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        grid_height: f[0],
        grid_width: f[1],
        token_dim: f[2],
        blocks: f[3],
        heads: f[4],
        head_dim: f[5],
        mlp_hidden: f[6],
        vocab: f[7],
        time_features: f[8],
        adapter_branches: f[9],
        injection_blocks,
    };
    config
        .validate()
        .map_err(|e| Error::format(format!("checkpoint config invalid: {e}")))?;
    let count = r.u32()?;
    let expected = Params::shapes(&config);
    if count != expected.len() {
        return Err(Error::format(format!(
            "checkpoint lists {count} tensors, config implies {}",
            expected.len()
        )));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        shapes.push((r.u32()?, r.u32()?));
    }
    if shapes != expected {
        return Err(Error::format(
            "checkpoint tensor shapes disagree with its config",
        ));
    }
    let mut tensors = Vec::with_capacity(count);
    for &(rows, cols) in &shapes {
        let values = r.f32s(rows * cols)?;
        tensors.push(Array2::from_shape_vec((rows, cols), values).expect("length checked"));
    }
    r.finish()?;
    VelocityNet::from_params(config.clone(), Params::from_tensors(&config, tensors)?)
}
