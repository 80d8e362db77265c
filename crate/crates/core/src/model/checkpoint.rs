//! Binary weight files.
//!
//! Layout, little-endian: magic `OARCKPT1`, version `u32`, config block
//! (grid rows, grid cols, vocab, cond_vocab, cond_len, dim, depth, heads,
//! head_dim as `u32`; dropout and image-loss weight as `f64`), parameter
//! count `u32`, then per parameter its rank `u32`, dims `u32` each and the
//! values as `f64`. A trailing `u8` flags whether trainer state follows.

use std::path::Path;

use super::{ModelConfig, TransformerWeights};
use crate::bytes::{Reader, Writer};
use crate::error::{Error, Result};
use crate::grid::GridShape;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"OARCKPT1";
const VERSION: u32 = 1;

pub(crate) fn write_config(w: &mut Writer, c: &ModelConfig) {
    for v in [
        c.grid.rows,
        c.grid.cols,
        c.vocab,
        c.cond_vocab,
        c.cond_len,
        c.dim,
        c.depth,
        c.heads,
        c.head_dim,
    ] {
        w.usize32(v);
    }
    w.f64(c.dropout);
    w.f64(c.img_loss_weight);
}

pub(crate) fn read_config(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let at = r.offset();
    let mut u = [0usize; 9];
    for v in &mut u {
        *v = r.usize32()?;
    }
    let config = ModelConfig {
        grid: GridShape { rows: u[0], cols: u[1] },
        vocab: u[2],
        cond_vocab: u[3],
        cond_len: u[4],
        dim: u[5],
        depth: u[6],
        heads: u[7],
        head_dim: u[8],
        dropout: r.f64()?,
        img_loss_weight: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| Error::format(at, format!("invalid config block: {e}")))?;
    Ok(config)
}

pub(crate) fn write_weights_to(w: &mut Writer, weights: &TransformerWeights) {
    w.bytes(CKPT_MAGIC);
    w.u32(VERSION);
    write_config(w, &weights.config);
    w.usize32(weights.params.len());
    for p in &weights.params {
        w.usize32(p.shape().len());
        for &d in p.shape() {
            w.usize32(d);
        }
        for &v in p.data() {
            w.f64(v);
        }
    }
}

pub(crate) fn read_weights_from(r: &mut Reader<'_>) -> Result<TransformerWeights> {
    r.expect_magic(CKPT_MAGIC)?;
    let at = r.offset();
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let config = read_config(r)?;
    let specs = config.param_specs();
    let at = r.offset();
    let count = r.usize32()?;
    if count != specs.len() {
        return Err(Error::format(
            at,
            format!("expected {} parameters, found {count}", specs.len()),
        ));
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape) in specs {
        let at = r.offset();
        let rank = r.usize32()?;
        let dims = (0..rank).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(Error::format(
                at,
                format!("parameter {name}: expected shape {shape:?}, found {dims:?}"),
            ));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.push(Tensor::new(dims, data)?);
    }
    Ok(TransformerWeights { config, params })
}

/// Serializes weights without trainer state.
pub fn write_weights(weights: &TransformerWeights) -> Vec<u8> {
    let mut w = Writer::default();
    write_weights_to(&mut w, weights);
    w.u8(0);
    w.buf
}

/// Parses weights from the start of `bytes`, ignoring any trainer state.
pub fn read_weights(bytes: &[u8]) -> Result<TransformerWeights> {
    read_weights_from(&mut Reader::new(bytes))
}

pub fn save_weights(path: impl AsRef<Path>, weights: &TransformerWeights) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_weights(weights)).map_err(|e| Error::io(path, e))
}

/// Loads weights; when `expected` is given, a checkpoint built for a
/// different configuration is rejected.
pub fn load_weights(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<TransformerWeights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let w = read_weights(&bytes)?;
    if let Some(c) = expected {
        if *c != w.config {
            return Err(Error::Validation(format!(
                "{}: checkpoint config {:?} does not match {:?}",
                path.display(),
                w.config,
                c
            )));
        }
    }
    Ok(w)
}
