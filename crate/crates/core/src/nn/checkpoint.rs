//! Binary checkpoint format (little-endian):
//!
//! ```text
//! magic "TOOTCKPT" | format u32 = 1
//! input_side u32 | grid_side u32 | n_blocks u32 | block channels u32 * n | head_channels u32 | leaky_slope f64
//! version u64 | n_tensors u32
//! per tensor: len u64, params f64 * len, E[g^2] f64 * len, E[dx^2] f64 * len
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::model::{tensor_lens, ModelState};
use super::ArchConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TOOTCKPT";
const FORMAT: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &ModelState, mut w: W) -> Result<()> {
    let arch = &model.arch;
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(FORMAT)?;
    w.write_u32::<LE>(arch.input_side as u32)?;
    w.write_u32::<LE>(arch.grid_side as u32)?;
    w.write_u32::<LE>(arch.block_channels.len() as u32)?;
    for c in &arch.block_channels {
        w.write_u32::<LE>(*c as u32)?;
    }
    w.write_u32::<LE>(arch.head_channels as u32)?;
    w.write_f64::<LE>(arch.leaky_slope)?;
    w.write_u64::<LE>(model.version)?;
    w.write_u32::<LE>(model.params.len() as u32)?;
    for t in 0..model.params.len() {
        w.write_u64::<LE>(model.params[t].len() as u64)?;
        for buf in [&model.params[t], &model.grad_sq[t], &model.update_sq[t]] {
            for v in buf.iter() {
                w.write_f64::<LE>(*v)?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelState> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let format = r.read_u32::<LE>()?;
    if format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {format}")));
    }
    let input_side = r.read_u32::<LE>()? as usize;
    let grid_side = r.read_u32::<LE>()? as usize;
    let blocks = r.read_u32::<LE>()? as usize;
    if blocks > 16 {
        return Err(Error::Checkpoint(format!(
            "implausible block count {blocks}"
        )));
    }
    let block_channels = (0..blocks)
        .map(|_| r.read_u32::<LE>().map(|c| c as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    let arch = ArchConfig {
        input_side,
        grid_side,
        block_channels,
        head_channels: r.read_u32::<LE>()? as usize,
        leaky_slope: r.read_f64::<LE>()?,
    };
    arch.validate()?;
    let version = r.read_u64::<LE>()?;
    let expected = tensor_lens(&arch);
    let count = r.read_u32::<LE>()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    let mut grad_sq = Vec::with_capacity(count);
    let mut update_sq = Vec::with_capacity(count);
    for want in expected {
        let len = r.read_u64::<LE>()? as usize;
        if len != want {
            return Err(Error::Checkpoint(format!(
                "tensor length {len}, expected {want}"
            )));
        }
        for dst in [&mut params, &mut grad_sq, &mut update_sq] {
            let mut buf = vec![0.0; len];
            r.read_f64_into::<LE>(&mut buf)?;
            dst.push(buf);
        }
    }
    let model = ModelState {
        arch,
        params,
        grad_sq,
        update_sq,
        version,
    };
    if !model.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
