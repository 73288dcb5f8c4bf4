//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "S4RCKPT\0" | u32 version | u32 metadata length | metadata JSON
//! u32 entry count | per entry: name (u32 length + UTF-8), u8 kind
//!   (0 real, 1 complex), u8 trainable, u32 rank, u64 dims...
//! per entry, in manifest order: f64 values (complex: real plane, then
//!   imaginary plane)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ComplexTensor, Tensor, Value};
use crate::encoder::{ModelConfig, ModelParams, NamedParam};
use crate::error::{bail, Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"S4RCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: ModelParams<T>,
}

fn write_name<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, ckpt: &Checkpoint<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| Error::Data(format!("metadata: {e}")))?;
    w.write_u32::<LittleEndian>(meta.len() as u32)?;
    w.write_all(&meta)?;
    w.write_u32::<LittleEndian>(ckpt.params.entries.len() as u32)?;
    for p in &ckpt.params.entries {
        write_name(&mut w, &p.name)?;
        w.write_u8(matches!(p.value, Value::Complex(_)) as u8)?;
        w.write_u8(p.trainable as u8)?;
        let shape = p.value.shape();
        w.write_u32::<LittleEndian>(shape.len() as u32)?;
        for &s in shape {
            w.write_u64::<LittleEndian>(s as u64)?;
        }
    }
    for p in &ckpt.params.entries {
        for i in 0..p.value.real_len() {
            w.write_f64::<LittleEndian>(p.value.get_flat(i).to_f64_lossy())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Checkpoint<T>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        bail!(Data, "not a checkpoint file");
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        bail!(Data, "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})");
    }
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut meta = vec![0; len];
    r.read_exact(&mut meta)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta).map_err(|e| Error::Data(format!("metadata: {e}")))?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Data(format!("parameter name: {e}")))?;
        let complex = r.read_u8()? == 1;
        let trainable = r.read_u8()? == 1;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..rank).map(|_| r.read_u64::<LittleEndian>().map(|s| s as usize)).collect::<std::io::Result<Vec<_>>>()?;
        manifest.push((name, complex, trainable, shape));
    }
    let mut entries = Vec::with_capacity(count);
    for (name, complex, trainable, shape) in manifest {
        let numel: usize = shape.iter().product();
        let mut read = |n: usize| (0..n).map(|_| r.read_f64::<LittleEndian>().map(T::lit)).collect::<std::io::Result<Vec<T>>>();
        let value = if complex {
            let re = read(numel)?;
            let im = read(numel)?;
            Value::Complex(ComplexTensor::new(shape, re, im)?)
        } else {
            Value::Real(Tensor::new(shape, read(numel)?)?)
        };
        entries.push(NamedParam { name, value, trainable });
    }
    let params = ModelParams { entries };
    params.check_layout(&meta.model)?;
    Ok(Checkpoint { meta, params })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), ckpt)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
