//! Binary checkpoint serialization for named parameter tensors.
//!
//! Layout (little-endian): magic "DVCK", version u32, tensor count u32,
//! then per tensor: name length u16, UTF-8 name bytes, rank u8, one u32 per
//! dimension, raw f32 data. Entries are ordered lexicographically by name;
//! the reader enforces the ordering so a valid file has exactly one byte
//! representation for a given set of tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DVCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {got} (expected {VERSION})")]
    BadVersion { got: u32 },
    #[error("corrupt checkpoint: {detail}")]
    Corrupt { detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

/// Writes `tensors` to `path`, sorted lexicographically by name.
pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    let mut order: Vec<usize> = (0..tensors.len()).collect();
    order.sort_by(|&a, &b| tensors[a].0.cmp(&tensors[b].0));
    for pair in order.windows(2) {
        if tensors[pair[0]].0 == tensors[pair[1]].0 {
            return Err(CheckpointError::Corrupt {
                detail: format!("duplicate tensor name {:?}", tensors[pair[0]].0),
            });
        }
    }

    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let write = |w: &mut BufWriter<File>, bytes: &[u8]| w.write_all(bytes).map_err(io_err(path));
    write(&mut w, &MAGIC)?;
    write(&mut w, &VERSION.to_le_bytes())?;
    write(&mut w, &(tensors.len() as u32).to_le_bytes())?;
    for idx in order {
        let (name, tensor) = &tensors[idx];
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(CheckpointError::Corrupt { detail: format!("name too long: {name:?}") });
        }
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(CheckpointError::Corrupt { detail: format!("rank too large for {name:?}") });
        }
        write(&mut w, &(name_bytes.len() as u16).to_le_bytes())?;
        write(&mut w, name_bytes)?;
        write(&mut w, &[shape.len() as u8])?;
        for dim in &shape {
            write(&mut w, &(*dim as u32).to_le_bytes())?;
        }
        for v in tensor.to_vec() {
            write(&mut w, &v.to_le_bytes())?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// Reads a checkpoint back as plain (no-grad) tensors in file order.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let corrupt = |detail: &str| CheckpointError::Corrupt { detail: detail.into() };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err(path))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(CheckpointError::BadVersion { got: version });
    }
    r.read_exact(&mut u32buf).map_err(io_err(path))?;
    let count = u32::from_le_bytes(u32buf) as usize;

    let mut out = Vec::with_capacity(count);
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf).map_err(|_| corrupt("truncated name length"))?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| corrupt("truncated name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| corrupt("name is not UTF-8"))?;
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(corrupt(&format!("names not strictly sorted at {name:?}")));
            }
        }

        let mut rank_buf = [0u8; 1];
        r.read_exact(&mut rank_buf).map_err(|_| corrupt("truncated rank"))?;
        let mut shape = Vec::with_capacity(rank_buf[0] as usize);
        let mut len = 1usize;
        for _ in 0..rank_buf[0] {
            r.read_exact(&mut u32buf).map_err(|_| corrupt("truncated dims"))?;
            let dim = u32::from_le_bytes(u32buf) as usize;
            shape.push(dim);
            len = len
                .checked_mul(dim)
                .filter(|&n| n <= u32::MAX as usize)
                .ok_or_else(|| corrupt("tensor size overflows"))?;
        }
        let mut data = vec![0f32; len];
        for v in data.iter_mut() {
            r.read_exact(&mut u32buf).map_err(|_| corrupt("truncated tensor data"))?;
            *v = f32::from_le_bytes(u32buf);
        }
        out.push((name.clone(), Tensor::from_vec(data, &shape)));
        prev_name = Some(name);
    }
    let mut tail = [0u8; 1];
    match r.read(&mut tail).map_err(io_err(path))? {
        0 => Ok(out),
        _ => Err(corrupt("trailing bytes after last tensor")),
    }
}
