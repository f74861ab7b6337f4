//! Checkpoint format: `CALD` magic, format version, config as JSON text, a
//! kind tag, then named tensors as little-endian 32-bit floats with explicit
//! shape records. Parameters are f32-representable in memory, so a
//! write/read round-trip is bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Mat;
use crate::error::{Error, Result};

use super::{ModelConfig, ModelParameters, ParamKind};

const MAGIC: &[u8; 4] = b"CALD";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let kind_tag: u8 = match params.kind {
        ParamKind::Lm => 0,
        ParamKind::Seq2Seq => 1,
    };
    w.write_all(&[kind_tag]).map_err(io_err)?;

    let config_json = serde_json::to_vec(&params.config)?;
    w.write_all(&(config_json.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&config_json).map_err(io_err)?;

    let tensors: Vec<_> = params.tensors().collect();
    w.write_all(&(tensors.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        w.write_all(&(tensor.nrows() as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&(tensor.ncols() as u32).to_le_bytes())
            .map_err(io_err)?;
        for &value in tensor.iter() {
            w.write_all(&(value as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    if read_u32(&mut r, path)? != VERSION {
        return Err(bad("unsupported format version"));
    }
    let mut kind_tag = [0u8; 1];
    read_exact(&mut r, &mut kind_tag, path)?;
    let kind = match kind_tag[0] {
        0 => ParamKind::Lm,
        1 => ParamKind::Seq2Seq,
        _ => return Err(bad("unknown kind tag")),
    };

    let config_len = read_u32(&mut r, path)? as usize;
    let mut config_json = vec![0u8; config_len];
    read_exact(&mut r, &mut config_json, path)?;
    let config: ModelConfig = serde_json::from_slice(&config_json)?;

    let count = read_u32(&mut r, path)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, path)?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("tensor name is not utf-8"))?;
        let rows = read_u32(&mut r, path)? as usize;
        let cols = read_u32(&mut r, path)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 4];
        for _ in 0..rows * cols {
            read_exact(&mut r, &mut buf, path)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        let mat = Mat::from_shape_vec((rows, cols), data)
            .map_err(|_| bad("tensor shape does not match payload"))?;
        if tensors.insert(name.clone(), mat).is_some() {
            return Err(bad(&format!("duplicate tensor {name}")));
        }
    }
    ModelParameters::from_parts(kind, config, tensors)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}
