//! Binary model files: magic, format version, SHA-256 of the training
//! config, the config as JSON, every parameter tensor little-endian, then
//! the optional input normalization.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::skeleton::{InputNorm, SkeletonEncoder, SkeletonLayout};

const MAGIC: &[u8; 8] = b"SGNBRDG\0";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    layout: serde_json::Value,
}

pub fn write_model(mut w: impl Write, config: &TrainConfig, model: &SkeletonEncoder) -> Result<()> {
    let header = Header {
        config: config.clone(),
        layout: serde_json::from_str(&model.layout().to_json()?)?,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&config.hash()?)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(model.params().len() as u64).to_le_bytes())?;
    for p in model.params() {
        w.write_all(&(p.ndim() as u32).to_le_bytes())?;
        for &d in p.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    match model.input_norm() {
        None => w.write_all(&[0])?,
        Some(norm) => {
            w.write_all(&[1])?;
            for v in norm.mean.data().iter().chain(norm.inv_std.data()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

const MAX_HEADER: u64 = 1 << 24;
const MAX_ELEMENTS: u64 = 1 << 30;

pub fn read_model(mut r: impl Read) -> Result<(TrainConfig, SkeletonEncoder)> {
    if &read_array::<8>(&mut r)? != MAGIC {
        return Err(Error::Format("not a model file".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let hash: [u8; 32] = read_array(&mut r)?;
    let len = read_u64(&mut r)?;
    if len > MAX_HEADER {
        return Err(Error::Format(format!("header of {len} bytes is too large")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.config.hash()? != hash {
        return Err(Error::Format("config hash does not match the stored config".into()));
    }
    header.config.validate()?;
    let layout = SkeletonLayout::from_json_str(&header.layout.to_string())?;
    let count = read_u64(&mut r)?;
    let mut params = Vec::new();
    for _ in 0..count {
        let ndim = u32::from_le_bytes(read_array(&mut r)?);
        let shape: Vec<usize> = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<_>>()?;
        let n: u64 = shape.iter().map(|&d| d as u64).product();
        if n > MAX_ELEMENTS {
            return Err(Error::Format(format!("tensor of {n} elements is too large")));
        }
        let data: Vec<f64> = (0..n).map(|_| read_array(&mut r).map(f64::from_le_bytes)).collect::<Result<_>>()?;
        params.push(Tensor::new(shape, data)?);
    }
    let n = layout.joint_count();
    let c = header.config.encoder().in_channels;
    let model = SkeletonEncoder::from_params(header.config.encoder(), layout, params)?;
    let norm = match read_array::<1>(&mut r)?[0] {
        0 => None,
        1 => {
            let mut table = || -> Result<Tensor> {
                let data = (0..n * c).map(|_| read_array(&mut r).map(f64::from_le_bytes)).collect::<Result<_>>()?;
                Tensor::matrix(n, c, data)
            };
            let mean = table()?;
            Some(InputNorm { mean, inv_std: table()? })
        }
        b => return Err(Error::Format(format!("bad input normalization flag {b}"))),
    };
    let model = model.with_input_norm(norm)?;
    Ok((header.config, model))
}

pub fn save_model(path: &Path, config: &TrainConfig, model: &SkeletonEncoder) -> Result<()> {
    write_model(std::io::BufWriter::new(std::fs::File::create(path)?), config, model)
}

pub fn load_model(path: &Path) -> Result<(TrainConfig, SkeletonEncoder)> {
    read_model(std::io::BufReader::new(std::fs::File::open(path)?))
}
