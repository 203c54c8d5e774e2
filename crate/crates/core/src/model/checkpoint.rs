//! `JMSC` checkpoint container: magic, version, JSON model config, an
//! optional optimizer step, then named little-endian f32 arrays.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::{Params, Tensor};
use super::{Model, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"JMSC";
const VERSION: u32 = 1;
const M_PREFIX: &str = "optimizer.m.";
const V_PREFIX: &str = "optimizer.v.";

/// First and second moment estimates plus the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Params<f32>,
    pub v: Params<f32>,
}

impl OptimizerState {
    pub fn new(params: &Params<f32>) -> Self {
        OptimizerState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<OptimizerState>,
}

fn write_array<W: Write>(out: &mut W, name: &str, t: &Tensor<f32>) -> Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in &t.data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut out: W, model: &Model<f32>, optimizer: Option<&OptimizerState>) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(model.config()).map_err(|e| Error::Format(e.to_string()))?;
    out.write_all(&(cfg.len() as u32).to_le_bytes())?;
    out.write_all(&cfg)?;
    out.write_all(&[optimizer.is_some() as u8])?;
    if let Some(o) = optimizer {
        out.write_all(&o.step.to_le_bytes())?;
    }
    let mut arrays: Vec<(String, &Tensor<f32>)> = model.params.named();
    if let Some(o) = optimizer {
        arrays.extend(o.m.named().into_iter().map(|(n, t)| (format!("{M_PREFIX}{n}"), t)));
        arrays.extend(o.v.named().into_iter().map(|(n, t)| (format!("{V_PREFIX}{n}"), t)));
    }
    out.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, t) in arrays {
        write_array(&mut out, &name, t)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, optimizer: Option<&OptimizerState>) -> Result<()> {
    write_checkpoint(BufWriter::new(fs::File::create(path)?), model, optimizer)
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("checkpoint is truncated".into()))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_bytes<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    Ok(buf)
}

fn fill(target: &mut Params<f32>, prefix: &str, arrays: &mut HashMap<String, Tensor<f32>>) -> Result<()> {
    for (name, t) in target.named_mut() {
        let key = format!("{prefix}{name}");
        let src = arrays
            .remove(&key)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing array {key}")))?;
        if src.shape != t.shape {
            return Err(Error::Format(format!(
                "array {key} has shape {:?}, expected {:?}",
                src.shape, t.shape
            )));
        }
        *t = src;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    if &read_exact::<_, 4>(&mut r)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let cfg: ModelConfig =
        serde_json::from_slice(&read_bytes(&mut r, len)?).map_err(|e| Error::Format(format!("bad model config: {e}")))?;
    cfg.validate()?;
    let has_opt = read_exact::<_, 1>(&mut r)?[0] != 0;
    let step = if has_opt { Some(read_u64(&mut r)?) } else { None };

    let count = read_u32(&mut r)? as usize;
    let mut arrays = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_bytes(&mut r, name_len)?)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = read_bytes(&mut r, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.insert(name, Tensor { shape, data });
    }

    let mut params = Params::zeros(&cfg);
    fill(&mut params, "", &mut arrays)?;
    let optimizer = match step {
        Some(step) => {
            let mut m = params.zeros_like();
            let mut v = params.zeros_like();
            fill(&mut m, M_PREFIX, &mut arrays)?;
            fill(&mut v, V_PREFIX, &mut arrays)?;
            Some(OptimizerState { step, m, v })
        }
        None => None,
    };
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Format(format!("unexpected array {extra} in checkpoint")));
    }
    Ok(Checkpoint {
        model: Model::from_params(cfg, params)?,
        optimizer,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    read_checkpoint(BufReader::new(fs::File::open(path)?))
}
