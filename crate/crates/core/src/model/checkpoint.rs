//! Versioned binary checkpoints.
//!
//! Layout, all integers 64-bit little-endian and all values 32-bit
//! little-endian IEEE-754:
//!
//! ```text
//! magic "MLMLAB01" (8 bytes)
//! config_len, config bytes (UTF-8 run-config text)
//! n_params, then per parameter: name_len, name bytes, rank, dims, values
//! n_adam,  then per moment tensor in the same encoding, named
//!          "<param>.m" / "<param>.v" for each trainable parameter in order
//! step counter
//! ```
//!
//! Save followed by load is bit-exact for f32 models; f64 models are stored
//! at f32 precision.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::optim::{AdamState, Moments};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MLMLAB01";
const MAX_NAME_LEN: u64 = 4096;
const MAX_RANK: u64 = 8;
const MAX_NUMEL: u64 = 1 << 31;

/// Everything a checkpoint holds, with tensors still keyed by name; use
/// [`rebuild_params`] / [`rebuild_adam`] to recover typed structures.
#[derive(Debug, Clone)]
pub struct CheckpointData<T: Scalar> {
    pub config_text: String,
    pub params: Vec<(String, Tensor<T>)>,
    pub adam: Vec<(String, Tensor<T>)>,
    pub step: u64,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    config_text: &str,
    params: &ModelParams<T>,
    adam: &AdamState<T>,
    step: u64,
) -> Result<()> {
    let named = params.named();
    let trainable: Vec<&(String, &Tensor<T>)> =
        named.iter().filter(|(_, t)| t.requires_grad()).collect();
    if adam.moments.len() != trainable.len() {
        return Err(Error::Config(format!(
            "adam state has {} moment pairs for {} trainable parameters",
            adam.moments.len(),
            trainable.len()
        )));
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));

    out(MAGIC)?;
    out(&(config_text.len() as u64).to_le_bytes())?;
    out(config_text.as_bytes())?;

    out(&(named.len() as u64).to_le_bytes())?;
    for (name, tensor) in &named {
        write_tensor(&mut out, name, tensor.shape(), tensor.values())?;
    }

    out(&(2 * trainable.len() as u64).to_le_bytes())?;
    for ((name, tensor), moments) in trainable.iter().zip(adam.moments.iter()) {
        write_tensor(&mut out, &format!("{name}.m"), tensor.shape(), &moments.m)?;
        write_tensor(&mut out, &format!("{name}.v"), tensor.shape(), &moments.v)?;
    }

    out(&step.to_le_bytes())?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_tensor<T: Scalar>(
    out: &mut impl FnMut(&[u8]) -> Result<()>,
    name: &str,
    shape: &[usize],
    values: &[T],
) -> Result<()> {
    out(&(name.len() as u64).to_le_bytes())?;
    out(name.as_bytes())?;
    out(&(shape.len() as u64).to_le_bytes())?;
    for &d in shape {
        out(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    out(&buf)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<CheckpointData<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}")));
    }

    let config_len = read_u64(&mut r, path)?;
    if config_len > MAX_NUMEL {
        return Err(Error::format(path, format!("implausible config length {config_len}")));
    }
    let mut config_bytes = vec![0u8; config_len as usize];
    read_exact(&mut r, &mut config_bytes, path)?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|e| Error::format(path, format!("config text not UTF-8: {e}")))?;

    let n_params = read_u64(&mut r, path)?;
    let mut params = Vec::with_capacity(n_params as usize);
    for _ in 0..n_params {
        params.push(read_tensor(&mut r, path)?);
    }

    let n_adam = read_u64(&mut r, path)?;
    let mut adam = Vec::with_capacity(n_adam as usize);
    for _ in 0..n_adam {
        adam.push(read_tensor(&mut r, path)?);
    }

    let step = read_u64(&mut r, path)?;

    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(Error::format(path, "trailing bytes after step counter")),
        Err(e) => return Err(Error::io(path, e)),
    }

    Ok(CheckpointData { config_text, params, adam, step })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor<T: Scalar>(r: &mut impl Read, path: &Path) -> Result<(String, Tensor<T>)> {
    let name_len = read_u64(r, path)?;
    if name_len == 0 || name_len > MAX_NAME_LEN {
        return Err(Error::format(path, format!("implausible tensor name length {name_len}")));
    }
    let mut name_bytes = vec![0u8; name_len as usize];
    read_exact(r, &mut name_bytes, path)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|e| Error::format(path, format!("tensor name not UTF-8: {e}")))?;

    let rank = read_u64(r, path)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format(path, format!("tensor {name}: implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(r, path)?;
        numel = numel.saturating_mul(d);
        shape.push(d as usize);
    }
    if numel == 0 || numel > MAX_NUMEL {
        return Err(Error::format(path, format!("tensor {name}: implausible shape {shape:?}")));
    }

    let mut buf = vec![0u8; numel as usize * 4];
    read_exact(r, &mut buf, path)?;
    let values = buf
        .chunks_exact(4)
        .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let tensor = Tensor::new(shape, values).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((name, tensor))
}

/// Reconstructs typed parameters from named checkpoint tensors; every
/// expected name must be present with the right shape, and no extras.
pub fn rebuild_params<T: Scalar>(
    config: &ModelConfig,
    tensors: &[(String, Tensor<T>)],
) -> Result<ModelParams<T>> {
    let mut by_name: HashMap<&str, &Tensor<T>> =
        tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    if by_name.len() != tensors.len() {
        return Err(Error::Data("duplicate tensor name in checkpoint".into()));
    }

    let mut params = ModelParams::init(config, 0)?;
    for (name, slot) in params.named_mut() {
        let stored = by_name
            .remove(name.as_str())
            .ok_or_else(|| Error::Data(format!("checkpoint missing parameter {name}")))?;
        if stored.shape() != slot.shape() {
            return Err(Error::Data(format!(
                "parameter {name}: checkpoint shape {:?} vs model {:?}",
                stored.shape(),
                slot.shape()
            )));
        }
        slot.values_mut().copy_from_slice(stored.values());
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Data(format!("checkpoint has unexpected parameter {extra}")));
    }
    Ok(params)
}

/// Reconstructs optimizer state from "<param>.m"/"<param>.v" tensors; the
/// step counter comes from the checkpoint's trailing field.
pub fn rebuild_adam<T: Scalar>(
    params: &ModelParams<T>,
    tensors: &[(String, Tensor<T>)],
    step: u64,
) -> Result<AdamState<T>> {
    let mut by_name: HashMap<&str, &Tensor<T>> =
        tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    if by_name.len() != tensors.len() {
        return Err(Error::Data("duplicate optimizer tensor name in checkpoint".into()));
    }

    let mut moments = Vec::new();
    for (name, tensor) in params.named() {
        if !tensor.requires_grad() {
            continue;
        }
        let mut fetch = |suffix: &str| -> Result<Vec<T>> {
            let key = format!("{name}.{suffix}");
            let stored = by_name
                .remove(key.as_str())
                .ok_or_else(|| Error::Data(format!("checkpoint missing {key}")))?;
            if stored.shape() != tensor.shape() {
                return Err(Error::Data(format!(
                    "{key}: checkpoint shape {:?} vs model {:?}",
                    stored.shape(),
                    tensor.shape()
                )));
            }
            Ok(stored.values().to_vec())
        };
        let m = fetch("m")?;
        let v = fetch("v")?;
        moments.push(Moments { m, v });
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Data(format!("checkpoint has unexpected optimizer tensor {extra}")));
    }
    Ok(AdamState { step_count: step, moments })
}
