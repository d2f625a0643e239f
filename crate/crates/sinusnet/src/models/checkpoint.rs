//! Binary checkpoint container.
//!
//! Layout (all little-endian): magic `SNCKPT01`, format version, stage tag,
//! canonical spec JSON plus its SHA-256, epoch, validation loss, config
//! JSON, then named f64 tensors (parameters and persistent buffers).
//! Restoring verifies the spec hash against the receiving model's spec, so
//! weights can never silently load into a different architecture.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::spec::{spec_hash, spec_json};
use crate::error::{Error, Result};
use crate::nn::Block;

const MAGIC: &[u8; 8] = b"SNCKPT01";
const VERSION: u32 = 1;
const MAX_STRING: usize = 1 << 24;
const MAX_NDIM: u32 = 8;
const MAX_ELEMS: u64 = 1 << 31;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Pipeline stage that produced the weights (for example `cae`,
    /// `pretrain_residual`, `finetuned`, `scratch`).
    pub stage: String,
    pub spec_json: String,
    pub epoch: u64,
    pub val_loss: f64,
    pub config_json: String,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    /// Snapshot a model's parameters and buffers.
    pub fn capture<T: Serialize>(
        stage: &str,
        spec: &T,
        epoch: u64,
        val_loss: f64,
        config_json: &str,
        block: &mut dyn Block,
    ) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        block.visit_params(&mut |p| {
            let prev = tensors.insert(p.name.clone(), p.w.clone());
            assert!(prev.is_none(), "duplicate parameter name {}", p.name);
        });
        block.visit_buffers(&mut |name, buf| {
            let prev = tensors.insert(name.to_string(), buf.clone());
            assert!(prev.is_none(), "duplicate buffer name {}", name);
        });
        Checkpoint {
            stage: stage.to_string(),
            spec_json: spec_json(spec),
            epoch,
            val_loss,
            config_json: config_json.to_string(),
            tensors,
        }
    }

    /// Hex SHA-256 of the stored spec JSON.
    pub fn spec_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.spec_json.as_bytes());
        hasher.finalize().iter().map(|b| format!("{:02x}", b)).collect()
    }

    /// Fail with a hash mismatch unless `spec` is the architecture these
    /// weights were captured from.
    pub fn verify_spec<T: Serialize>(&self, spec: &T) -> Result<()> {
        let expected = spec_hash(spec);
        let found = self.spec_hash();
        if expected != found {
            return Err(Error::SpecHashMismatch { expected, found });
        }
        Ok(())
    }

    /// Restore every parameter and buffer of `block`; the checkpoint must
    /// contain exactly the block's tensor names.
    pub fn restore_into(&self, block: &mut dyn Block) -> Result<()> {
        let mut needed = Vec::new();
        block.visit_params(&mut |p| needed.push(p.name.clone()));
        block.visit_buffers(&mut |name, _| needed.push(name.to_string()));
        for name in &needed {
            if !self.tensors.contains_key(name) {
                return Err(Error::State(format!("checkpoint is missing tensor {}", name)));
            }
        }
        if needed.len() != self.tensors.len() {
            let extra: Vec<&String> =
                self.tensors.keys().filter(|k| !needed.contains(k)).collect();
            return Err(Error::State(format!(
                "checkpoint has {} tensors the model does not: {:?}",
                extra.len(),
                extra.iter().take(4).collect::<Vec<_>>()
            )));
        }
        self.copy_matching(block, "")?;
        Ok(())
    }

    /// Restore only tensors whose name starts with `prefix` (for example
    /// `enc.` to transfer a pretrained encoder). Every matching tensor in
    /// the block must be present; checkpoint extras are ignored. Returns
    /// the number of tensors restored.
    pub fn restore_matching(&self, block: &mut dyn Block, prefix: &str) -> Result<usize> {
        let mut needed = Vec::new();
        block.visit_params(&mut |p| {
            if p.name.starts_with(prefix) {
                needed.push(p.name.clone());
            }
        });
        block.visit_buffers(&mut |name, _| {
            if name.starts_with(prefix) {
                needed.push(name.to_string());
            }
        });
        if needed.is_empty() {
            return Err(Error::State(format!("model has no tensors under prefix {:?}", prefix)));
        }
        for name in &needed {
            if !self.tensors.contains_key(name) {
                return Err(Error::State(format!("checkpoint is missing tensor {}", name)));
            }
        }
        self.copy_matching(block, prefix)?;
        Ok(needed.len())
    }

    fn copy_matching(&self, block: &mut dyn Block, prefix: &str) -> Result<()> {
        let mut failure: Option<Error> = None;
        block.visit_params(&mut |p| {
            if failure.is_some() || !p.name.starts_with(prefix) {
                return;
            }
            if let Some(t) = self.tensors.get(&p.name) {
                if t.shape() != p.w.shape() {
                    failure = Some(Error::State(format!(
                        "tensor {} has shape {:?} in the checkpoint but {:?} in the model",
                        p.name,
                        t.shape(),
                        p.w.shape()
                    )));
                    return;
                }
                p.w.assign(t);
            }
        });
        block.visit_buffers(&mut |name, buf| {
            if failure.is_some() || !name.starts_with(prefix) {
                return;
            }
            if let Some(t) = self.tensors.get(name) {
                if t.shape() != buf.shape() {
                    failure = Some(Error::State(format!(
                        "buffer {} has shape {:?} in the checkpoint but {:?} in the model",
                        name,
                        t.shape(),
                        buf.shape()
                    )));
                    return;
                }
                buf.assign(t);
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    write_string(&mut w, &ckpt.stage).map_err(io)?;
    write_string(&mut w, &ckpt.spec_json).map_err(io)?;
    let mut hasher = Sha256::new();
    hasher.update(ckpt.spec_json.as_bytes());
    w.write_all(&hasher.finalize()).map_err(io)?;
    w.write_all(&ckpt.epoch.to_le_bytes()).map_err(io)?;
    w.write_all(&ckpt.val_loss.to_le_bytes()).map_err(io)?;
    write_string(&mut w, &ckpt.config_json).map_err(io)?;
    w.write_all(&(ckpt.tensors.len() as u64).to_le_bytes()).map_err(io)?;
    for (name, tensor) in &ckpt.tensors {
        write_string(&mut w, name).map_err(io)?;
        w.write_all(&(tensor.ndim() as u32).to_le_bytes()).map_err(io)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in tensor.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let fmt = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let mut magic = [0u8; 8];
    read_exact(&mut r, path, &mut magic)?;
    if &magic != MAGIC {
        return Err(fmt("bad magic; not a checkpoint file".into()));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(fmt(format!("unsupported checkpoint version {}", version)));
    }
    let stage = read_string(&mut r, path)?;
    let spec_json = read_string(&mut r, path)?;
    let mut stored_hash = [0u8; 32];
    read_exact(&mut r, path, &mut stored_hash)?;
    let mut hasher = Sha256::new();
    hasher.update(spec_json.as_bytes());
    if hasher.finalize().as_slice() != stored_hash {
        return Err(fmt("spec hash does not match spec JSON; file is corrupt".into()));
    }
    let epoch = read_u64(&mut r, path)?;
    let val_loss = f64::from_le_bytes(read_8(&mut r, path)?);
    let config_json = read_string(&mut r, path)?;
    let n_tensors = read_u64(&mut r, path)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let name = read_string(&mut r, path)?;
        let ndim = read_u32(&mut r, path)?;
        if ndim > MAX_NDIM {
            return Err(fmt(format!("tensor {} has {} dimensions", name, ndim)));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut elems: u64 = 1;
        for _ in 0..ndim {
            let d = read_u64(&mut r, path)?;
            elems = elems.saturating_mul(d.max(1));
            shape.push(d as usize);
        }
        if elems > MAX_ELEMS {
            return Err(fmt(format!("tensor {} is implausibly large", name)));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_8(&mut r, path)?));
        }
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|e| fmt(format!("tensor {}: {}", name, e)))?;
        if tensors.insert(name.clone(), arr).is_some() {
            return Err(fmt(format!("duplicate tensor name {}", name)));
        }
    }
    Ok(Checkpoint { stage, spec_json, epoch, val_loss, config_json, tensors })
}

fn write_string<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_exact<R: Read>(r: &mut R, path: &Path, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("truncated checkpoint: {}", e),
    })
}

fn read_8<R: Read>(r: &mut R, path: &Path) -> Result<[u8; 8]> {
    let mut b = [0u8; 8];
    read_exact(r, path, &mut b)?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, path, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, path: &Path) -> Result<u64> {
    Ok(u64::from_le_bytes(read_8(r, path)?))
}

fn read_string<R: Read>(r: &mut R, path: &Path) -> Result<String> {
    let len = read_u32(r, path)? as usize;
    if len > MAX_STRING {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("string of {} bytes exceeds the format limit", len),
        });
    }
    let mut buf = vec![0u8; len];
    read_exact(r, path, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("invalid utf-8 in string: {}", e),
    })
}
