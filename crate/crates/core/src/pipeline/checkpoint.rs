//! Binary checkpoint format: versioned header, config fingerprint, flat
//! map of named parameter arrays, optional Adam state. All numbers are
//! little-endian; payloads are exact `f64` bits, so save/load round-trips
//! are bit-identical.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};

const MAGIC: &[u8; 8] = b"BMCKPT01";
const VERSION: u32 = 1;

/// A checkpoint loaded into memory.
#[derive(Debug)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub stage: String,
    pub step: u64,
    pub params: Vec<(String, ArrayD<f64>)>,
    /// `(t, m, v)` Adam state aligned with `params` order.
    pub opt: Option<(u64, Vec<ArrayD<f64>>, Vec<ArrayD<f64>>)>,
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    fingerprint: u64,
    stage: &str,
    step: u64,
    opt: Option<&Adam>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&fingerprint.to_le_bytes())?;
    let stage_bytes = stage.as_bytes();
    w.write_all(&(stage_bytes.len() as u8).to_le_bytes())?;
    w.write_all(stage_bytes)?;
    w.write_all(&step.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, value) in store.iter() {
        write_named_array(&mut w, name, value)?;
    }
    match opt {
        None => w.write_all(&[0u8])?,
        Some(adam) => {
            w.write_all(&[1u8])?;
            let (t, m, v) = adam.state();
            w.write_all(&t.to_le_bytes())?;
            for arr in m.iter().chain(v.iter()) {
                write_array(&mut w, arr)?;
            }
        }
    }
    Ok(())
}

fn write_named_array(w: &mut impl Write, name: &str, value: &ArrayD<f64>) -> Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&(value.ndim() as u8).to_le_bytes())?;
    for d in value.shape() {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for x in value.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn write_array(w: &mut impl Write, value: &ArrayD<f64>) -> Result<()> {
    for x in value.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::CheckpointFormat("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic {magic:?}, not a checkpoint"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let fingerprint = read_u64(&mut r)?;
    let stage_len = read_u8(&mut r)? as usize;
    let mut stage_bytes = vec![0u8; stage_len];
    r.read_exact(&mut stage_bytes)?;
    let stage = String::from_utf8(stage_bytes)
        .map_err(|_| Error::CheckpointFormat("stage tag is not utf-8".into()))?;
    let step = read_u64(&mut r)?;
    let n_params = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(read_named_array(&mut r)?);
    }
    let opt_flag = read_u8(&mut r)?;
    let opt = match opt_flag {
        0 => None,
        1 => {
            let t = read_u64(&mut r)?;
            let mut m = Vec::with_capacity(n_params);
            for (_, p) in &params {
                m.push(read_array(&mut r, p.shape())?);
            }
            let mut v = Vec::with_capacity(n_params);
            for (_, p) in &params {
                v.push(read_array(&mut r, p.shape())?);
            }
            Some((t, m, v))
        }
        other => {
            return Err(Error::CheckpointFormat(format!(
                "unknown optimizer flag {other}"
            )))
        }
    };
    Ok(Checkpoint {
        fingerprint,
        stage,
        step,
        params,
        opt,
    })
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)
        .map_err(|_| Error::CheckpointFormat("unexpected end of file".into()))?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::CheckpointFormat("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::CheckpointFormat("unexpected end of file".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_named_array(r: &mut impl Read) -> Result<(String, ArrayD<f64>)> {
    let mut lb = [0u8; 2];
    r.read_exact(&mut lb)
        .map_err(|_| Error::CheckpointFormat("unexpected end of file".into()))?;
    let name_len = u16::from_le_bytes(lb) as usize;
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::CheckpointFormat("parameter name is not utf-8".into()))?;
    let ndim = read_u8(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let arr = read_array(r, &shape)?;
    Ok((name, arr))
}

fn read_array(r: &mut impl Read, shape: &[usize]) -> Result<ArrayD<f64>> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)
            .map_err(|_| Error::CheckpointFormat("truncated parameter data".into()))?;
        data.push(f64::from_le_bytes(b));
    }
    ArrayD::from_shape_vec(IxDyn(shape), data)
        .map_err(|e| Error::CheckpointFormat(e.to_string()))
}

/// Restore checkpoint parameters into a freshly built store. Every name
/// and shape must match the built model exactly; the fingerprint must
/// match the running config.
pub fn apply_checkpoint(
    ckpt: &Checkpoint,
    store: &mut ParamStore,
    expected_fingerprint: u64,
    expected_stage: &str,
) -> Result<()> {
    if ckpt.fingerprint != expected_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: expected_fingerprint,
            found: ckpt.fingerprint,
        });
    }
    if ckpt.stage != expected_stage {
        return Err(Error::CheckpointFormat(format!(
            "stage mismatch: checkpoint is {:?}, expected {:?}",
            ckpt.stage, expected_stage
        )));
    }
    if ckpt.params.len() != store.len() {
        return Err(Error::CheckpointFormat(format!(
            "parameter count mismatch: checkpoint {} vs model {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for (name, value) in &ckpt.params {
        let id = store.id_of(name).ok_or_else(|| {
            Error::CheckpointFormat(format!("checkpoint parameter {name:?} not in model"))
        })?;
        if store.value(id).shape() != value.shape() {
            return Err(Error::CheckpointFormat(format!(
                "shape mismatch for {name:?}: checkpoint {:?} vs model {:?}",
                value.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = value.clone();
    }
    Ok(())
}
