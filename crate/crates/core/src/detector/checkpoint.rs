//! Versioned binary checkpoints.
//!
//! Layout: magic, schema version, scalar width, config hash, embedded config
//! JSON, iteration counter, named parameter tensors, optimizer moments, and
//! the training RNG state — everything needed for bit-exact resumption.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::adamw::{AdamW, AdamWConfig};
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;

use super::config::ModelConfig;

const MAGIC: &[u8; 8] = b"RGBXDET1";
const SCHEMA_VERSION: u32 = 1;

pub struct LoadedCheckpoint<F> {
    pub config: ModelConfig,
    pub values: Vec<F>,
    pub entries: Vec<(String, Vec<usize>)>,
    pub iter: u64,
    pub adam: Option<(u64, Vec<f64>, Vec<f64>)>,
    pub rng: Option<ChaCha8Rng>,
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    config: &ModelConfig,
    ps: &ParamStore<F>,
    iter: u64,
    adam: Option<&AdamW>,
    rng: Option<&ChaCha8Rng>,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(SCHEMA_VERSION)?;
    w.write_u8(std::mem::size_of::<F>() as u8)?;
    w.write_all(&config.hash())?;
    let cfg_json = serde_json::to_vec(config)?;
    w.write_u32::<LittleEndian>(cfg_json.len() as u32)?;
    w.write_all(&cfg_json)?;
    w.write_u64::<LittleEndian>(iter)?;

    w.write_u64::<LittleEndian>(ps.specs().len() as u64)?;
    for (i, spec) in ps.specs().iter().enumerate() {
        w.write_u16::<LittleEndian>(spec.name.len() as u16)?;
        w.write_all(spec.name.as_bytes())?;
        w.write_u8(spec.shape.len() as u8)?;
        for &d in &spec.shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for v in ps.slice(crate::nn::params::ParamId(i)) {
            w.write_f64::<LittleEndian>(v.into_f64())?;
        }
    }

    match adam {
        Some(a) => {
            w.write_u8(1)?;
            w.write_u64::<LittleEndian>(a.step_count)?;
            for v in &a.m {
                w.write_f64::<LittleEndian>(*v)?;
            }
            for v in &a.v {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        None => w.write_u8(0)?,
    }
    match rng {
        Some(r) => {
            w.write_u8(1)?;
            w.write_all(&r.get_seed())?;
            w.write_u128::<LittleEndian>(r.get_word_pos())?;
            w.write_u64::<LittleEndian>(r.get_stream())?;
        }
        None => w.write_u8(0)?,
    }
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<LoadedCheckpoint<F>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "schema version {version} unsupported (expected {SCHEMA_VERSION})"
        )));
    }
    let width = r.read_u8()?;
    if width as usize != std::mem::size_of::<F>() {
        return Err(Error::Checkpoint(format!(
            "checkpoint scalar width {width} does not match requested {}",
            std::mem::size_of::<F>()
        )));
    }
    let mut stored_hash = [0u8; 32];
    r.read_exact(&mut stored_hash)?;
    let cfg_len = r.read_u32::<LittleEndian>()? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_buf)?;
    if config.hash() != stored_hash {
        return Err(Error::Checkpoint("embedded config does not match stored hash".into()));
    }
    let iter = r.read_u64::<LittleEndian>()?;

    let n_params = r.read_u64::<LittleEndian>()? as usize;
    let mut entries = Vec::with_capacity(n_params);
    let mut values = Vec::new();
    for _ in 0..n_params {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let rank = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let len: usize = shape.iter().product();
        for _ in 0..len {
            values.push(F::from_f64(r.read_f64::<LittleEndian>()?));
        }
        entries.push((String::from_utf8_lossy(&name).into_owned(), shape));
    }

    let adam = if r.read_u8()? == 1 {
        let step_count = r.read_u64::<LittleEndian>()?;
        let mut m = vec![0.0; values.len()];
        let mut v = vec![0.0; values.len()];
        for x in &mut m {
            *x = r.read_f64::<LittleEndian>()?;
        }
        for x in &mut v {
            *x = r.read_f64::<LittleEndian>()?;
        }
        Some((step_count, m, v))
    } else {
        None
    };
    let rng = if r.read_u8()? == 1 {
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let word_pos = r.read_u128::<LittleEndian>()?;
        let stream = r.read_u64::<LittleEndian>()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Some(rng)
    } else {
        None
    };

    Ok(LoadedCheckpoint { config, values, entries, iter, adam, rng })
}

/// Overwrite a freshly built store with checkpoint values, verifying that
/// names and shapes line up exactly.
pub fn restore_params<F: Scalar>(ps: &mut ParamStore<F>, ckpt: &LoadedCheckpoint<F>) -> Result<()> {
    if ps.specs().len() != ckpt.entries.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            ps.specs().len(),
            ckpt.entries.len()
        )));
    }
    for (spec, (name, shape)) in ps.specs().iter().zip(&ckpt.entries) {
        if &spec.name != name || &spec.shape != shape {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: model {}{:?} vs checkpoint {}{:?}",
                spec.name, spec.shape, name, shape
            )));
        }
    }
    if ps.num_values() != ckpt.values.len() {
        return Err(Error::Checkpoint("value buffer length mismatch".into()));
    }
    ps.values_mut().copy_from_slice(&ckpt.values);
    Ok(())
}

/// Rebuild the optimizer from stored moments.
pub fn restore_adam<F: Scalar>(
    cfg: AdamWConfig,
    ps: &ParamStore<F>,
    ckpt: &LoadedCheckpoint<F>,
) -> Result<AdamW> {
    let mut opt = AdamW::new(cfg, ps);
    if let Some((step, m, v)) = &ckpt.adam {
        if m.len() != ps.num_values() {
            return Err(Error::Checkpoint("optimizer state length mismatch".into()));
        }
        opt.step_count = *step;
        opt.m = m.clone();
        opt.v = v.clone();
    }
    Ok(opt)
}
