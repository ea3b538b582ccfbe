//! Binary containers for checkpoints and generated latents.
//!
//! Both formats share one tensor encoding: length-prefixed UTF-8 name,
//! little-endian u32 rank and dims, then the data as little-endian 32-bit
//! floats, row-major. A checkpoint additionally carries a config echo and
//! the training RNG state so a run is reconstructable from the file alone.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TFCK";
pub const LATENT_MAGIC: [u8; 4] = *b"TFLT";
pub const FORMAT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("bad utf-8: {e}")))
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_str(w, name)?;
    write_u32(w, t.rank() as u32)?;
    for &d in t.shape() {
        write_u32(w, d as u32)?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name = read_str(r)?;
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

/// Serialized training state: config echo, RNG state, and every weight.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_echo: String,
    pub seed: u64,
    pub step: u64,
    pub stream_counters: Vec<(String, u64)>,
    pub weights: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        write_u32(&mut w, FORMAT_VERSION)?;
        write_str(&mut w, &self.config_echo)?;
        write_u64(&mut w, self.seed)?;
        write_u64(&mut w, self.step)?;
        write_u32(&mut w, self.stream_counters.len() as u32)?;
        for (name, counter) in &self.stream_counters {
            write_str(&mut w, name)?;
            write_u64(&mut w, *counter)?;
        }
        write_u32(&mut w, self.weights.len() as u32)?;
        for (name, t) in &self.weights {
            write_tensor(&mut w, name, t)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_echo = read_str(&mut r)?;
        let seed = read_u64(&mut r)?;
        let step = read_u64(&mut r)?;
        let n_streams = read_u32(&mut r)? as usize;
        let mut stream_counters = Vec::with_capacity(n_streams);
        for _ in 0..n_streams {
            let name = read_str(&mut r)?;
            let counter = read_u64(&mut r)?;
            stream_counters.push((name, counter));
        }
        let n = read_u32(&mut r)? as usize;
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(read_tensor(&mut r)?);
        }
        Ok(Checkpoint {
            config_echo,
            seed,
            step,
            stream_counters,
            weights,
        })
    }
}

/// Named-tensor container for generated latents.
#[derive(Debug, Clone)]
pub struct LatentFile {
    pub tensors: Vec<(String, Tensor)>,
}

impl LatentFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&LATENT_MAGIC)?;
        write_u32(&mut w, FORMAT_VERSION)?;
        write_u32(&mut w, self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            write_tensor(&mut w, name, t)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LatentFile> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != LATENT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            tensors.push(read_tensor(&mut r)?);
        }
        Ok(LatentFile { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }
}
