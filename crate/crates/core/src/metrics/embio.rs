//! Embedding file format.
//!
//! Layout, bit-exact: magic bytes `EMB1`, little-endian u32 row count N,
//! little-endian u32 width d, one u8 role tag (0 video, 1 audio, 2 text,
//! 3 frame), then `N * d` little-endian 32-bit floats, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EmbeddingSet, Role};
use crate::error::{Error, Result};

pub const EMB_MAGIC: [u8; 4] = *b"EMB1";

pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&EMB_MAGIC)?;
    w.write_all(&(set.n as u32).to_le_bytes())?;
    w.write_all(&(set.d as u32).to_le_bytes())?;
    w.write_all(&[set.role as u8])?;
    for &v in &set.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != EMB_MAGIC {
        return Err(Error::invalid("read_embeddings", format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let n = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let d = u32::from_le_bytes(u32buf) as usize;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let role = Role::from_tag(tag[0])?;
    let mut bytes = vec![0u8; n * d * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    EmbeddingSet::new(n, d, data, role)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.emb");
        let set = EmbeddingSet::new(1, 2, vec![1.0, -2.0], Role::Audio).unwrap();
        write_embeddings(&path, &set).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"EMB1");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.push(1u8);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.emb");
        let mut rng = crate::rng::RngStream::new(150);
        let data: Vec<f64> = (0..12).map(|_| (rng.normal() as f32) as f64).collect();
        let set = EmbeddingSet::new(3, 4, data.clone(), Role::Frame).unwrap();
        write_embeddings(&path, &set).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.n, 3);
        assert_eq!(back.d, 4);
        assert_eq!(back.role, Role::Frame);
        assert_eq!(back.data, data);
    }
}
