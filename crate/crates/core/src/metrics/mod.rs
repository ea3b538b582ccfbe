//! Audio-video evaluation metrics.
//!
//! The suite operates on embedding sets and 1-D signals rather than raw
//! media: Fréchet distances between Gaussian fits ([`frechet`]), cosine
//! aggregation scores ([`cosine`]), and temporal synchrony from peak
//! alignment ([`peaks`]). Embedding files use the fixed binary layout in
//! [`embio`].

pub mod cosine;
pub mod embio;
pub mod frechet;
pub mod peaks;

pub use cosine::{avh_score, cosine_agg, javis_score, uniform_indices, CosineMode, CosineSample, JavisConfig};
pub use embio::{read_embeddings, write_embeddings};
pub use frechet::{frechet_distance, gaussian_stats, GaussianStats};
pub use peaks::{
    audio_envelope_from_latent, av_align, detect_audio_peaks, detect_video_peaks,
    motion_from_latent, AudioPeakConfig, PeakSet,
};

use crate::error::{Error, Result};

/// What an embedding row describes; stored as one byte in the file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Video = 0,
    Audio = 1,
    Text = 2,
    Frame = 3,
}

impl Role {
    pub fn from_tag(tag: u8) -> Result<Role> {
        match tag {
            0 => Ok(Role::Video),
            1 => Ok(Role::Audio),
            2 => Ok(Role::Text),
            3 => Ok(Role::Frame),
            other => Err(Error::invalid("embedding_role", format!("tag {other}"))),
        }
    }
}

/// `N x d` embedding rows plus a role tag.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub role: Role,
}

impl EmbeddingSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>, role: Role) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::shape(
                "embedding_set",
                format!("{} values for {}x{}", data.len(), n, d),
            ));
        }
        Ok(EmbeddingSet { n, d, data, role })
    }

    pub fn from_rows(rows: &[Vec<f64>], role: Role) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("embedding_set", "ragged rows".to_string()));
        }
        Ok(EmbeddingSet {
            n,
            d,
            data: rows.concat(),
            role,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}
