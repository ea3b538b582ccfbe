//! Cosine-similarity aggregation scores.
//!
//! Covers the text-video frame-averaged score, per-sample paired-embedding
//! scores (text-audio, audio-video global, spectrogram-style), the
//! frame-vs-audio alignment mean, and the windowed bottom-fraction score.

use crate::error::{Error, Result};

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", format!("{} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-300 || nb < 1e-300 {
        return Err(Error::invalid("cosine", "zero-norm embedding"));
    }
    Ok(dot / (na * nb))
}

/// Linearly spaced indices into `0..total`, the uniform frame sampling rule
/// (48 frames for the text-video score).
pub fn uniform_indices(total: usize, k: usize) -> Vec<usize> {
    assert!(total > 0 && k > 0);
    if k == 1 {
        return vec![0];
    }
    (0..k)
        .map(|i| ((i as f64) * (total - 1) as f64 / (k - 1) as f64).round() as usize)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CosineMode {
    /// Frame embeddings against a text embedding, averaged per clip.
    ClipVideo,
    /// Paired global text/audio embeddings.
    ClapAudio,
    /// Paired global video/audio embeddings.
    IbAv,
    /// Paired spectrogram-style video/audio embeddings.
    Cavp,
}

#[derive(Debug, Clone)]
pub enum CosineSample {
    Frames { frames: Vec<Vec<f64>>, reference: Vec<f64> },
    Pair { left: Vec<f64>, right: Vec<f64> },
}

/// Dataset-mean cosine score. `ClipVideo` consumes `Frames` samples (mean
/// over the K frame-text cosines, then over samples); the paired modes
/// consume `Pair` samples.
pub fn cosine_agg(mode: CosineMode, samples: &[CosineSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cosine_agg", "no samples"));
    }
    let mut total = 0.0;
    for s in samples {
        total += match (mode, s) {
            (CosineMode::ClipVideo, CosineSample::Frames { frames, reference }) => {
                if frames.is_empty() {
                    return Err(Error::invalid("cosine_agg", "sample with no frames"));
                }
                let mut acc = 0.0;
                for f in frames {
                    acc += cosine(f, reference)?;
                }
                acc / frames.len() as f64
            }
            (CosineMode::ClapAudio | CosineMode::IbAv | CosineMode::Cavp, CosineSample::Pair { left, right }) => {
                cosine(left, right)?
            }
            _ => {
                return Err(Error::invalid(
                    "cosine_agg",
                    format!("sample kind does not match mode {mode:?}"),
                ))
            }
        };
    }
    Ok(total / samples.len() as f64)
}

/// Mean cosine between each frame embedding and the global audio embedding.
pub fn avh_score(frame_embeddings: &[Vec<f64>], audio_embedding: &[f64]) -> Result<f64> {
    if frame_embeddings.is_empty() {
        return Err(Error::invalid("avh_score", "no frames"));
    }
    let mut acc = 0.0;
    for f in frame_embeddings {
        acc += cosine(f, audio_embedding)?;
    }
    Ok(acc / frame_embeddings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JavisConfig {
    pub window_s: f64,
    pub hop_s: f64,
    /// Fraction of the lowest per-window cosines averaged into the window
    /// score.
    pub bottom_fraction: f64,
    pub fps: f64,
}

impl Default for JavisConfig {
    fn default() -> Self {
        JavisConfig {
            window_s: 2.0,
            hop_s: 1.0,
            bottom_fraction: 0.4,
            fps: 10.0,
        }
    }
}

/// Frame ranges `[start, end)` of the overlapping windows over `t` frames.
pub fn javis_windows(t: usize, cfg: &JavisConfig) -> Vec<(usize, usize)> {
    let win = (cfg.window_s * cfg.fps).round().max(1.0) as usize;
    let hop = (cfg.hop_s * cfg.fps).round().max(1.0) as usize;
    let mut out = Vec::new();
    let mut start = 0usize;
    loop {
        let end = (start + win).min(t);
        out.push((start, end));
        if end >= t {
            break;
        }
        start += hop;
    }
    out
}

/// Windowed synchrony score: per window, the frame-vs-window-audio cosines
/// are computed and the bottom `bottom_fraction` of them averaged; the final
/// score is the mean over windows. `window_audio` supplies one embedding per
/// window (as produced by [`javis_windows`]).
pub fn javis_score(frame_embeddings: &[Vec<f64>], window_audio: &[Vec<f64>], cfg: &JavisConfig) -> Result<f64> {
    if !(cfg.bottom_fraction > 0.0 && cfg.bottom_fraction <= 1.0) {
        return Err(Error::invalid(
            "javis_score",
            format!("bottom_fraction {} outside (0,1]", cfg.bottom_fraction),
        ));
    }
    let t = frame_embeddings.len();
    if t == 0 {
        return Err(Error::invalid("javis_score", "no frames"));
    }
    let windows = javis_windows(t, cfg);
    if windows.len() != window_audio.len() {
        return Err(Error::shape(
            "javis_score",
            format!("{} windows vs {} audio embeddings", windows.len(), window_audio.len()),
        ));
    }
    let mut total = 0.0;
    for ((start, end), audio) in windows.iter().zip(window_audio) {
        let mut cosines = Vec::with_capacity(end - start);
        for f in &frame_embeddings[*start..*end] {
            cosines.push(cosine(f, audio)?);
        }
        cosines.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let keep = ((cfg.bottom_fraction * cosines.len() as f64).ceil() as usize).clamp(1, cosines.len());
        let bottom: f64 = cosines[..keep].iter().sum::<f64>() / keep as f64;
        total += bottom;
    }
    Ok(total / windows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paired_identical_embeddings_score_one() {
        let samples = vec![
            CosineSample::Pair { left: vec![1.0, 2.0], right: vec![1.0, 2.0] },
            CosineSample::Pair { left: vec![0.0, 3.0], right: vec![0.0, 3.0] },
        ];
        for mode in [CosineMode::ClapAudio, CosineMode::IbAv, CosineMode::Cavp] {
            assert!((cosine_agg(mode, &samples).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_pairs_score_zero() {
        let samples = vec![CosineSample::Pair { left: vec![1.0, 0.0], right: vec![0.0, 1.0] }];
        assert!(cosine_agg(CosineMode::IbAv, &samples).unwrap().abs() < 1e-12);
    }

    #[test]
    fn dataset_mean_of_one_and_zero() {
        let samples = vec![
            CosineSample::Pair { left: vec![1.0, 0.0], right: vec![2.0, 0.0] },
            CosineSample::Pair { left: vec![1.0, 0.0], right: vec![0.0, 5.0] },
        ];
        assert!((cosine_agg(CosineMode::ClapAudio, &samples).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clip_video_averages_frames_then_samples() {
        let samples = vec![CosineSample::Frames {
            frames: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            reference: vec![1.0, 0.0],
        }];
        assert!((cosine_agg(CosineMode::ClipVideo, &samples).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mode_sample_mismatch_errors() {
        let samples = vec![CosineSample::Pair { left: vec![1.0], right: vec![1.0] }];
        assert!(cosine_agg(CosineMode::ClipVideo, &samples).is_err());
    }

    #[test]
    fn avh_cases() {
        let audio = vec![1.0, 0.0];
        assert!((avh_score(&[audio.clone(), audio.clone()], &audio).unwrap() - 1.0).abs() < 1e-12);
        let half = avh_score(&[vec![1.0, 0.0], vec![0.0, 1.0]], &audio).unwrap();
        assert!((half - 0.5).abs() < 1e-12);
        let single = avh_score(&[vec![0.5, 0.5]], &audio).unwrap();
        assert!((single - (0.5 / (0.5f64 * 0.5 + 0.25).sqrt() / 1.0)).abs() < 1e-9 || single > 0.0);
    }

    #[test]
    fn uniform_indices_cover_range() {
        assert_eq!(uniform_indices(10, 1), vec![0]);
        let idx = uniform_indices(97, 48);
        assert_eq!(idx.len(), 48);
        assert_eq!(idx[0], 0);
        assert_eq!(*idx.last().unwrap(), 96);
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn javis_all_parallel_is_one() {
        let frames = vec![vec![2.0, 0.0]; 25];
        let cfg = JavisConfig::default();
        let n_windows = javis_windows(25, &cfg).len();
        let audio = vec![vec![1.0, 0.0]; n_windows];
        for rho in [0.2, 0.5, 1.0] {
            let score = javis_score(&frames, &audio, &JavisConfig { bottom_fraction: rho, ..cfg }).unwrap();
            assert!((score - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn javis_bottom_half_of_mixed_window() {
        // One window holding cosines {1, 1, 0, 0}: bottom half averages 0.
        let frames = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ];
        let cfg = JavisConfig { window_s: 4.0, hop_s: 4.0, bottom_fraction: 0.5, fps: 1.0 };
        let audio = vec![vec![1.0, 0.0]];
        let score = javis_score(&frames, &audio, &cfg).unwrap();
        assert!(score.abs() < 1e-12, "{score}");
    }

    #[test]
    fn javis_full_fraction_equals_plain_mean() {
        let frames = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let cfg = JavisConfig { window_s: 3.0, hop_s: 3.0, bottom_fraction: 1.0, fps: 1.0 };
        let audio_emb = vec![1.0, 0.0];
        let score = javis_score(&frames, &[audio_emb.clone()], &cfg).unwrap();
        let avh = avh_score(&frames, &audio_emb).unwrap();
        assert!((score - avh).abs() < 1e-12);
    }

    #[test]
    fn scores_bounded_by_one() {
        let mut rng = crate::rng::RngStream::new(130);
        for _ in 0..20 {
            let frames: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
            let audio: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let s = avh_score(&frames, &audio).unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
    }
}
