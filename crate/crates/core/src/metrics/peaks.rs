//! Event peak detection and peak-set alignment.
//!
//! Audio peaks come from a short-time energy envelope, video peaks from a
//! per-frame motion signal (pluggable; the default is the mean absolute
//! inter-frame latent difference). Both use the same picking rule: local
//! maxima above `median + k * MAD` with a minimum separation, larger peaks
//! winning ties. Alignment is the IoU of the two frame-index sets under a
//! +/- tolerance.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Strictly increasing event frame indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeakSet {
    frames: Vec<usize>,
}

impl PeakSet {
    pub fn new(mut frames: Vec<usize>) -> Self {
        frames.sort_unstable();
        frames.dedup();
        PeakSet { frames }
    }

    pub fn empty() -> Self {
        PeakSet { frames: Vec::new() }
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shifted(&self, offset: isize) -> PeakSet {
        PeakSet::new(
            self.frames
                .iter()
                .map(|&f| (f as isize + offset).max(0) as usize)
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AudioPeakConfig {
    /// Samples per second of the input signal.
    pub sample_rate: f64,
    /// Video frame rate used for timestamp -> frame conversion.
    pub fps: f64,
    /// Short-time energy window length in samples.
    pub window: usize,
    pub hop: usize,
    /// Threshold is `median + k_mad * MAD` of the envelope.
    pub k_mad: f64,
    /// Minimum separation between kept peaks, in seconds.
    pub min_separation_s: f64,
}

impl Default for AudioPeakConfig {
    fn default() -> Self {
        AudioPeakConfig {
            sample_rate: 10.0,
            fps: 10.0,
            window: 1,
            hop: 1,
            k_mad: 3.0,
            min_separation_s: 0.2,
        }
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Local maxima of `envelope` above `median + k * MAD`, thinned so kept
/// peaks are at least `min_sep` apart (larger values win).
fn pick_peaks(envelope: &[f64], k_mad: f64, min_sep: usize) -> Vec<usize> {
    let n = envelope.len();
    if n == 0 {
        return Vec::new();
    }
    let mut sorted = envelope.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = median(&sorted);
    let mut devs: Vec<f64> = envelope.iter().map(|&v| (v - med).abs()).collect();
    devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mad = median(&devs);
    let thresh = med + k_mad * mad;

    let mut candidates: Vec<usize> = Vec::new();
    for i in 0..n {
        let left_ok = i == 0 || envelope[i] > envelope[i - 1];
        let right_ok = i + 1 == n || envelope[i] >= envelope[i + 1];
        if left_ok && right_ok && envelope[i] > thresh {
            candidates.push(i);
        }
    }
    // Larger peaks claim their neighborhood first; index breaks ties.
    candidates.sort_by(|&a, &b| {
        envelope[b]
            .partial_cmp(&envelope[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &c in &candidates {
        if kept.iter().all(|&k| c.abs_diff(k) >= min_sep.max(1)) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept
}

/// Energy peaks of a waveform or envelope, reported as video frame indices.
pub fn detect_audio_peaks(signal: &[f64], cfg: &AudioPeakConfig) -> Result<PeakSet> {
    if cfg.window == 0 || cfg.hop == 0 {
        return Err(Error::invalid("detect_audio_peaks", "window and hop must be positive"));
    }
    if signal.len() < cfg.window {
        return Err(Error::invalid(
            "detect_audio_peaks",
            format!("signal length {} below window {}", signal.len(), cfg.window),
        ));
    }
    let n_frames = (signal.len() - cfg.window) / cfg.hop + 1;
    let envelope: Vec<f64> = (0..n_frames)
        .map(|m| {
            let start = m * cfg.hop;
            signal[start..start + cfg.window].iter().map(|&s| s * s).sum::<f64>() / cfg.window as f64
        })
        .collect();
    let env_rate = cfg.sample_rate / cfg.hop as f64;
    let min_sep = (cfg.min_separation_s * env_rate).round().max(1.0) as usize;
    let kept = pick_peaks(&envelope, cfg.k_mad, min_sep);
    let frames = kept
        .into_iter()
        .map(|m| {
            let t = (m * cfg.hop) as f64 / cfg.sample_rate
                + (cfg.window - 1) as f64 / (2.0 * cfg.sample_rate);
            (t * cfg.fps).round() as usize
        })
        .collect();
    Ok(PeakSet::new(frames))
}

/// Motion peaks from a per-frame nonnegative motion signal (already at
/// video rate, so indices are frame indices).
pub fn detect_video_peaks(motion: &[f64], k_mad: f64, min_separation_frames: usize) -> Result<PeakSet> {
    if motion.len() < 3 {
        return Err(Error::invalid(
            "detect_video_peaks",
            format!("need at least 3 frames, got {}", motion.len()),
        ));
    }
    if motion.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("detect_video_peaks", "motion signal must be nonnegative"));
    }
    Ok(PeakSet::new(pick_peaks(motion, k_mad, min_separation_frames)))
}

/// Default motion signal: mean absolute inter-frame latent difference.
/// `v` is `[C, F, H, W]`; frame 0 has no predecessor and reads 0.
pub fn motion_from_latent(v: &Tensor) -> Result<Vec<f64>> {
    let s = v.shape();
    if s.len() != 4 {
        return Err(Error::shape("motion_from_latent", format!("{:?}", s)));
    }
    let (c, f, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let mut motion = vec![0.0; f];
    for fi in 1..f {
        let mut acc = 0.0;
        for ci in 0..c {
            let base = (ci * f + fi) * plane;
            let prev = (ci * f + fi - 1) * plane;
            for p in 0..plane {
                acc += (v.data()[base + p] - v.data()[prev + p]).abs();
            }
        }
        motion[fi] = acc / (c * plane) as f64;
    }
    Ok(motion)
}

/// Default audio envelope: per-step L2 norm of the latent. `a` is `[L, d]`.
pub fn audio_envelope_from_latent(a: &Tensor) -> Result<Vec<f64>> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::shape("audio_envelope_from_latent", format!("{:?}", s)));
    }
    let (l, d) = (s[0], s[1]);
    Ok((0..l)
        .map(|i| a.data()[i * d..(i + 1) * d].iter().map(|&v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// IoU of two peak sets with membership under a +/- `tolerance` frame
/// window. Matching is greedy over the sorted sets (each peak pairs at most
/// once). Two empty sets count as perfect agreement.
pub fn av_align(audio: &PeakSet, video: &PeakSet, tolerance: usize) -> f64 {
    if audio.is_empty() && video.is_empty() {
        return 1.0;
    }
    let (pa, pv) = (audio.frames(), video.frames());
    let mut i = 0;
    let mut j = 0;
    let mut matches = 0usize;
    while i < pa.len() && j < pv.len() {
        let d = pa[i].abs_diff(pv[j]);
        if d <= tolerance {
            matches += 1;
            i += 1;
            j += 1;
        } else if pa[i] < pv[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    let union = pa.len() + pv.len() - matches;
    matches as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_has_no_peaks() {
        let cfg = AudioPeakConfig::default();
        let p = detect_audio_peaks(&vec![0.0; 50], &cfg).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn single_impulse_maps_to_frame() {
        // Impulse at t = 2.0 s with a 10 Hz signal and 10 fps video.
        let mut signal = vec![0.0; 50];
        signal[20] = 1.0;
        let cfg = AudioPeakConfig::default();
        let p = detect_audio_peaks(&signal, &cfg).unwrap();
        assert_eq!(p.frames(), &[20]);
    }

    #[test]
    fn close_impulses_keep_the_larger() {
        let mut signal = vec![0.0; 60];
        signal[30] = 1.0;
        signal[31] = 2.0;
        let cfg = AudioPeakConfig { min_separation_s: 0.5, ..AudioPeakConfig::default() };
        let p = detect_audio_peaks(&signal, &cfg).unwrap();
        assert_eq!(p.frames(), &[31]);
    }

    #[test]
    fn short_signal_errors() {
        let cfg = AudioPeakConfig { window: 8, ..AudioPeakConfig::default() };
        assert!(detect_audio_peaks(&[0.0; 4], &cfg).is_err());
    }

    #[test]
    fn constant_frames_no_motion_peaks() {
        let p = detect_video_peaks(&[0.0; 16], 3.0, 1).unwrap();
        assert!(p.is_empty());
        let p2 = detect_video_peaks(&[0.4; 16], 3.0, 1).unwrap();
        assert!(p2.is_empty(), "flat signal has no local maxima");
    }

    #[test]
    fn one_frame_jump_is_one_peak() {
        let v = Tensor::new(
            vec![1, 4, 1, 1],
            vec![0.0, 0.0, 5.0, 5.0],
        )
        .unwrap();
        let motion = motion_from_latent(&v).unwrap();
        assert_eq!(motion, vec![0.0, 0.0, 5.0, 0.0]);
        let p = detect_video_peaks(&motion, 3.0, 1).unwrap();
        assert_eq!(p.frames(), &[2]);
    }

    #[test]
    fn synthetic_pulses_found_at_their_frames() {
        let mut motion = vec![0.0; 60];
        motion[10] = 3.0;
        motion[40] = 2.0;
        let p = detect_video_peaks(&motion, 3.0, 2).unwrap();
        assert_eq!(p.frames(), &[10, 40]);
    }

    #[test]
    fn av_align_identical_sets() {
        let p = PeakSet::new(vec![3, 9, 20]);
        assert_eq!(av_align(&p, &p.clone(), 0), 1.0);
    }

    #[test]
    fn av_align_disjoint_zero() {
        let a = PeakSet::new(vec![1]);
        let v = PeakSet::new(vec![5]);
        assert_eq!(av_align(&a, &v, 0), 0.0);
    }

    #[test]
    fn av_align_partial_third() {
        let a = PeakSet::new(vec![1, 2]);
        let v = PeakSet::new(vec![2, 3]);
        let got = av_align(&a, &v, 0);
        assert!((got - 1.0 / 3.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn av_align_empty_sets_define_one() {
        assert_eq!(av_align(&PeakSet::empty(), &PeakSet::empty(), 0), 1.0);
        assert_eq!(av_align(&PeakSet::empty(), &PeakSet::new(vec![1]), 0), 0.0);
    }

    #[test]
    fn av_align_shift_invariant() {
        let mut rng = crate::rng::RngStream::new(140);
        for _ in 0..100 {
            let a = PeakSet::new((0..4).map(|_| 10 + rng.below(50)).collect());
            let v = PeakSet::new((0..4).map(|_| 10 + rng.below(50)).collect());
            let base = av_align(&a, &v, 1);
            let off = rng.below(30) as isize;
            let shifted = av_align(&a.shifted(off), &v.shifted(off), 1);
            assert_eq!(base, shifted);
        }
    }

    #[test]
    fn audio_envelope_is_rowwise_norm() {
        let a = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(audio_envelope_from_latent(&a).unwrap(), vec![5.0, 0.0]);
    }
}
