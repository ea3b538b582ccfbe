//! Tokenization of video/audio latents and rotary position embeddings.
//!
//! Video latents `[B, C_v, F, H, W]` are patchified frame-wise into
//! `[B, L_v, D]` token sequences (frame-major, then row-major spatial).
//! Audio latents `[B, L_a, d_a]` get a linear projection plus a depthwise
//! convolutional positional residual. Rotary tables are 3D for video (the
//! head dimension is split across time/height/width axes) and 1D for audio;
//! text tokens are never rotated.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchConfig {
    pub p_h: usize,
    pub p_w: usize,
    pub c_v: usize,
    pub d: usize,
}

impl PatchConfig {
    /// Flattened patch width `C_v * p_h * p_w`.
    pub fn patch_elems(&self) -> usize {
        self.c_v * self.p_h * self.p_w
    }

    pub fn check_divisible(&self, h: usize, w: usize) -> Result<()> {
        if h % self.p_h != 0 || w % self.p_w != 0 {
            return Err(Error::geometry(
                "patchify",
                format!("{}x{} not divisible by patch {}x{}", h, w, self.p_h, self.p_w),
            ));
        }
        Ok(())
    }

    /// `L_v = F * (H/p_h) * (W/p_w)`.
    pub fn video_token_count(&self, frames: usize, h: usize, w: usize) -> Result<usize> {
        self.check_divisible(h, w)?;
        Ok(frames * (h / self.p_h) * (w / self.p_w))
    }
}

/// Element bijection between `[B, C, F, H, W]` and `[B, L_v, C*p_h*p_w]`.
/// Token order is frame-major then row-major over the patch grid; within a
/// token the layout is `(c, dy, dx)`, channel outermost.
fn patch_map(b: usize, cfg: &PatchConfig, f: usize, h: usize, w: usize) -> Vec<usize> {
    let (ph, pw, c) = (cfg.p_h, cfg.p_w, cfg.c_v);
    let (gh, gw) = (h / ph, w / pw);
    let elems = cfg.patch_elems();
    let l_v = f * gh * gw;
    let mut map = vec![0usize; b * l_v * elems];
    let mut out = 0usize;
    for bi in 0..b {
        for fi in 0..f {
            for gi in 0..gh {
                for gj in 0..gw {
                    for ci in 0..c {
                        for dy in 0..ph {
                            for dx in 0..pw {
                                let hi = gi * ph + dy;
                                let wi = gj * pw + dx;
                                map[out] = (((bi * c + ci) * f + fi) * h + hi) * w + wi;
                                out += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    map
}

/// Rearrange video latents into flattened patch rows (no projection).
pub fn patchify_raw(tape: &mut Tape, v: Var, cfg: &PatchConfig) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    if shape.len() != 5 || shape[1] != cfg.c_v {
        return Err(Error::geometry(
            "patchify",
            format!("expected [B,{},F,H,W], got {:?}", cfg.c_v, shape),
        ));
    }
    let (b, f, h, w) = (shape[0], shape[2], shape[3], shape[4]);
    cfg.check_divisible(h, w)?;
    let l_v = cfg.video_token_count(f, h, w)?;
    let map = Rc::new(patch_map(b, cfg, f, h, w));
    tape.remap(v, vec![b, l_v, cfg.patch_elems()], map)
}

/// Patchify then project with the learned linear map `proj_w [C*p_h*p_w, D]`
/// plus `proj_b [D]`.
pub fn patchify_video(tape: &mut Tape, v: Var, cfg: &PatchConfig, proj_w: Var, proj_b: Var) -> Result<Var> {
    let raw = patchify_raw(tape, v, cfg)?;
    let projected = tape.matmul(raw, proj_w)?;
    let b = tape.shape(projected)[0];
    let l = tape.shape(projected)[1];
    let dd = tape.shape(projected)[2];
    let bias = tape.reshape(proj_b, vec![1, 1, dd])?;
    let _ = (b, l);
    tape.add(projected, bias)
}

/// Inverse of [`patchify_raw`]: token rows of width `C*p_h*p_w` back to the
/// `[B, C_v, F, H, W]` layout. Exact bijection.
pub fn unpatchify_video(
    tape: &mut Tape,
    tokens: Var,
    cfg: &PatchConfig,
    frames: usize,
    h: usize,
    w: usize,
) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let l_v = cfg.video_token_count(frames, h, w)?;
    if shape.len() != 3 || shape[1] != l_v || shape[2] != cfg.patch_elems() {
        return Err(Error::geometry(
            "unpatchify",
            format!(
                "tokens {:?} inconsistent with F={} H={} W={} patch {}x{}",
                shape, frames, h, w, cfg.p_h, cfg.p_w
            ),
        ));
    }
    let b = shape[0];
    // patch_map sends video-flat -> token-flat; invert it for the gather.
    let fwd = patch_map(b, cfg, frames, h, w);
    let mut inv = vec![0usize; fwd.len()];
    for (token_flat, &video_flat) in fwd.iter().enumerate() {
        inv[video_flat] = token_flat;
    }
    tape.remap(tokens, vec![b, cfg.c_v, frames, h, w], Rc::new(inv))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AudioEmbedConfig {
    pub d_a: usize,
    pub d: usize,
    /// Depthwise kernel width of the positional encoder (odd).
    pub pos_kernel: usize,
    /// Number of depthwise conv layers, SiLU between them.
    pub pos_layers: usize,
}

/// Weight handles for the audio embedder: `w [d_a, D]`, `b [D]`, and one
/// `(w [D,K], b [D])` pair per positional conv layer.
pub struct AudioEmbedWeights {
    pub w: Var,
    pub b: Var,
    pub pos: Vec<(Var, Var)>,
}

/// `a W_a + b_a` plus the residual convolutional position encoding.
pub fn embed_audio(tape: &mut Tape, a: Var, cfg: &AudioEmbedConfig, wts: &AudioEmbedWeights) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_a {
        return Err(Error::shape(
            "embed_audio",
            format!("expected [B,L,{}], got {:?}", cfg.d_a, shape),
        ));
    }
    if wts.pos.len() != cfg.pos_layers {
        return Err(Error::invalid(
            "embed_audio",
            format!("{} conv layers, expected {}", wts.pos.len(), cfg.pos_layers),
        ));
    }
    let lin = tape.matmul(a, wts.w)?;
    let bias = tape.reshape(wts.b, vec![1, 1, cfg.d])?;
    let base = tape.add(lin, bias)?;
    let mut h = base;
    for (i, &(cw, cb)) in wts.pos.iter().enumerate() {
        h = tape.depthwise_conv1d(h, cw, cb)?;
        if i + 1 < wts.pos.len() {
            h = tape.silu(h)?;
        }
    }
    tape.add(base, h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeLayout {
    pub d_head: usize,
    /// Proportions for the (time, height, width) split of the head dim.
    pub ratios: (f64, f64, f64),
    pub base: f64,
}

impl Default for RopeLayout {
    fn default() -> Self {
        RopeLayout {
            d_head: 8,
            ratios: (2.0, 1.0, 1.0),
            base: 10_000.0,
        }
    }
}

impl RopeLayout {
    /// Split `d_head` into even `(d_t, d_h, d_w)` proportional to the
    /// ratios. Largest-remainder rounding over rotation pairs; leftover
    /// pairs go to the time axis first.
    pub fn split(&self) -> Result<(usize, usize, usize)> {
        if self.d_head % 2 != 0 {
            return Err(Error::invalid("rope_split", format!("odd d_head {}", self.d_head)));
        }
        let pairs = self.d_head / 2;
        let (rt, rh, rw) = self.ratios;
        let total = rt + rh + rw;
        if !(total > 0.0) || rt < 0.0 || rh < 0.0 || rw < 0.0 {
            return Err(Error::invalid("rope_split", format!("bad ratios {:?}", self.ratios)));
        }
        let quotas = [rt / total * pairs as f64, rh / total * pairs as f64, rw / total * pairs as f64];
        let mut alloc = [quotas[0] as usize, quotas[1] as usize, quotas[2] as usize];
        let mut frac: Vec<(usize, f64)> = quotas
            .iter()
            .enumerate()
            .map(|(i, q)| (i, q - alloc[i] as f64))
            .collect();
        // Tie-break toward the time axis (index order t, h, w).
        frac.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut leftover = pairs - alloc.iter().sum::<usize>();
        for &(idx, _) in frac.iter().cycle() {
            if leftover == 0 {
                break;
            }
            alloc[idx] += 1;
            leftover -= 1;
        }
        Ok((2 * alloc[0], 2 * alloc[1], 2 * alloc[2]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RopeKind {
    /// Per-token grid position (frame, row, col); token order frame-major.
    Video3d { frames: usize, rows: usize, cols: usize },
    Audio1d { len: usize },
}

fn axis_freqs(d_sub: usize, base: f64) -> Vec<f64> {
    (0..d_sub / 2)
        .map(|k| base.powf(-2.0 * k as f64 / d_sub as f64))
        .collect()
}

/// Angle table `[L, d_head/2]`; one angle per rotation pair per position.
/// For video the row is the concatenation `[theta_t(f); theta_h(i);
/// theta_w(j)]`; each sub-block follows the geometric frequency schedule of
/// its own width.
pub fn build_rope_angles(kind: RopeKind, layout: &RopeLayout) -> Result<Tensor> {
    if layout.d_head % 2 != 0 {
        return Err(Error::invalid("build_rope_angles", format!("odd d_head {}", layout.d_head)));
    }
    match kind {
        RopeKind::Audio1d { len } => {
            let freqs = axis_freqs(layout.d_head, layout.base);
            let pairs = layout.d_head / 2;
            let mut data = Vec::with_capacity(len * pairs);
            for l in 0..len {
                for &fr in &freqs {
                    data.push(l as f64 * fr);
                }
            }
            Tensor::new(vec![len, pairs], data)
        }
        RopeKind::Video3d { frames, rows, cols } => {
            let (dt, dh, dw) = layout.split()?;
            let (ft, fh, fw) = (
                axis_freqs(dt, layout.base),
                axis_freqs(dh, layout.base),
                axis_freqs(dw, layout.base),
            );
            let pairs = layout.d_head / 2;
            let len = frames * rows * cols;
            let mut data = Vec::with_capacity(len * pairs);
            for f in 0..frames {
                for i in 0..rows {
                    for j in 0..cols {
                        for &fr in &ft {
                            data.push(f as f64 * fr);
                        }
                        for &fr in &fh {
                            data.push(i as f64 * fr);
                        }
                        for &fr in &fw {
                            data.push(j as f64 * fr);
                        }
                    }
                }
            }
            Tensor::new(vec![len, pairs], data)
        }
    }
}

/// Rotate the tokens of `x` inside `span`; see [`Tape::rope`].
pub fn apply_rope(tape: &mut Tape, x: Var, angles: &Tensor, span_start: usize) -> Result<Var> {
    tape.rope(x, angles, span_start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn cfg(p: usize, c: usize, d: usize) -> PatchConfig {
        PatchConfig { p_h: p, p_w: p, c_v: c, d }
    }

    #[test]
    fn single_patch_token_count() {
        let c = cfg(4, 3, 8);
        assert_eq!(c.video_token_count(1, 4, 4).unwrap(), 1);
    }

    #[test]
    fn landscape_geometry_token_count() {
        // 512x288 at patch 16, 97 frames.
        let c = PatchConfig { p_h: 16, p_w: 16, c_v: 4, d: 64 };
        assert_eq!(c.video_token_count(97, 288, 512).unwrap(), 97 * 18 * 32);
        assert_eq!(97 * 18 * 32, 55_872);
    }

    #[test]
    fn divisibility_violation_errors() {
        let c = cfg(3, 1, 4);
        assert!(c.video_token_count(1, 4, 6).is_err());
    }

    #[test]
    fn identity_projection_reproduces_patches() {
        let mut rng = RngStream::new(31);
        let c = cfg(2, 2, 8); // patch_elems = 2*2*2 = 8 = D
        let v = Tensor::randn(&[1, 2, 2, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let vv = tape.constant(v);
        let w = tape.constant(Tensor::eye(8));
        let b = tape.constant(Tensor::zeros(&[8]));
        let raw = patchify_raw(&mut tape, vv, &c).unwrap();
        let tok = patchify_video(&mut tape, vv, &c, w, b).unwrap();
        assert!(tape.value(tok).bit_eq(tape.value(raw)));
    }

    #[test]
    fn patchify_unpatchify_roundtrip_exact() {
        let mut rng = RngStream::new(32);
        let c = cfg(2, 3, 12);
        let v = Tensor::randn(&[2, 3, 2, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let vv = tape.constant(v.clone());
        let raw = patchify_raw(&mut tape, vv, &c).unwrap();
        let back = unpatchify_video(&mut tape, raw, &c, 2, 4, 4).unwrap();
        assert!(tape.value(back).bit_eq(&v));
    }

    #[test]
    fn unpatchify_wrong_geometry_errors() {
        let c = cfg(2, 1, 4);
        let mut tape = Tape::new();
        let tok = tape.constant(Tensor::zeros(&[1, 5, 4]));
        assert!(unpatchify_video(&mut tape, tok, &c, 1, 4, 4).is_err());
    }

    #[test]
    fn token_order_is_frame_major_row_major() {
        // One channel, 1x(2x2) frames with patch 1: tokens must read
        // frame-by-frame, row-by-row.
        let c = cfg(1, 1, 1);
        let v = Tensor::new(vec![1, 1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let mut tape = Tape::new();
        let vv = tape.constant(v);
        let raw = patchify_raw(&mut tape, vv, &c).unwrap();
        assert_eq!(tape.value(raw).data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn audio_embed_zero_pos_is_pure_linear() {
        let mut rng = RngStream::new(33);
        let acfg = AudioEmbedConfig { d_a: 3, d: 4, pos_kernel: 3, pos_layers: 2 };
        let a = Tensor::randn(&[2, 5, 3], &mut rng);
        let w = Tensor::randn(&[3, 4], &mut rng);
        let b = Tensor::randn(&[4], &mut rng);

        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let pos: Vec<(Var, Var)> = (0..2)
            .map(|_| {
                (
                    tape.constant(Tensor::zeros(&[4, 3])),
                    tape.constant(Tensor::zeros(&[4])),
                )
            })
            .collect();
        let wts = AudioEmbedWeights { w: wv, b: bv, pos };
        let out = embed_audio(&mut tape, av, &acfg, &wts).unwrap();

        let lin = tape.matmul(av, wv).unwrap();
        let bias = tape.reshape(bv, vec![1, 1, 4]).unwrap();
        let expect = tape.add(lin, bias).unwrap();
        assert!(tape.value(out).bit_eq(tape.value(expect)));
    }

    #[test]
    fn audio_embed_identity_chain() {
        let mut rng = RngStream::new(34);
        let acfg = AudioEmbedConfig { d_a: 4, d: 4, pos_kernel: 3, pos_layers: 2 };
        let a = Tensor::randn(&[1, 6, 4], &mut rng);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let wv = tape.constant(Tensor::eye(4));
        let bv = tape.constant(Tensor::zeros(&[4]));
        let pos: Vec<(Var, Var)> = (0..2)
            .map(|_| {
                (
                    tape.constant(Tensor::zeros(&[4, 3])),
                    tape.constant(Tensor::zeros(&[4])),
                )
            })
            .collect();
        let wts = AudioEmbedWeights { w: wv, b: bv, pos };
        let out = embed_audio(&mut tape, av, &acfg, &wts).unwrap();
        assert!(tape.value(out).bit_eq(&a));
    }

    #[test]
    fn audio_embed_gradient_check() {
        use crate::gradcheck::{finite_diff, max_rel_err, FD_STEP};
        let mut rng = RngStream::new(35);
        let acfg = AudioEmbedConfig { d_a: 3, d: 4, pos_kernel: 3, pos_layers: 2 };
        let inputs = vec![
            Tensor::randn(&[1, 7, 3], &mut rng),
            Tensor::randn_scaled(&[3, 4], 0.5, &mut rng),
            Tensor::randn_scaled(&[4], 0.5, &mut rng),
            Tensor::randn_scaled(&[4, 3], 0.5, &mut rng),
            Tensor::randn_scaled(&[4], 0.5, &mut rng),
            Tensor::randn_scaled(&[4, 3], 0.5, &mut rng),
            Tensor::randn_scaled(&[4], 0.5, &mut rng),
        ];
        let run = |tape: &mut Tape, inp: &[Tensor]| -> Result<Var> {
            let a = tape.param(inp[0].clone());
            let w = tape.param(inp[1].clone());
            let b = tape.param(inp[2].clone());
            let pos = vec![
                (tape.param(inp[3].clone()), tape.param(inp[4].clone())),
                (tape.param(inp[5].clone()), tape.param(inp[6].clone())),
            ];
            let wts = AudioEmbedWeights { w, b, pos };
            let out = embed_audio(tape, a, &acfg, &wts)?;
            tape.mean_all(out)
        };
        let f = |inp: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let loss = run(&mut tape, inp)?;
            tape.value(loss).item()
        };
        let numeric = finite_diff(&f, &inputs, FD_STEP).unwrap();

        let mut tape = Tape::new();
        let loss = run(&mut tape, &inputs).unwrap();
        assert_eq!(tape.shape(loss), &[] as &[usize]);
        let grads = tape.backward(loss).unwrap();
        // Vars 0..6 were created as params in input order.
        let analytic: Vec<Tensor> = (0..7).map(|i| grads.get(Var(i)).unwrap().clone()).collect();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn split_matches_spec_example() {
        let layout = RopeLayout { d_head: 8, ratios: (2.0, 1.0, 1.0), base: 10_000.0 };
        assert_eq!(layout.split().unwrap(), (4, 2, 2));
    }

    #[test]
    fn split_always_even_and_exact() {
        for d_head in [2usize, 4, 6, 10, 16, 30, 64] {
            for ratios in [(2.0, 1.0, 1.0), (1.0, 1.0, 1.0), (5.0, 2.0, 3.0), (1.0, 0.0, 0.0)] {
                let layout = RopeLayout { d_head, ratios, base: 10_000.0 };
                let (t, h, w) = layout.split().unwrap();
                assert_eq!(t + h + w, d_head);
                assert!(t % 2 == 0 && h % 2 == 0 && w % 2 == 0);
            }
        }
    }

    #[test]
    fn odd_head_dim_errors() {
        let layout = RopeLayout { d_head: 7, ratios: (2.0, 1.0, 1.0), base: 10_000.0 };
        assert!(layout.split().is_err());
        assert!(build_rope_angles(RopeKind::Audio1d { len: 4 }, &layout).is_err());
    }

    #[test]
    fn zero_position_angles_are_zero() {
        let layout = RopeLayout { d_head: 8, ratios: (2.0, 1.0, 1.0), base: 10_000.0 };
        let ang = build_rope_angles(
            RopeKind::Video3d { frames: 2, rows: 2, cols: 2 },
            &layout,
        )
        .unwrap();
        // First token sits at (0,0,0): identity rotation.
        for p in 0..4 {
            assert_eq!(ang.data()[p], 0.0);
        }
    }

    #[test]
    fn video_angle_vector_lengths_follow_split() {
        let layout = RopeLayout { d_head: 8, ratios: (2.0, 1.0, 1.0), base: 10_000.0 };
        let ang = build_rope_angles(RopeKind::Video3d { frames: 2, rows: 3, cols: 4 }, &layout).unwrap();
        assert_eq!(ang.shape(), &[2 * 3 * 4, 4]);
        // Token at (f=1, i=0, j=0): only the first d_t/2 = 2 pair angles move.
        let row = &ang.data()[(1 * 3 * 4) * 4..(1 * 3 * 4) * 4 + 4];
        assert!(row[0] != 0.0 && row[1] != 0.0);
        assert_eq!(row[2], 0.0);
        assert_eq!(row[3], 0.0);
    }

    #[test]
    fn audio_pair0_position1_is_one_radian() {
        let layout = RopeLayout { d_head: 8, ratios: (2.0, 1.0, 1.0), base: 10_000.0 };
        let ang = build_rope_angles(RopeKind::Audio1d { len: 2 }, &layout).unwrap();
        assert_eq!(ang.data()[4 + 0], 1.0); // position l=1, pair k=0
    }

    #[test]
    fn rope_inner_product_depends_on_offset_only() {
        // Exhaustive over positions 0..8, d=4: <rope(q,m), rope(k,n)> is a
        // function of m-n alone.
        let layout = RopeLayout { d_head: 4, ratios: (1.0, 1.0, 1.0), base: 10_000.0 };
        let ang = build_rope_angles(RopeKind::Audio1d { len: 8 }, &layout).unwrap();
        let mut rng = RngStream::new(36);
        let q = Tensor::randn(&[4], &mut rng);
        let k = Tensor::randn(&[4], &mut rng);

        let rot = |v: &Tensor, pos: usize| -> Vec<f64> {
            let mut out = v.data().to_vec();
            for p in 0..2 {
                let theta = ang.data()[pos * 2 + p];
                let (c, s) = (theta.cos(), theta.sin());
                let (x1, x2) = (out[2 * p], out[2 * p + 1]);
                out[2 * p] = x1 * c - x2 * s;
                out[2 * p + 1] = x1 * s + x2 * c;
            }
            out
        };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

        let mut by_offset: std::collections::HashMap<i64, f64> = std::collections::HashMap::new();
        for m in 0..8usize {
            for n in 0..8usize {
                let d = dot(&rot(&q, m), &rot(&k, n));
                let key = m as i64 - n as i64;
                if let Some(prev) = by_offset.insert(key, d) {
                    assert!((prev - d).abs() < 1e-9, "offset {key}: {prev} vs {d}");
                }
            }
        }
    }
}
