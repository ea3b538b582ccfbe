//! The three attention block families.
//!
//! All of them share one multi-head attention core with span-restricted
//! rotary embeddings:
//!
//! * dual-stream block: joint attention over `[x; y]` (modality + text),
//!   gated residual writes back to both streams;
//! * single-stream block with read-only text: self-attention, then
//!   cross-attention into a frozen text context, then an AdaLN MLP;
//! * omni-block: joint attention over `[v; y; a]` with per-modality gated
//!   updates, supporting span masking or dropping for robustness training.
//!
//! With zero gates (and a zero cross-attention output projection for the
//! read-only family) every block is the identity on its residual path.

use crate::error::{Error, Result};
use crate::modulation::{compute_slots, gated_residual, modulated_ln, ModulationSlots, SlotMlpWeights, LN_EPS};
use crate::nn::Mlp;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub n_heads: usize,
}

/// Attention logit scaling. `PerHead` is the standard `1/sqrt(d_head)`;
/// `FullWidth` is the literal `1/sqrt(D)` variant kept for A/B comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnScale {
    PerHead,
    FullWidth,
}

impl AttnScale {
    pub fn factor(self, d: usize, n_heads: usize) -> f64 {
        match self {
            AttnScale::PerHead => 1.0 / ((d / n_heads) as f64).sqrt(),
            AttnScale::FullWidth => 1.0 / (d as f64).sqrt(),
        }
    }
}

/// A rotary span over a token sequence: tokens `[start, start + angles.len)`
/// rotate by the table, everything else is untouched.
#[derive(Debug, Clone)]
pub struct RopeSpan {
    pub start: usize,
    pub angles: Tensor,
}

/// Contiguous modality spans over a concatenated sequence, fixed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanMap {
    pub video: (usize, usize),
    pub text: (usize, usize),
    pub audio: (usize, usize),
}

impl SpanMap {
    /// Spans for `[v; y; a]` with the given lengths.
    pub fn new(l_v: usize, l_y: usize, l_a: usize) -> Self {
        SpanMap {
            video: (0, l_v),
            text: (l_v, l_y),
            audio: (l_v + l_y, l_a),
        }
    }

    pub fn total(&self) -> usize {
        self.video.1 + self.text.1 + self.audio.1
    }
}

/// Multi-head attention over already-projected `q`, `k`, `v` of shape
/// `[B, L, D]` (`k`/`v` may have a different length than `q`). Returns the
/// merged context `[B, L_q, D]` (before any output projection) and the
/// attention probabilities `[B, N_h, L_q, L_k]`.
pub fn multihead_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    scale: f64,
    rope_q: &[RopeSpan],
    rope_k: &[RopeSpan],
    key_mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    let vs = tape.shape(v).to_vec();
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(Error::shape("attention", format!("q {:?} k {:?} v {:?}", qs, ks, vs)));
    }
    let (b, l_q, d) = (qs[0], qs[1], qs[2]);
    let l_k = ks[1];
    if ks[0] != b || vs[0] != b || ks[2] != d || vs[2] != d || vs[1] != l_k {
        return Err(Error::shape("attention", format!("q {:?} k {:?} v {:?}", qs, ks, vs)));
    }
    if d % n_heads != 0 {
        return Err(Error::shape("attention", format!("width {} not divisible by {} heads", d, n_heads)));
    }
    let dh = d / n_heads;

    let split = |tape: &mut Tape, x: Var, l: usize| -> Result<Var> {
        let r = tape.reshape(x, vec![b, l, n_heads, dh])?;
        tape.permute(r, &[0, 2, 1, 3])
    };
    let mut qh = split(tape, q, l_q)?;
    let mut kh = split(tape, k, l_k)?;
    let vh = split(tape, v, l_k)?;

    for span in rope_q {
        qh = tape.rope(qh, &span.angles, span.start)?;
    }
    for span in rope_k {
        kh = tape.rope(kh, &span.angles, span.start)?;
    }

    let kt = tape.transpose_last2(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, scale)?;
    let probs = match key_mask {
        Some(mask) => {
            if mask.len() != l_k {
                return Err(Error::shape(
                    "attention",
                    format!("mask len {} vs keys {}", mask.len(), l_k),
                ));
            }
            tape.masked_softmax_lastdim(scores, mask)?
        }
        None => tape.softmax_lastdim(scores)?,
    };
    let ctx = tape.matmul(probs, vh)?;
    let merged = tape.permute(ctx, &[0, 2, 1, 3])?;
    let merged = tape.reshape(merged, vec![b, l_q, d])?;
    Ok((merged, probs))
}

/// Joint attention over a concatenated sequence: project, rotate the listed
/// spans of Q and K, attend, merge heads, project out. With a mask, masked
/// positions neither receive nor contribute attention (their output rows are
/// zero and their keys are excluded).
pub fn joint_attention(
    tape: &mut Tape,
    z: Var,
    w: &AttentionWeights,
    rope_plan: &[RopeSpan],
    attn_mask: Option<&[bool]>,
    scale: AttnScale,
) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("joint_attention", format!("z {:?}", shape)));
    }
    let (_b, l, d) = (shape[0], shape[1], shape[2]);
    let q = tape.matmul(z, w.w_q)?;
    let k = tape.matmul(z, w.w_k)?;
    let v = tape.matmul(z, w.w_v)?;
    let factor = scale.factor(d, w.n_heads);
    let (ctx, _probs) = multihead_attention(tape, q, k, v, w.n_heads, factor, rope_plan, rope_plan, attn_mask)?;
    let ctx = if let Some(mask) = attn_mask {
        // Masked queries receive no attention: zero their rows.
        let mut m = Tensor::zeros(&[1, l, 1]);
        for (i, &keep) in mask.iter().enumerate() {
            m.data_mut()[i] = if keep { 1.0 } else { 0.0 };
        }
        let mv = tape.constant(m);
        tape.mul(ctx, mv)?
    } else {
        ctx
    };
    tape.matmul(ctx, w.w_o)
}

// ---- dual-stream ------------------------------------------------------------

/// Weights of one dual-stream block: shared joint attention plus per-stream
/// MLPs and slot MLPs.
#[derive(Debug, Clone, Copy)]
pub struct DualStreamWeights {
    pub attn: AttentionWeights,
    pub mlp_x: Mlp,
    pub mlp_y: Mlp,
    pub slots_x: SlotMlpWeights,
    pub slots_y: SlotMlpWeights,
}

/// Joint attention over `[x; y]`, gated residual updates to both streams,
/// then per-stream AdaLN MLPs on the post-attention state.
pub fn dual_stream_block(
    tape: &mut Tape,
    x: Var,
    y: Var,
    t_emb: Var,
    wts: &DualStreamWeights,
    rope_x: Option<&Tensor>,
    scale: AttnScale,
) -> Result<(Var, Var)> {
    let l_x = tape.shape(x)[1];
    let l_y = tape.shape(y)[1];
    if let Some(angles) = rope_x {
        if angles.shape()[0] != l_x {
            return Err(Error::shape(
                "dual_stream_block",
                format!("rope table {} rows for {} modality tokens", angles.shape()[0], l_x),
            ));
        }
    }
    let sx = compute_slots(tape, t_emb, &wts.slots_x)?;
    let sy = compute_slots(tape, t_emb, &wts.slots_y)?;

    let x_in = modulated_ln(tape, x, sx.shift_attn, sx.scale_attn)?;
    let y_in = modulated_ln(tape, y, sy.shift_attn, sy.scale_attn)?;
    let z = tape.concat(&[x_in, y_in], 1)?;
    let plan: Vec<RopeSpan> = rope_x
        .map(|a| vec![RopeSpan { start: 0, angles: a.clone() }])
        .unwrap_or_default();
    let o = joint_attention(tape, z, &wts.attn, &plan, None, scale)?;
    let o_x = tape.narrow(o, 1, 0, l_x)?;
    let o_y = tape.narrow(o, 1, l_x, l_y)?;

    let x_mid = gated_residual(tape, x, o_x, sx.gate_attn)?;
    let y_mid = gated_residual(tape, y, o_y, sy.gate_attn)?;

    let x_out = adaln_mlp(tape, x_mid, &sx, &wts.mlp_x)?;
    let y_out = adaln_mlp(tape, y_mid, &sy, &wts.mlp_y)?;
    Ok((x_out, y_out))
}

fn adaln_mlp(tape: &mut Tape, h: Var, slots: &ModulationSlots, mlp: &Mlp) -> Result<Var> {
    if tape.shape(h)[1] == 0 {
        // Empty stream: nothing to update.
        return Ok(h);
    }
    let h_in = modulated_ln(tape, h, slots.shift_mlp, slots.scale_mlp)?;
    let delta = mlp.forward(tape, h_in)?;
    gated_residual(tape, h, delta, slots.gate_mlp)
}

// ---- read-only-text (Wan-style) ----------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct WanBlockWeights {
    pub self_attn: AttentionWeights,
    pub cross_q: Var,
    pub cross_k: Var,
    pub cross_v: Var,
    pub cross_o: Var,
    pub mlp: Mlp,
    pub slots: SlotMlpWeights,
}

/// Self-attention with RoPE and a gated residual, LayerNormed cross-attention
/// into the read-only text context with an ungated residual, then the AdaLN
/// MLP. The text stream is never written.
pub fn wan_block(
    tape: &mut Tape,
    x: Var,
    y_frozen: Var,
    t_emb: Var,
    wts: &WanBlockWeights,
    rope: Option<&Tensor>,
    scale: AttnScale,
) -> Result<Var> {
    let d = *tape.shape(x).last().expect("rank 3");
    let slots = compute_slots(tape, t_emb, &wts.slots)?;

    let x_msa = modulated_ln(tape, x, slots.shift_attn, slots.scale_attn)?;
    let plan: Vec<RopeSpan> = rope
        .map(|a| vec![RopeSpan { start: 0, angles: a.clone() }])
        .unwrap_or_default();
    let self_out = joint_attention(tape, x_msa, &wts.self_attn, &plan, None, scale)?;
    let x_tilde = gated_residual(tape, x, self_out, slots.gate_attn)?;

    let q_in = tape.layernorm_noaffine(x_tilde, LN_EPS)?;
    let k_in = tape.layernorm_noaffine(y_frozen, LN_EPS)?;
    let q = tape.matmul(q_in, wts.cross_q)?;
    let k = tape.matmul(k_in, wts.cross_k)?;
    let v = tape.matmul(y_frozen, wts.cross_v)?;
    let factor = scale.factor(d, wts.self_attn.n_heads);
    let (cross_ctx, _) = multihead_attention(tape, q, k, v, wts.self_attn.n_heads, factor, &[], &[], None)?;
    let cross_out = tape.matmul(cross_ctx, wts.cross_o)?;
    let x_hat = tape.add(x_tilde, cross_out)?;

    adaln_mlp(tape, x_hat, &slots, &wts.mlp)
}

// ---- omni ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanTarget {
    Video,
    Audio,
}

/// Robustness mode of an omni-block. `Mask` zeroes the target span's keys
/// and values before attention; `Drop` removes the span from the attention
/// entirely (its stream passes through unchanged). Never both modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmniMode {
    None,
    Mask(SpanTarget),
    Drop(SpanTarget),
}

#[derive(Debug, Clone, Copy)]
pub struct OmniBlockWeights {
    pub attn: AttentionWeights,
    pub mlp_v: Mlp,
    pub mlp_y: Mlp,
    pub mlp_a: Mlp,
    pub slots_v: SlotMlpWeights,
    pub slots_y: SlotMlpWeights,
    pub slots_a: SlotMlpWeights,
}

/// Tri-modal joint attention over `[v; y; a]` followed by per-modality gated
/// attention residuals and gated AdaLN MLPs.
#[allow(clippy::too_many_arguments)]
pub fn omni_block(
    tape: &mut Tape,
    v: Var,
    y: Var,
    a: Var,
    t_emb: Var,
    wts: &OmniBlockWeights,
    rope_v: &Tensor,
    rope_a: &Tensor,
    scale: AttnScale,
    mode: OmniMode,
) -> Result<(Var, Var, Var)> {
    let l_v = tape.shape(v)[1];
    let l_y = tape.shape(y)[1];
    let l_a = tape.shape(a)[1];
    let d = *tape.shape(v).last().expect("rank 3");
    if rope_v.shape()[0] != l_v || rope_a.shape()[0] != l_a {
        return Err(Error::shape(
            "omni_block",
            format!(
                "rope tables ({}, {}) rows for spans ({}, {})",
                rope_v.shape()[0],
                rope_a.shape()[0],
                l_v,
                l_a
            ),
        ));
    }

    let sv = compute_slots(tape, t_emb, &wts.slots_v)?;
    let sy = compute_slots(tape, t_emb, &wts.slots_y)?;
    let sa = compute_slots(tape, t_emb, &wts.slots_a)?;

    let v_in = modulated_ln(tape, v, sv.shift_attn, sv.scale_attn)?;
    let y_in = modulated_ln(tape, y, sy.shift_attn, sy.scale_attn)?;
    let a_in = modulated_ln(tape, a, sa.shift_attn, sa.scale_attn)?;

    let dropped = match mode {
        OmniMode::Drop(t) => Some(t),
        _ => None,
    };

    // Spans that participate in attention, in fixed (v, y, a) order.
    let mut parts: Vec<Var> = Vec::new();
    let mut plan: Vec<RopeSpan> = Vec::new();
    let mut offset = 0usize;
    if dropped != Some(SpanTarget::Video) {
        parts.push(v_in);
        plan.push(RopeSpan { start: offset, angles: rope_v.clone() });
        offset += l_v;
    }
    parts.push(y_in);
    offset += l_y;
    if dropped != Some(SpanTarget::Audio) {
        parts.push(a_in);
        plan.push(RopeSpan { start: offset, angles: rope_a.clone() });
    }
    let z = tape.concat(&parts, 1)?;
    let l_total = tape.shape(z)[1];

    let q = tape.matmul(z, wts.attn.w_q)?;
    let mut k = tape.matmul(z, wts.attn.w_k)?;
    let mut kv_v = tape.matmul(z, wts.attn.w_v)?;
    if let OmniMode::Mask(target) = mode {
        // Zero the masked span's keys and values; the span still emits
        // queries and receives its own update.
        let (start, len) = match target {
            SpanTarget::Video => (0, l_v),
            SpanTarget::Audio => (l_total - l_a, l_a),
        };
        let mut m = Tensor::full(&[1, l_total, 1], 1.0);
        for i in start..start + len {
            m.data_mut()[i] = 0.0;
        }
        let mv = tape.constant(m);
        k = tape.mul(k, mv)?;
        kv_v = tape.mul(kv_v, mv)?;
    }
    let factor = scale.factor(d, wts.attn.n_heads);
    let (ctx, _) = multihead_attention(tape, q, k, kv_v, wts.attn.n_heads, factor, &plan, &plan, None)?;
    let o = tape.matmul(ctx, wts.attn.w_o)?;

    // Split the output back into participating spans.
    let mut cursor = 0usize;
    let o_v = if dropped != Some(SpanTarget::Video) {
        let s = tape.narrow(o, 1, cursor, l_v)?;
        cursor += l_v;
        Some(s)
    } else {
        None
    };
    let o_y = tape.narrow(o, 1, cursor, l_y)?;
    cursor += l_y;
    let o_a = if dropped != Some(SpanTarget::Audio) {
        Some(tape.narrow(o, 1, cursor, l_a)?)
    } else {
        None
    };

    let v_out = match o_v {
        Some(ov) => {
            let mid = gated_residual(tape, v, ov, sv.gate_attn)?;
            adaln_mlp(tape, mid, &sv, &wts.mlp_v)?
        }
        None => v,
    };
    let y_mid = gated_residual(tape, y, o_y, sy.gate_attn)?;
    let y_out = adaln_mlp(tape, y_mid, &sy, &wts.mlp_y)?;
    let a_out = match o_a {
        Some(oa) => {
            let mid = gated_residual(tape, a, oa, sa.gate_attn)?;
            adaln_mlp(tape, mid, &sa, &wts.mlp_a)?
        }
        None => a,
    };
    Ok((v_out, y_out, a_out))
}
