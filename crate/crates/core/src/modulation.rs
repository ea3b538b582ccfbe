//! Time embedding and six-slot AdaLN modulation.
//!
//! A sinusoidal encoding of the flow time feeds a two-layer MLP to produce
//! the time embedding `[B, D]`. Each block branch owns a slot MLP that maps
//! the time embedding to six `[B, 1, D]` modulation slots in fixed order:
//! shift/scale/gate for the attention branch, then shift/scale/gate for the
//! MLP branch. Gates start at exactly zero (the slot MLP's final layer is
//! zero-initialized), which makes every block the identity on its residual
//! path at init.

use crate::error::{Error, Result};
use crate::nn::linear;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// LayerNorm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-6;

/// Sinusoidal frequency count of the time encoder.
pub const TIME_FREQS: usize = 256;

/// Time scaling before the sinusoid so flow times in [0,1] sweep a useful
/// range of phases.
const TIME_SCALE: f64 = 1000.0;

/// Sinusoidal features `[B, 2*n_freq]` for flow times `sigma` in [0,1].
/// Frequencies are geometrically spaced over four decades.
pub fn time_features(sigma: &[f64], n_freq: usize) -> Tensor {
    let half = n_freq;
    let mut data = Vec::with_capacity(sigma.len() * 2 * half);
    for &s in sigma {
        let t = s * TIME_SCALE;
        for k in 0..half {
            let freq = (-(10_000.0f64.ln()) * k as f64 / half as f64).exp();
            data.push((t * freq).cos());
        }
        for k in 0..half {
            let freq = (-(10_000.0f64.ln()) * k as f64 / half as f64).exp();
            data.push((t * freq).sin());
        }
    }
    Tensor::new(vec![sigma.len(), 2 * half], data).expect("time feature shape")
}

/// Weight handles of the time-embedding MLP:
/// `w1 [2*n_freq, D]`, `b1 [D]`, `w2 [D, D]`, `b2 [D]`.
#[derive(Debug, Clone, Copy)]
pub struct TimeEmbedWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Time embedding `t(sigma) in [B, D]`.
pub fn time_embed(
    tape: &mut Tape,
    sigma: &[f64],
    n_freq: usize,
    wts: &TimeEmbedWeights,
) -> Result<Var> {
    if let Some(&bad) = sigma.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::invalid("time_embed", format!("sigma {} outside [0,1]", bad)));
    }
    let feats = tape.constant(time_features(sigma, n_freq));
    let h = linear(tape, feats, wts.w1, wts.b1)?;
    let h = tape.silu(h)?;
    linear(tape, h, wts.w2, wts.b2)
}

/// Six modulation slots, each `[B, 1, D]`.
#[derive(Debug, Clone, Copy)]
pub struct ModulationSlots {
    pub shift_attn: Var,
    pub scale_attn: Var,
    pub gate_attn: Var,
    pub shift_mlp: Var,
    pub scale_mlp: Var,
    pub gate_mlp: Var,
}

/// Slot MLP weights: SiLU then `w [D, 6D]`, `b [6D]`.
#[derive(Debug, Clone, Copy)]
pub struct SlotMlpWeights {
    pub w: Var,
    pub b: Var,
}

/// Produce the six slots from the time embedding, split in fixed order
/// (shift_attn, scale_attn, gate_attn, shift_mlp, scale_mlp, gate_mlp).
pub fn compute_slots(tape: &mut Tape, t_emb: Var, wts: &SlotMlpWeights) -> Result<Var6> {
    let shape = tape.shape(t_emb).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("compute_slots", format!("t_emb {:?}", shape)));
    }
    let (b, d) = (shape[0], shape[1]);
    let wd = tape.shape(wts.w).to_vec();
    if wd != [d, 6 * d] {
        return Err(Error::shape(
            "compute_slots",
            format!("slot weight {:?}, expected [{}, {}]", wd, d, 6 * d),
        ));
    }
    let h = tape.silu(t_emb)?;
    let six = linear(tape, h, wts.w, wts.b)?;
    let six = tape.reshape(six, vec![b, 1, 6 * d])?;
    let mut slots = [six; 6];
    for (i, slot) in slots.iter_mut().enumerate() {
        *slot = tape.narrow(six, 2, i * d, d)?;
    }
    Ok(ModulationSlots {
        shift_attn: slots[0],
        scale_attn: slots[1],
        gate_attn: slots[2],
        shift_mlp: slots[3],
        scale_mlp: slots[4],
        gate_mlp: slots[5],
    })
}

type Var6 = ModulationSlots;

/// `(1 + scale) * LN(h) + shift`, slots broadcast over the token axis.
pub fn modulated_ln(tape: &mut Tape, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let normed = tape.layernorm_noaffine(h, LN_EPS)?;
    let scale1 = tape.add_scalar(scale, 1.0)?;
    let scaled = tape.mul(normed, scale1)?;
    tape.add(scaled, shift)
}

/// `h_in + gate * delta`.
pub fn gated_residual(tape: &mut Tape, h_in: Var, delta: Var, gate: Var) -> Result<Var> {
    let gated = tape.mul(delta, gate)?;
    tape.add(h_in, gated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn time_weights(tape: &mut Tape, d: usize, n_freq: usize, rng: &mut RngStream) -> TimeEmbedWeights {
        TimeEmbedWeights {
            w1: tape.param(Tensor::randn_scaled(&[2 * n_freq, d], 0.1, rng)),
            b1: tape.param(Tensor::zeros(&[d])),
            w2: tape.param(Tensor::randn_scaled(&[d, d], 0.1, rng)),
            b2: tape.param(Tensor::zeros(&[d])),
        }
    }

    #[test]
    fn time_embed_deterministic() {
        let mut rng = RngStream::new(41);
        let mut tape = Tape::new();
        let wts = time_weights(&mut tape, 8, 16, &mut rng);
        let a = time_embed(&mut tape, &[0.0, 0.0], 16, &wts).unwrap();
        let row0 = tape.value(a).data()[..8].to_vec();
        let row1 = tape.value(a).data()[8..].to_vec();
        assert_eq!(row0, row1);
    }

    #[test]
    fn time_embed_distinguishes_endpoints() {
        let mut rng = RngStream::new(42);
        let mut tape = Tape::new();
        let wts = time_weights(&mut tape, 8, 16, &mut rng);
        let e = time_embed(&mut tape, &[0.0, 1.0], 16, &wts).unwrap();
        let d = tape.value(e).data();
        let diff: f64 = (0..8).map(|i| (d[i] - d[8 + i]).abs()).sum();
        assert!(diff > 1e-6, "sigma=0 and sigma=1 should embed differently, diff {diff}");
    }

    #[test]
    fn time_embed_rejects_out_of_range() {
        let mut rng = RngStream::new(43);
        let mut tape = Tape::new();
        let wts = time_weights(&mut tape, 4, 8, &mut rng);
        assert!(time_embed(&mut tape, &[1.5], 8, &wts).is_err());
    }

    #[test]
    fn zero_slot_mlp_gives_zero_slots() {
        let mut tape = Tape::new();
        let t_emb = tape.constant(Tensor::full(&[2, 4], 0.7));
        let wts = SlotMlpWeights {
            w: tape.constant(Tensor::zeros(&[4, 24])),
            b: tape.constant(Tensor::zeros(&[24])),
        };
        let slots = compute_slots(&mut tape, t_emb, &wts).unwrap();
        for v in [
            slots.shift_attn,
            slots.scale_attn,
            slots.gate_attn,
            slots.shift_mlp,
            slots.scale_mlp,
            slots.gate_mlp,
        ] {
            assert_eq!(tape.shape(v), &[2, 1, 4]);
            assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn bias_only_slot_addressing() {
        let d = 4;
        let mut tape = Tape::new();
        let t_emb = tape.constant(Tensor::zeros(&[1, d]));
        let mut bias = Tensor::zeros(&[6 * d]);
        for i in 2 * d..3 * d {
            bias.data_mut()[i] = 1.0; // third slot = attention gate
        }
        let wts = SlotMlpWeights {
            w: tape.constant(Tensor::zeros(&[d, 6 * d])),
            b: tape.constant(bias),
        };
        let slots = compute_slots(&mut tape, t_emb, &wts).unwrap();
        assert!(tape.value(slots.gate_attn).data().iter().all(|&x| x == 1.0));
        for v in [slots.shift_attn, slots.scale_attn, slots.shift_mlp, slots.scale_mlp, slots.gate_mlp] {
            assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn modulated_ln_neutral_slots_is_plain_layernorm() {
        let mut rng = RngStream::new(44);
        let x = Tensor::randn(&[2, 3, 8], &mut rng);
        let mut tape = Tape::new();
        let h = tape.constant(x);
        let zero = tape.constant(Tensor::zeros(&[2, 1, 8]));
        let out = modulated_ln(&mut tape, h, zero, zero).unwrap();
        let plain = tape.layernorm_noaffine(h, LN_EPS).unwrap();
        assert!(tape.value(out).bit_eq(tape.value(plain)));
    }

    #[test]
    fn modulated_ln_annihilating_scale_yields_shift() {
        let mut rng = RngStream::new(45);
        let x = Tensor::randn(&[1, 4, 6], &mut rng);
        let mut tape = Tape::new();
        let h = tape.constant(x);
        let shift = tape.constant(Tensor::full(&[1, 1, 6], 2.5));
        let neg1 = tape.constant(Tensor::full(&[1, 1, 6], -1.0));
        let out = modulated_ln(&mut tape, h, shift, neg1).unwrap();
        for &v in tape.value(out).data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn modulated_ln_matches_manual_formula() {
        let mut rng = RngStream::new(46);
        let x = Tensor::randn(&[2, 3, 8], &mut rng);
        let shift = Tensor::randn(&[2, 1, 8], &mut rng);
        let scale = Tensor::randn(&[2, 1, 8], &mut rng);
        let mut tape = Tape::new();
        let h = tape.constant(x);
        let sh = tape.constant(shift.clone());
        let sc = tape.constant(scale.clone());
        let out = modulated_ln(&mut tape, h, sh, sc).unwrap();

        let normed = tape.layernorm_noaffine(h, LN_EPS).unwrap();
        let nv = tape.value(normed).clone();
        let ov = tape.value(out);
        for b in 0..2 {
            for l in 0..3 {
                for d in 0..8 {
                    let i = (b * 3 + l) * 8 + d;
                    let manual = (1.0 + scale.data()[b * 8 + d]) * nv.data()[i] + shift.data()[b * 8 + d];
                    assert!((ov.data()[i] - manual).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gated_residual_zero_gate_is_identity_bitwise() {
        let mut rng = RngStream::new(47);
        let x = Tensor::randn(&[2, 3, 4], &mut rng);
        let delta = Tensor::randn(&[2, 3, 4], &mut rng);
        let mut tape = Tape::new();
        let h = tape.constant(x.clone());
        let dl = tape.constant(delta);
        let g = tape.constant(Tensor::zeros(&[2, 1, 4]));
        let out = gated_residual(&mut tape, h, dl, g).unwrap();
        assert!(tape.value(out).bit_eq(&x));
    }

    #[test]
    fn gated_residual_unit_gate_is_plain_residual() {
        let mut rng = RngStream::new(48);
        let x = Tensor::randn(&[1, 2, 4], &mut rng);
        let delta = Tensor::randn(&[1, 2, 4], &mut rng);
        let mut tape = Tape::new();
        let h = tape.constant(x.clone());
        let dl = tape.constant(delta.clone());
        let g = tape.constant(Tensor::full(&[1, 1, 4], 1.0));
        let out = gated_residual(&mut tape, h, dl, g).unwrap();
        let expect = x.add(&delta).unwrap();
        assert!(tape.value(out).bit_eq(&expect));
    }

    #[test]
    fn gated_residual_half_gate_arithmetic() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[1, 1, 2]));
        let dl = tape.constant(Tensor::full(&[1, 1, 2], 2.0));
        let g = tape.constant(Tensor::full(&[1, 1, 2], 0.5));
        let out = gated_residual(&mut tape, h, dl, g).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 1.0]);
    }
}
