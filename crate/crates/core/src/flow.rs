//! Flow-matching objective and the training step.
//!
//! Training draws a flow time, interpolates clean latents toward Gaussian
//! noise, and regresses the model's joint velocity onto the difference
//! `noise - data` under a weighted MSE. Caption dropout and the decaying
//! modality mask/drop schedule ride along. All randomness flows through
//! named counter streams, so a step is a pure function of `(seed, step)`.

use std::collections::BTreeMap;

use crate::blocks::{OmniMode, SpanTarget};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    ConstantOne,
    SigmaOneMinusSigma,
}

impl Weighting {
    pub fn eval(self, sigma: f64) -> f64 {
        match self {
            Weighting::ConstantOne => 1.0,
            Weighting::SigmaOneMinusSigma => sigma * (1.0 - sigma),
        }
    }
}

/// Which robustness mechanism the omni stack trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolicy {
    Mask,
    Drop,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub weighting: Weighting,
    /// Caption dropout probability.
    pub p_cap: f64,
    /// Decay horizon of the modality mask schedule.
    pub s_max: u64,
    pub modality_mode: MaskPolicy,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub steps: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            weighting: Weighting::ConstantOne,
            p_cap: 0.1,
            s_max: 1000,
            modality_mode: MaskPolicy::Mask,
            learning_rate: 1e-4,
            warmup_steps: 0,
            batch_size: 4,
            steps: 100,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_cap) {
            return Err(Error::invalid("trainer_config", format!("p_cap {}", self.p_cap)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("trainer_config", "batch_size 0"));
        }
        if self.s_max == 0 {
            return Err(Error::invalid("trainer_config", "s_max 0"));
        }
        Ok(())
    }
}

/// One training draw: clean latents, their noise, the flow time, and the
/// interpolants `(1-sigma) x + sigma eps`.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub v_gt: Tensor,
    pub a_gt: Tensor,
    pub eps_v: Tensor,
    pub eps_a: Tensor,
    pub sigma: f64,
    pub v_sigma: Tensor,
    pub a_sigma: Tensor,
}

impl FlowSample {
    /// Build the interpolant at a given flow time with noise drawn from
    /// `noise_rng`.
    pub fn at_sigma(v_gt: &Tensor, a_gt: &Tensor, sigma: f64, noise_rng: &mut RngStream) -> Result<FlowSample> {
        if !v_gt.is_finite() || !a_gt.is_finite() {
            return Err(Error::NonFinite { op: "make_flow_sample" });
        }
        let eps_v = Tensor::randn(v_gt.shape(), noise_rng);
        let eps_a = Tensor::randn(a_gt.shape(), noise_rng);
        let v_sigma = v_gt.lerp(&eps_v, sigma)?;
        let a_sigma = a_gt.lerp(&eps_a, sigma)?;
        Ok(FlowSample {
            v_gt: v_gt.clone(),
            a_gt: a_gt.clone(),
            eps_v,
            eps_a,
            sigma,
            v_sigma,
            a_sigma,
        })
    }
}

/// Draw `sigma` uniformly and form the interpolant.
pub fn make_flow_sample(
    v_gt: &Tensor,
    a_gt: &Tensor,
    sigma_rng: &mut RngStream,
    noise_rng: &mut RngStream,
) -> Result<FlowSample> {
    let sigma = sigma_rng.uniform();
    FlowSample::at_sigma(v_gt, a_gt, sigma, noise_rng)
}

/// Rectified-flow regression target `(eps_v - v_gt, eps_a - a_gt)`.
pub fn target_velocity(sample: &FlowSample) -> Result<(Tensor, Tensor)> {
    Ok((sample.eps_v.sub(&sample.v_gt)?, sample.eps_a.sub(&sample.a_gt)?))
}

/// Weighted flow-matching loss on the tape. Per sample: mean squared error
/// over each modality's elements, modality terms summed, scaled by
/// `w(sigma)`, then averaged over the batch.
pub fn fm_loss(
    tape: &mut Tape,
    pred_v: Var,
    pred_a: Var,
    target_v: Var,
    target_a: Var,
    weights: &[f64],
) -> Result<Var> {
    let b = tape.shape(pred_v)[0];
    if tape.shape(pred_a)[0] != b || weights.len() != b {
        return Err(Error::shape(
            "fm_loss",
            format!("batch {} vs {} vs {} weights", b, tape.shape(pred_a)[0], weights.len()),
        ));
    }
    let dv = tape.sub(pred_v, target_v)?;
    let dv2 = tape.mul(dv, dv)?;
    let per_v = tape.mean_per_batch(dv2)?;
    let da = tape.sub(pred_a, target_a)?;
    let da2 = tape.mul(da, da)?;
    let per_a = tape.mean_per_batch(da2)?;
    let per = tape.add(per_v, per_a)?;
    let w = tape.constant(Tensor::new(vec![b], weights.to_vec())?);
    let weighted = tape.mul(per, w)?;
    tape.mean_all(weighted)
}

/// Per-sample Bernoulli caption-dropout mask.
pub fn draw_caption_mask(batch: usize, p_cap: f64, rng: &mut RngStream) -> Vec<bool> {
    (0..batch).map(|_| rng.bernoulli(p_cap)).collect()
}

/// Replace dropped samples' text state with the unconditional block.
/// `y_cond` is `[B, L, D]`, `y_uncond` is `[L, D]`.
pub fn caption_dropout(
    y_cond: &Tensor,
    y_uncond: &Tensor,
    p_cap: f64,
    rng: &mut RngStream,
) -> Result<(Tensor, Vec<bool>)> {
    let shape = y_cond.shape();
    if shape.len() != 3 || y_uncond.shape() != &shape[1..] {
        return Err(Error::shape(
            "caption_dropout",
            format!("{:?} vs {:?}", shape, y_uncond.shape()),
        ));
    }
    let mask = draw_caption_mask(shape[0], p_cap, rng);
    let per = shape[1] * shape[2];
    let mut out = y_cond.clone();
    for (b, &dropped) in mask.iter().enumerate() {
        if dropped {
            out.data_mut()[b * per..(b + 1) * per].copy_from_slice(y_uncond.data());
        }
    }
    Ok((out, mask))
}

/// `p_mask(s) = max(0, 1 - s / S_max)`.
pub fn mask_probability(step: u64, s_max: u64) -> f64 {
    (1.0 - step as f64 / s_max as f64).max(0.0)
}

/// Decide the omni-block robustness mode for this step: with probability
/// `p_mask(s)` pick audio or video uniformly and mask/drop it, never both.
pub fn modality_mask_plan(step: u64, cfg: &TrainerConfig, rng: &mut RngStream) -> OmniMode {
    if cfg.modality_mode == MaskPolicy::None {
        return OmniMode::None;
    }
    let p = mask_probability(step, cfg.s_max);
    if !rng.bernoulli(p) {
        return OmniMode::None;
    }
    let target = if rng.bernoulli(0.5) { SpanTarget::Audio } else { SpanTarget::Video };
    match cfg.modality_mode {
        MaskPolicy::Mask => OmniMode::Mask(target),
        MaskPolicy::Drop => OmniMode::Drop(target),
        MaskPolicy::None => OmniMode::None,
    }
}

// ---- optimizer -----------------------------------------------------------------

/// Adam with bias correction and an optional linear learning-rate warmup.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    t: u64,
    state: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, warmup_steps: u64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (((self.t + 1) as f64 / self.warmup_steps as f64).min(1.0))
        }
    }

    /// Apply one update. `grads` may omit parameters (treated as zero
    /// gradient, state still advances deterministically by name order).
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let lr_t = self.current_lr();
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let value = params.get(name)?.clone();
            if grad.shape() != value.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("{name}: grad {:?} vs param {:?}", grad.shape(), value.shape()),
                ));
            }
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(value.shape()), Tensor::zeros(value.shape())));
            let mut new_value = value;
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                new_value.data_mut()[i] -= lr_t * m_hat / (v_hat.sqrt() + self.eps);
            }
            params.set(name, new_value)?;
        }
        Ok(())
    }
}

// ---- train step -----------------------------------------------------------------

/// Named random streams of a training run.
#[derive(Debug, Clone)]
pub struct TrainStreams {
    pub sigma: RngStream,
    pub noise: RngStream,
    pub dropout: RngStream,
    pub batch: RngStream,
}

impl TrainStreams {
    pub fn new(seed: u64) -> Self {
        TrainStreams {
            sigma: RngStream::derive(seed, "train.sigma"),
            noise: RngStream::derive(seed, "train.noise"),
            dropout: RngStream::derive(seed, "train.dropout"),
            batch: RngStream::derive(seed, "train.batch"),
        }
    }

    pub fn counters(&self) -> Vec<(String, u64)> {
        vec![
            ("train.sigma".into(), self.sigma.counter),
            ("train.noise".into(), self.noise.counter),
            ("train.dropout".into(), self.dropout.counter),
            ("train.batch".into(), self.batch.counter),
        ]
    }
}

/// One training batch: stacked clean latents and per-sample token ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub v_gt: Tensor,
    pub a_gt: Tensor,
    /// `B * text_len` token ids, row-major.
    pub token_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub loss: f64,
    pub p_mask: f64,
    pub lr: f64,
    pub omni_mode: OmniMode,
}

/// Token id reserved for the unconditional caption.
pub const UNCOND_TOKEN: usize = 0;

/// One optimization step: draw flow times and noise, apply caption dropout
/// and the modality plan, run the joint forward, backpropagate over the
/// trainable set, and update with Adam.
pub fn train_step(
    model: &mut Model,
    batch: &Batch,
    cfg: &TrainerConfig,
    opt: &mut Adam,
    streams: &mut TrainStreams,
    step: u64,
) -> Result<StepInfo> {
    cfg.validate()?;
    let b = batch.v_gt.shape()[0];
    if batch.a_gt.shape()[0] != b || batch.token_ids.len() != b * model.config.text_len {
        return Err(Error::shape("train_step", "batch fields disagree on size".to_string()));
    }

    // Per-sample flow times, then noise for both modalities in batch order.
    let sigmas: Vec<f64> = (0..b).map(|_| streams.sigma.uniform()).collect();
    let eps_v = Tensor::randn(batch.v_gt.shape(), &mut streams.noise);
    let eps_a = Tensor::randn(batch.a_gt.shape(), &mut streams.noise);

    let per_v = batch.v_gt.numel() / b;
    let per_a = batch.a_gt.numel() / b;
    let mut v_sigma = batch.v_gt.clone();
    let mut a_sigma = batch.a_gt.clone();
    for (i, &s) in sigmas.iter().enumerate() {
        for j in i * per_v..(i + 1) * per_v {
            v_sigma.data_mut()[j] = (1.0 - s) * batch.v_gt.data()[j] + s * eps_v.data()[j];
        }
        for j in i * per_a..(i + 1) * per_a {
            a_sigma.data_mut()[j] = (1.0 - s) * batch.a_gt.data()[j] + s * eps_a.data()[j];
        }
    }
    let target_v = eps_v.sub(&batch.v_gt)?;
    let target_a = eps_a.sub(&batch.a_gt)?;

    // Caption dropout at the token-id level so gradients reach the
    // unconditional embedding row.
    let cap_mask = draw_caption_mask(b, cfg.p_cap, &mut streams.dropout);
    let l_y = model.config.text_len;
    let mut ids = batch.token_ids.clone();
    for (i, &dropped) in cap_mask.iter().enumerate() {
        if dropped {
            ids[i * l_y..(i + 1) * l_y].fill(UNCOND_TOKEN);
        }
    }
    let omni_mode = modality_mask_plan(step, cfg, &mut streams.dropout);

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let y0 = model.embed_text(&mut tape, &vars, &ids, b)?;
    let vv = tape.constant(v_sigma);
    let av = tape.constant(a_sigma);
    let (uv, ua) = model.forward_latents(&mut tape, &vars, vv, av, y0, &sigmas, omni_mode)?;
    let tv = tape.constant(target_v);
    let ta = tape.constant(target_a);
    let w: Vec<f64> = sigmas.iter().map(|&s| cfg.weighting.eval(s)).collect();
    let loss = fm_loss(&mut tape, uv, ua, tv, ta, &w)?;
    let loss_value = tape.value(loss).item()?;

    let grads = tape.backward(loss)?;
    let mut grad_map: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, var) in vars.iter() {
        if !model.is_trainable(name) {
            continue;
        }
        if let Some(g) = grads.get(var) {
            grad_map.insert(name.to_string(), g.clone());
        }
    }
    opt.step(&mut model.params, &grad_map)?;

    Ok(StepInfo {
        loss: loss_value,
        p_mask: mask_probability(step, cfg.s_max),
        lr: opt.current_lr(),
        omni_mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_field(v: f64) -> Tensor {
        Tensor::new(vec![1, 1, 1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn interpolant_endpoints_exact() {
        let mut rng = RngStream::new(90);
        let v = Tensor::randn(&[1, 2, 2, 2, 2], &mut rng);
        let a = Tensor::randn(&[1, 3, 4], &mut rng);
        let s0 = FlowSample::at_sigma(&v, &a, 0.0, &mut rng).unwrap();
        assert!(s0.v_sigma.bit_eq(&v) && s0.a_sigma.bit_eq(&a));
        let s1 = FlowSample::at_sigma(&v, &a, 1.0, &mut rng).unwrap();
        assert!(s1.v_sigma.bit_eq(&s1.eps_v) && s1.a_sigma.bit_eq(&s1.eps_a));
    }

    #[test]
    fn interpolant_midpoint_scalar() {
        let mut rng = RngStream::new(91);
        let v = scalar_field(2.0);
        let a = scalar_field(0.0).reshaped(vec![1, 1, 1]).unwrap();
        let mut s = FlowSample::at_sigma(&v, &a, 0.5, &mut rng).unwrap();
        // Force eps to zero and recompute the interpolant by hand.
        s.eps_v = scalar_field(0.0);
        let mid = s.v_gt.lerp(&s.eps_v, 0.5).unwrap();
        assert_eq!(mid.data()[0], 1.0);
    }

    #[test]
    fn target_velocity_cases() {
        let mut rng = RngStream::new(92);
        let v = Tensor::randn(&[1, 1, 1, 2, 2], &mut rng);
        let a = Tensor::randn(&[1, 2, 2], &mut rng);
        let mut s = FlowSample::at_sigma(&v, &a, 0.3, &mut rng).unwrap();
        s.eps_v = s.v_gt.clone();
        let (uv, _) = target_velocity(&s).unwrap();
        assert!(uv.data().iter().all(|&x| x == 0.0));

        s.v_gt = Tensor::zeros(&[1, 1, 1, 2, 2]);
        s.eps_v = Tensor::full(&[1, 1, 1, 2, 2], 0.7);
        let (uv, _) = target_velocity(&s).unwrap();
        assert!(uv.data().iter().all(|&x| x == 0.7));

        s.v_gt = Tensor::full(&[1, 1, 1, 2, 2], 3.0);
        s.eps_v = Tensor::full(&[1, 1, 1, 2, 2], 1.0);
        let (uv, _) = target_velocity(&s).unwrap();
        assert!(uv.data().iter().all(|&x| x == -2.0));
    }

    #[test]
    fn target_is_path_derivative() {
        // d/dsigma[(1-s)x + s eps] == eps - x, checked by central difference
        // on scalar cases.
        let mut rng = RngStream::new(93);
        for _ in 0..10 {
            let x = rng.normal();
            let eps = rng.normal();
            let s = rng.uniform();
            let h = 1e-6;
            let interp = |sig: f64| (1.0 - sig) * x + sig * eps;
            let d = (interp(s + h) - interp(s - h)) / (2.0 * h);
            assert!((d - (eps - x)).abs() < 1e-9);
        }
    }

    #[test]
    fn fm_loss_zero_at_perfect_prediction() {
        let mut rng = RngStream::new(94);
        let t_v = Tensor::randn(&[2, 1, 1, 2, 2], &mut rng);
        let t_a = Tensor::randn(&[2, 3, 2], &mut rng);
        let mut tape = Tape::new();
        let pv = tape.constant(t_v.clone());
        let pa = tape.constant(t_a.clone());
        let tv = tape.constant(t_v);
        let ta = tape.constant(t_a);
        let loss = fm_loss(&mut tape, pv, pa, tv, ta, &[1.0, 1.0]).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn fm_loss_weighting_formula() {
        for sigma in [0.25, 0.5, 0.75] {
            let w = Weighting::SigmaOneMinusSigma.eval(sigma);
            assert!((w - sigma * (1.0 - sigma)).abs() < 1e-12);
        }
        // sigma = 0.5 scales the unweighted loss by exactly 0.25.
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
        let pa = tape.constant(Tensor::full(&[1, 1, 1], 1.0));
        let tv = tape.constant(Tensor::zeros(&[1, 1, 1, 1, 1]));
        let ta = tape.constant(Tensor::zeros(&[1, 1, 1]));
        let unweighted = fm_loss(&mut tape, pv, pa, tv, ta, &[1.0]).unwrap();
        let weighted = fm_loss(&mut tape, pv, pa, tv, ta, &[0.25]).unwrap();
        let u = tape.value(unweighted).item().unwrap();
        let w = tape.value(weighted).item().unwrap();
        assert!((w - 0.25 * u).abs() < 1e-12);
    }

    #[test]
    fn fm_loss_unit_error_single_element() {
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
        let pa = tape.constant(Tensor::zeros(&[1, 1, 1]));
        let tv = tape.constant(Tensor::zeros(&[1, 1, 1, 1, 1]));
        let ta = tape.constant(Tensor::zeros(&[1, 1, 1]));
        let loss = fm_loss(&mut tape, pv, pa, tv, ta, &[1.0]).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 1.0);
    }

    #[test]
    fn fm_loss_batch_permutation_invariant() {
        let mut rng = RngStream::new(95);
        let pv = Tensor::randn(&[3, 1, 1, 2, 2], &mut rng);
        let pa = Tensor::randn(&[3, 2, 2], &mut rng);
        let tv = Tensor::randn(&[3, 1, 1, 2, 2], &mut rng);
        let ta = Tensor::randn(&[3, 2, 2], &mut rng);
        let w = [1.0, 1.0, 1.0];

        let eval = |pv: &Tensor, pa: &Tensor, tv: &Tensor, ta: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let a = tape.constant(pv.clone());
            let b = tape.constant(pa.clone());
            let c = tape.constant(tv.clone());
            let d = tape.constant(ta.clone());
            let l = fm_loss(&mut tape, a, b, c, d, &w).unwrap();
            tape.value(l).item().unwrap()
        };
        let rotate = |t: &Tensor| -> Tensor {
            let per = t.numel() / 3;
            let mut data = t.data()[per..].to_vec();
            data.extend_from_slice(&t.data()[..per]);
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let base = eval(&pv, &pa, &tv, &ta);
        let rot = eval(&rotate(&pv), &rotate(&pa), &rotate(&tv), &rotate(&ta));
        assert!((base - rot).abs() < 1e-12);
    }

    #[test]
    fn zero_predictor_expected_loss_matches_monte_carlo() {
        // On standardized data the zero predictor's expected loss is
        // E[(eps - x)^2] per modality = 2, so 4 in total with w = 1.
        let mut rng = RngStream::new(96);
        let b = 64;
        let pv = Tensor::zeros(&[b, 1, 1, 4, 4]);
        let pa = Tensor::zeros(&[b, 8, 4]);
        let x_v = Tensor::randn(&[b, 1, 1, 4, 4], &mut rng);
        let x_a = Tensor::randn(&[b, 8, 4], &mut rng);
        let e_v = Tensor::randn(&[b, 1, 1, 4, 4], &mut rng);
        let e_a = Tensor::randn(&[b, 8, 4], &mut rng);
        let tv = e_v.sub(&x_v).unwrap();
        let ta = e_a.sub(&x_a).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(pv);
        let bb = tape.constant(pa);
        let c = tape.constant(tv);
        let d = tape.constant(ta);
        let w = vec![1.0; b];
        let loss = fm_loss(&mut tape, a, bb, c, d, &w).unwrap();
        let got = tape.value(loss).item().unwrap();
        assert!((got - 4.0).abs() < 0.35, "zero-predictor loss {got}, expected about 4");
    }

    #[test]
    fn caption_dropout_extremes() {
        let mut rng = RngStream::new(97);
        let y_cond = Tensor::randn(&[4, 2, 3], &mut rng);
        let y_uncond = Tensor::full(&[2, 3], 9.0);
        let (out, mask) = caption_dropout(&y_cond, &y_uncond, 0.0, &mut rng).unwrap();
        assert!(out.bit_eq(&y_cond));
        assert!(mask.iter().all(|&m| !m));
        let (out, mask) = caption_dropout(&y_cond, &y_uncond, 1.0, &mut rng).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert!(out.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn caption_dropout_rate_monte_carlo() {
        let mut rng = RngStream::new(98);
        let n = 10_000;
        let mask = draw_caption_mask(n, 0.5, &mut rng);
        let frac = mask.iter().filter(|&&m| m).count() as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "dropout fraction {frac}");
    }

    #[test]
    fn mask_schedule_endpoints() {
        assert_eq!(mask_probability(0, 100), 1.0);
        assert_eq!(mask_probability(50, 100), 0.5);
        assert_eq!(mask_probability(100, 100), 0.0);
        assert_eq!(mask_probability(500, 100), 0.0);
        let cfg = TrainerConfig { s_max: 100, ..TrainerConfig::default() };
        let mut rng = RngStream::new(99);
        for _ in 0..50 {
            assert_eq!(modality_mask_plan(100, &cfg, &mut rng), OmniMode::None);
            assert_ne!(modality_mask_plan(0, &cfg, &mut rng), OmniMode::None);
        }
    }

    #[test]
    fn mask_plan_never_none_policy() {
        let cfg = TrainerConfig { modality_mode: MaskPolicy::None, ..TrainerConfig::default() };
        let mut rng = RngStream::new(100);
        for s in 0..20 {
            assert_eq!(modality_mask_plan(s, &cfg, &mut rng), OmniMode::None);
        }
    }

    #[test]
    fn toy_convex_descent() {
        // u = theta against a constant target: plain gradient descent must
        // strictly decrease the quadratic loss.
        let target = 3.0;
        let mut theta = -1.0;
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let mut tape = Tape::new();
            let th = tape.param(Tensor::scalar(theta));
            let tg = tape.constant(Tensor::scalar(target));
            let d = tape.sub(th, tg).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.mean_all(sq).unwrap();
            let lv = tape.value(loss).item().unwrap();
            assert!(lv < last, "loss must strictly decrease: {lv} vs {last}");
            last = lv;
            let grads = tape.backward(loss).unwrap();
            theta -= 0.1 * grads.get(th).unwrap().data()[0];
        }
        assert!((theta - target).abs() < 0.1);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::from_vec(vec![5.0, -3.0]));
        let mut opt = Adam::new(0.1, 0);
        for _ in 0..300 {
            let x = params.get("x").unwrap().clone();
            let grad = x.scale(2.0);
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), grad);
            opt.step(&mut params, &grads).unwrap();
        }
        let x = params.get("x").unwrap();
        assert!(x.data().iter().all(|v| v.abs() < 1e-2), "{:?}", x.data());
    }

    #[test]
    fn warmup_ramps_linearly() {
        let mut opt = Adam::new(1.0, 4);
        let mut params = ParamStore::new();
        params.insert("x", Tensor::scalar(0.0));
        let mut seen = Vec::new();
        for _ in 0..5 {
            seen.push(opt.current_lr());
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::scalar(0.0));
            opt.step(&mut params, &grads).unwrap();
        }
        assert_eq!(seen, vec![0.25, 0.5, 0.75, 1.0, 1.0]);
    }
}
