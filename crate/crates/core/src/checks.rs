//! Runtime property suite behind the `check` subcommand.
//!
//! Each check re-verifies a structural guarantee of the stack on freshly
//! drawn instances: zero-gate identity for the three block families,
//! plug-in orthogonality of the joint model, gradient correctness against
//! central finite differences, sampler convergence orders, the
//! closed-form distance and alignment oracles, counter semantics, rotation
//! isometry, and step determinism.

use crate::blocks::{
    dual_stream_block, omni_block, wan_block, AttentionWeights, AttnScale, DualStreamWeights,
    OmniBlockWeights, OmniMode, WanBlockWeights,
};
use crate::error::{Error, Result};
use crate::flow::{train_step, Adam, TrainStreams, TrainerConfig};
use crate::gradcheck::{finite_diff, max_rel_err, FD_STEP};
use crate::metrics::{av_align, frechet_distance, GaussianStats, PeakSet};
use crate::model::{
    BlockFamily, BlockKind, BlockSchedule, Conditioning, Model, ModelConfig, SchedulePolicy,
};
use crate::modulation::SlotMlpWeights;
use crate::nn::{Activation, Mlp};
use crate::rng::RngStream;
use crate::rope::{build_rope_angles, AudioEmbedConfig, PatchConfig, RopeKind, RopeLayout};
use crate::sampler::{integrate, SamplerConfig, Solver};
use crate::synth::{assemble_batch, make_dataset, SyntheticSceneConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub struct CheckOutcome {
    pub name: &'static str,
    pub result: Result<()>,
}

fn fail(name: &'static str, detail: String) -> Error {
    Error::invalid(name, detail)
}

fn tiny_model_config(width: usize, omni: usize, family: BlockFamily) -> ModelConfig {
    ModelConfig {
        video_blocks: 2,
        audio_blocks: 2,
        omni_blocks: omni,
        width,
        n_heads: 2,
        family,
        conditioning: Conditioning::Static,
        frozen_video: false,
        patch: PatchConfig { p_h: 2, p_w: 2, c_v: 2, d: width },
        audio_embed: AudioEmbedConfig { d_a: 4, d: width, pos_kernel: 3, pos_layers: 2 },
        rope: RopeLayout { d_head: width / 2, ratios: (2.0, 1.0, 1.0), base: 10_000.0 },
        attn_scale: AttnScale::PerHead,
        schedule_policy: SchedulePolicy::StrictAlternate,
        text_vocab: 6,
        text_len: 3,
        time_freqs: 8,
    }
}

fn randomize_model(model: &mut Model, rng: &mut RngStream) {
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let shape = model.params.get(&name).unwrap().shape().to_vec();
        let t = Tensor::randn_scaled(&shape, 0.3, rng);
        model.params.set(&name, t).unwrap();
    }
}

fn zero_gate_columns(t: &mut Tensor, d: usize, is_bias: bool) {
    let cols = 6 * d;
    let rows = if is_bias { 1 } else { t.shape()[0] };
    for row in 0..rows {
        for c in (2 * d..3 * d).chain(5 * d..6 * d) {
            t.data_mut()[row * cols + c] = 0.0;
        }
    }
}

struct BlockKit {
    tensors: Vec<Tensor>,
}

impl BlockKit {
    fn random_dual(d: usize, rng: &mut RngStream, zero_gates: bool) -> BlockKit {
        let hidden = 4 * d;
        let mut tensors = vec![
            Tensor::randn_scaled(&[d, d], 0.4, rng),
            Tensor::randn_scaled(&[d, d], 0.4, rng),
            Tensor::randn_scaled(&[d, d], 0.4, rng),
            Tensor::randn_scaled(&[d, d], 0.4, rng),
        ];
        for _ in 0..2 {
            tensors.push(Tensor::randn_scaled(&[d, hidden], 0.4, rng));
            tensors.push(Tensor::randn_scaled(&[hidden], 0.2, rng));
            tensors.push(Tensor::randn_scaled(&[hidden, d], 0.4, rng));
            tensors.push(Tensor::randn_scaled(&[d], 0.2, rng));
        }
        for _ in 0..2 {
            let mut w = Tensor::randn_scaled(&[d, 6 * d], 0.4, rng);
            let mut b = Tensor::randn_scaled(&[6 * d], 0.2, rng);
            if zero_gates {
                zero_gate_columns(&mut w, d, false);
                zero_gate_columns(&mut b, d, true);
            }
            tensors.push(w);
            tensors.push(b);
        }
        BlockKit { tensors }
    }

    fn leaf_dual(&self, tape: &mut Tape) -> DualStreamWeights {
        let v: Vec<Var> = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        DualStreamWeights {
            attn: AttentionWeights { w_q: v[0], w_k: v[1], w_v: v[2], w_o: v[3], n_heads: 2 },
            mlp_x: Mlp { w1: v[4], b1: v[5], w2: v[6], b2: v[7], act: Activation::Gelu },
            mlp_y: Mlp { w1: v[8], b1: v[9], w2: v[10], b2: v[11], act: Activation::Gelu },
            slots_x: SlotMlpWeights { w: v[12], b: v[13] },
            slots_y: SlotMlpWeights { w: v[14], b: v[15] },
        }
    }

    fn random_wan(d: usize, rng: &mut RngStream, zero_gates: bool) -> BlockKit {
        let hidden = 4 * d;
        let mut tensors = vec![
            Tensor::randn_scaled(&[d, d], 0.4, rng),
            Tensor::randn_scaled(&[d, d], 0.4, rng),
            Tensor::randn_scaled(&[d, d], 0.4, rng),
            Tensor::randn_scaled(&[d, d], 0.4, rng),
            Tensor::randn_scaled(&[d, d], 0.4, rng),
            Tensor::randn_scaled(&[d, d], 0.4, rng),
            Tensor::randn_scaled(&[d, d], 0.4, rng),
            if zero_gates { Tensor::zeros(&[d, d]) } else { Tensor::randn_scaled(&[d, d], 0.4, rng) },
            Tensor::randn_scaled(&[d, hidden], 0.4, rng),
            Tensor::randn_scaled(&[hidden], 0.2, rng),
            Tensor::randn_scaled(&[hidden, d], 0.4, rng),
            Tensor::randn_scaled(&[d], 0.2, rng),
        ];
        let mut w = Tensor::randn_scaled(&[d, 6 * d], 0.4, rng);
        let mut b = Tensor::randn_scaled(&[6 * d], 0.2, rng);
        if zero_gates {
            zero_gate_columns(&mut w, d, false);
            zero_gate_columns(&mut b, d, true);
        }
        tensors.push(w);
        tensors.push(b);
        BlockKit { tensors }
    }

    fn leaf_wan(&self, tape: &mut Tape) -> WanBlockWeights {
        let v: Vec<Var> = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        WanBlockWeights {
            self_attn: AttentionWeights { w_q: v[0], w_k: v[1], w_v: v[2], w_o: v[3], n_heads: 2 },
            cross_q: v[4],
            cross_k: v[5],
            cross_v: v[6],
            cross_o: v[7],
            mlp: Mlp { w1: v[8], b1: v[9], w2: v[10], b2: v[11], act: Activation::Gelu },
            slots: SlotMlpWeights { w: v[12], b: v[13] },
        }
    }

    fn random_omni(d: usize, rng: &mut RngStream, zero_gates: bool) -> BlockKit {
        let hidden = 4 * d;
        let mut tensors = vec![
            Tensor::randn_scaled(&[d, d], 0.4, rng),
            Tensor::randn_scaled(&[d, d], 0.4, rng),
            Tensor::randn_scaled(&[d, d], 0.4, rng),
            Tensor::randn_scaled(&[d, d], 0.4, rng),
        ];
        for _ in 0..3 {
            tensors.push(Tensor::randn_scaled(&[d, hidden], 0.4, rng));
            tensors.push(Tensor::randn_scaled(&[hidden], 0.2, rng));
            tensors.push(Tensor::randn_scaled(&[hidden, d], 0.4, rng));
            tensors.push(Tensor::randn_scaled(&[d], 0.2, rng));
        }
        for _ in 0..3 {
            let mut w = Tensor::randn_scaled(&[d, 6 * d], 0.4, rng);
            let mut b = Tensor::randn_scaled(&[6 * d], 0.2, rng);
            if zero_gates {
                zero_gate_columns(&mut w, d, false);
                zero_gate_columns(&mut b, d, true);
            }
            tensors.push(w);
            tensors.push(b);
        }
        BlockKit { tensors }
    }

    fn leaf_omni(&self, tape: &mut Tape) -> OmniBlockWeights {
        let v: Vec<Var> = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        let mlp = |o: usize| Mlp { w1: v[o], b1: v[o + 1], w2: v[o + 2], b2: v[o + 3], act: Activation::Gelu };
        OmniBlockWeights {
            attn: AttentionWeights { w_q: v[0], w_k: v[1], w_v: v[2], w_o: v[3], n_heads: 2 },
            mlp_v: mlp(4),
            mlp_y: mlp(8),
            mlp_a: mlp(12),
            slots_v: SlotMlpWeights { w: v[16], b: v[17] },
            slots_y: SlotMlpWeights { w: v[18], b: v[19] },
            slots_a: SlotMlpWeights { w: v[20], b: v[21] },
        }
    }
}

fn rope_1d(len: usize, d_head: usize) -> Tensor {
    build_rope_angles(
        RopeKind::Audio1d { len },
        &RopeLayout { d_head, ratios: (2.0, 1.0, 1.0), base: 10_000.0 },
    )
    .expect("even head dim")
}

/// Zero-gate identity across the three families.
pub fn check_zero_gate_identity(instances: usize) -> Result<()> {
    let mut rng = RngStream::derive(4001, "check.identity");
    let d = 8;
    for i in 0..instances {
        let x = Tensor::randn(&[1, 3, d], &mut rng);
        let y = Tensor::randn(&[1, 2, d], &mut rng);
        let a = Tensor::randn(&[1, 4, d], &mut rng);
        let t_emb = Tensor::randn(&[1, d], &mut rng);
        let rope_x = rope_1d(3, d / 2);
        let rope_a = rope_1d(4, d / 2);

        let mut tape = Tape::new();
        let kit = BlockKit::random_dual(d, &mut rng, true);
        let wts = kit.leaf_dual(&mut tape);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let tv = tape.constant(t_emb.clone());
        let (x2, y2) = dual_stream_block(&mut tape, xv, yv, tv, &wts, Some(&rope_x), AttnScale::PerHead)?;
        if !tape.value(x2).bit_eq(&x) || !tape.value(y2).bit_eq(&y) {
            return Err(fail("zero_gate_identity", format!("dual-stream instance {i}")));
        }

        let mut tape = Tape::new();
        let kit = BlockKit::random_wan(d, &mut rng, true);
        let wts = kit.leaf_wan(&mut tape);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let tv = tape.constant(t_emb.clone());
        let x2 = wan_block(&mut tape, xv, yv, tv, &wts, Some(&rope_x), AttnScale::PerHead)?;
        if !tape.value(x2).bit_eq(&x) {
            return Err(fail("zero_gate_identity", format!("read-only-text instance {i}")));
        }

        let mut tape = Tape::new();
        let kit = BlockKit::random_omni(d, &mut rng, true);
        let wts = kit.leaf_omni(&mut tape);
        let vv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let av = tape.constant(a.clone());
        let tv = tape.constant(t_emb.clone());
        let (v2, y2, a2) = omni_block(
            &mut tape,
            vv,
            yv,
            av,
            tv,
            &wts,
            &rope_1d(3, d / 2),
            &rope_a,
            AttnScale::PerHead,
            OmniMode::None,
        )?;
        if !tape.value(v2).bit_eq(&x) || !tape.value(y2).bit_eq(&y) || !tape.value(a2).bit_eq(&a) {
            return Err(fail("zero_gate_identity", format!("omni instance {i}")));
        }
    }
    Ok(())
}

/// M = 0 + static conditioning: joint video output equals the standalone
/// tower bitwise and ignores the audio input.
pub fn check_plugin_orthogonality(draws: usize) -> Result<()> {
    let mut rng = RngStream::derive(4002, "check.orthogonality");
    for i in 0..draws {
        let family = if i % 2 == 0 { BlockFamily::Sd3Dual } else { BlockFamily::Wan };
        let cfg = tiny_model_config(8, 0, family);
        let mut model = Model::init(cfg, 1000 + i as u64)?;
        randomize_model(&mut model, &mut rng);
        let v = Tensor::randn(&[1, 2, 2, 4, 4], &mut rng);
        let a1 = Tensor::randn(&[1, 5, 4], &mut rng);
        let a2 = Tensor::randn(&[1, 5, 4], &mut rng);
        let ids = vec![2usize, 3, 4];
        let sigma = [0.4];

        let joint = |audio: &Tensor| -> Result<Tensor> {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, false);
            let y0 = model.embed_text(&mut tape, &vars, &ids, 1)?;
            let vv = tape.constant(v.clone());
            let av = tape.constant(audio.clone());
            let (uv, _) = model.forward_latents(&mut tape, &vars, vv, av, y0, &sigma, OmniMode::None)?;
            Ok(tape.value(uv).clone())
        };
        let u1 = joint(&a1)?;
        let u2 = joint(&a2)?;
        if !u1.bit_eq(&u2) {
            return Err(fail("plugin_orthogonality", format!("draw {i}: video output depends on audio")));
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let y0 = model.embed_text(&mut tape, &vars, &ids, 1)?;
        let vv = tape.constant(v.clone());
        let bare = model.video_only_forward(&mut tape, &vars, vv, y0, &sigma)?;
        if !u1.bit_eq(tape.value(bare)) {
            return Err(fail("plugin_orthogonality", format!("draw {i}: joint != bare tower")));
        }
    }
    Ok(())
}

/// Block-family gradients against central finite differences.
pub fn check_block_gradients(instances: usize, tolerance: f64) -> Result<()> {
    let mut rng = RngStream::derive(4003, "check.gradients");
    let d = 8;
    for i in 0..instances {
        // Dual-stream.
        let kit = BlockKit::random_dual(d, &mut rng, false);
        let mut inputs = vec![
            Tensor::randn(&[1, 3, d], &mut rng),
            Tensor::randn(&[1, 2, d], &mut rng),
            Tensor::randn(&[1, d], &mut rng),
        ];
        inputs.extend(kit.tensors.iter().cloned());
        let rope = rope_1d(3, d / 2);
        let run = |tape: &mut Tape, inp: &[Tensor]| -> Result<Var> {
            let x = tape.param(inp[0].clone());
            let y = tape.param(inp[1].clone());
            let t = tape.param(inp[2].clone());
            let kit = BlockKit { tensors: inp[3..].to_vec() };
            let wts = kit.leaf_dual(tape);
            let (x2, y2) = dual_stream_block(tape, x, y, t, &wts, Some(&rope), AttnScale::PerHead)?;
            let mx = tape.mean_all(x2)?;
            let my = tape.mean_all(y2)?;
            let my = tape.scale(my, 0.7)?;
            tape.add(mx, my)
        };
        gradcheck_against_fd(&run, &inputs, tolerance, "dual-stream", i)?;

        // Read-only text.
        let kit = BlockKit::random_wan(d, &mut rng, false);
        let mut inputs = vec![
            Tensor::randn(&[1, 3, d], &mut rng),
            Tensor::randn(&[1, 2, d], &mut rng),
            Tensor::randn(&[1, d], &mut rng),
        ];
        inputs.extend(kit.tensors.iter().cloned());
        let rope = rope_1d(3, d / 2);
        let run = |tape: &mut Tape, inp: &[Tensor]| -> Result<Var> {
            let x = tape.param(inp[0].clone());
            let y = tape.param(inp[1].clone());
            let t = tape.param(inp[2].clone());
            let kit = BlockKit { tensors: inp[3..].to_vec() };
            let wts = kit.leaf_wan(tape);
            let x2 = wan_block(tape, x, y, t, &wts, Some(&rope), AttnScale::PerHead)?;
            tape.mean_all(x2)
        };
        gradcheck_against_fd(&run, &inputs, tolerance, "read-only-text", i)?;

        // Omni.
        let kit = BlockKit::random_omni(d, &mut rng, false);
        let mut inputs = vec![
            Tensor::randn(&[1, 3, d], &mut rng),
            Tensor::randn(&[1, 2, d], &mut rng),
            Tensor::randn(&[1, 4, d], &mut rng),
            Tensor::randn(&[1, d], &mut rng),
        ];
        inputs.extend(kit.tensors.iter().cloned());
        let rv = rope_1d(3, d / 2);
        let ra = rope_1d(4, d / 2);
        let run = |tape: &mut Tape, inp: &[Tensor]| -> Result<Var> {
            let v = tape.param(inp[0].clone());
            let y = tape.param(inp[1].clone());
            let a = tape.param(inp[2].clone());
            let t = tape.param(inp[3].clone());
            let kit = BlockKit { tensors: inp[4..].to_vec() };
            let wts = kit.leaf_omni(tape);
            let (v2, y2, a2) = omni_block(tape, v, y, a, t, &wts, &rv, &ra, AttnScale::PerHead, OmniMode::None)?;
            let mv = tape.mean_all(v2)?;
            let my = tape.mean_all(y2)?;
            let ma = tape.mean_all(a2)?;
            let my = tape.scale(my, 0.7)?;
            let ma = tape.scale(ma, 1.3)?;
            let s = tape.add(mv, my)?;
            tape.add(s, ma)
        };
        gradcheck_against_fd(&run, &inputs, tolerance, "omni", i)?;
    }
    Ok(())
}

fn gradcheck_against_fd<R>(run: &R, inputs: &[Tensor], tolerance: f64, what: &str, instance: usize) -> Result<()>
where
    R: Fn(&mut Tape, &[Tensor]) -> Result<Var> + Sync,
{
    let f = |inp: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = run(&mut tape, inp)?;
        tape.value(loss).item()
    };
    let numeric = finite_diff(&f, inputs, FD_STEP)?;
    let mut tape = Tape::new();
    let loss = run(&mut tape, inputs)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = (0..inputs.len())
        .map(|i| {
            grads
                .get(Var(i))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()))
        })
        .collect();
    let err = max_rel_err(&analytic, &numeric);
    if err > tolerance {
        return Err(fail(
            "gradient_check",
            format!("{what} instance {instance}: rel err {err:.3e} > {tolerance:.1e}"),
        ));
    }
    Ok(())
}

/// Whole-model gradients (2 video + 2 audio + 1 omni, width 8) against
/// finite differences over every trainable weight.
pub fn check_full_model_gradients(instances: usize, tolerance: f64) -> Result<()> {
    let mut data_rng = RngStream::derive(4004, "check.model_grad");
    for i in 0..instances {
        let cfg = tiny_model_config(8, 1, BlockFamily::Sd3Dual);
        let mut model = Model::init(cfg, 2000 + i as u64)?;
        randomize_model(&mut model, &mut data_rng);
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        let v = Tensor::randn(&[1, 2, 2, 4, 4], &mut data_rng);
        let a = Tensor::randn(&[1, 5, 4], &mut data_rng);
        let ids = vec![2usize, 3, 4];
        let sigma = [0.37];

        let base = model.clone();
        let eval_loss = |weights: &[Tensor]| -> Result<f64> {
            let mut m = base.clone();
            for (name, w) in names.iter().zip(weights) {
                m.params.set(name, w.clone())?;
            }
            let mut tape = Tape::new();
            let vars = m.bind(&mut tape, false);
            let y0 = m.embed_text(&mut tape, &vars, &ids, 1)?;
            let vv = tape.constant(v.clone());
            let av = tape.constant(a.clone());
            let (uv, ua) = m.forward_latents(&mut tape, &vars, vv, av, y0, &sigma, OmniMode::None)?;
            let mv = tape.mean_all(uv)?;
            let ma = tape.mean_all(ua)?;
            let ma = tape.scale(ma, 0.7)?;
            let s = tape.add(mv, ma)?;
            tape.value(s).item()
        };
        let inputs: Vec<Tensor> = names.iter().map(|n| base.params.get(n).unwrap().clone()).collect();
        let numeric = finite_diff(&eval_loss, &inputs, FD_STEP)?;

        let mut tape = Tape::new();
        let vars = base.bind(&mut tape, true);
        let y0 = base.embed_text(&mut tape, &vars, &ids, 1)?;
        let vv = tape.constant(v.clone());
        let av = tape.constant(a.clone());
        let (uv, ua) = base.forward_latents(&mut tape, &vars, vv, av, y0, &sigma, OmniMode::None)?;
        let mv = tape.mean_all(uv)?;
        let ma = tape.mean_all(ua)?;
        let ma = tape.scale(ma, 0.7)?;
        let loss = tape.add(mv, ma)?;
        let grads = tape.backward(loss)?;
        for (k, name) in names.iter().enumerate() {
            let var = vars.var(name)?;
            let analytic = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            let err = crate::tensor::rel_err(analytic.data(), numeric[k].data());
            if err > tolerance {
                return Err(fail(
                    "full_model_gradient",
                    format!("instance {i}, weight {name}: rel err {err:.3e}"),
                ));
            }
        }
    }
    Ok(())
}

/// Empirical convergence order of the two solvers on the analytic field
/// `u(x, sigma) = x` with solution `x(0) = x(1) / e`.
pub fn check_sampler_orders() -> Result<()> {
    let field = |v: &Tensor, a: &Tensor, _s: f64| -> Result<(Tensor, Tensor)> { Ok((v.clone(), a.clone())) };
    let init_v = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
    let init_a = Tensor::full(&[1, 1, 1], 1.0);
    let exact = (-1.0f64).exp();
    let error = |n: usize, solver: Solver| -> Result<f64> {
        let cfg = SamplerConfig { n_steps: n, solver, guidance: 1.0, sigma_grid: None };
        let (v, _) = integrate(&field, &init_v, &init_a, &cfg)?;
        Ok((v.data()[0] - exact).abs() / exact)
    };
    for (solver, lo, hi, name) in [
        (Solver::Euler, 0.9, 1.1, "euler"),
        (Solver::Heun, 1.8, 2.2, "heun"),
    ] {
        let errs: Vec<f64> = [8usize, 16, 32, 64]
            .iter()
            .map(|&n| error(n, solver))
            .collect::<Result<_>>()?;
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            if !(lo..=hi).contains(&order) {
                return Err(fail("sampler_order", format!("{name} order {order:.3} outside [{lo},{hi}]")));
            }
        }
        if solver == Solver::Heun && errs[3] >= 1e-4 {
            return Err(fail("sampler_order", format!("heun error at 64 steps {:.3e}", errs[3])));
        }
    }
    Ok(())
}

/// Closed-form 1-D checks for the Gaussian-moment distance.
pub fn check_frechet_oracle() -> Result<()> {
    let g = |mu: f64, var: f64| GaussianStats { mean: vec![mu], cov: vec![var], d: 1 };
    let d1 = frechet_distance(&g(0.0, 1.0), &g(1.0, 1.0))?;
    if (d1 - 1.0).abs() > 1e-6 {
        return Err(fail("frechet_oracle", format!("N(0,1) vs N(1,1): {d1}")));
    }
    let d2 = frechet_distance(&g(0.0, 1.0), &g(0.0, 4.0))?;
    if (d2 - 1.0).abs() > 1e-6 {
        return Err(fail("frechet_oracle", format!("N(0,1) vs N(0,4): {d2}")));
    }
    let mut rng = RngStream::derive(4005, "check.frechet");
    let rows: Vec<Vec<f64>> = (0..32).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
    let set = crate::metrics::EmbeddingSet::from_rows(&rows, crate::metrics::Role::Video)?;
    let stats = crate::metrics::gaussian_stats(&set)?;
    let self_d = frechet_distance(&stats, &stats.clone())?;
    if self_d >= 1e-8 {
        return Err(fail("frechet_oracle", format!("identical sets: {self_d}")));
    }
    let rows_b: Vec<Vec<f64>> = (0..32).map(|_| (0..4).map(|_| 0.3 + rng.normal()).collect()).collect();
    let set_b = crate::metrics::EmbeddingSet::from_rows(&rows_b, crate::metrics::Role::Video)?;
    let stats_b = crate::metrics::gaussian_stats(&set_b)?;
    let ab = frechet_distance(&stats, &stats_b)?;
    let ba = frechet_distance(&stats_b, &stats)?;
    if (ab - ba).abs() > 1e-8 {
        return Err(fail("frechet_oracle", format!("asymmetry {ab} vs {ba}")));
    }
    Ok(())
}

/// Hand-built IoU cases plus shift invariance.
pub fn check_av_align_oracle() -> Result<()> {
    let same = PeakSet::new(vec![2, 7, 9]);
    if av_align(&same, &same.clone(), 0) != 1.0 {
        return Err(fail("av_align_oracle", "identical sets".into()));
    }
    if av_align(&PeakSet::new(vec![1]), &PeakSet::new(vec![5]), 0) != 0.0 {
        return Err(fail("av_align_oracle", "disjoint sets".into()));
    }
    let third = av_align(&PeakSet::new(vec![1, 2]), &PeakSet::new(vec![2, 3]), 0);
    if (third - 1.0 / 3.0).abs() > 1e-12 {
        return Err(fail("av_align_oracle", format!("{{1,2}} vs {{2,3}}: {third}")));
    }
    let mut rng = RngStream::derive(4006, "check.avalign");
    for _ in 0..100 {
        let a = PeakSet::new((0..3).map(|_| 5 + rng.below(40)).collect());
        let v = PeakSet::new((0..3).map(|_| 5 + rng.below(40)).collect());
        let base = av_align(&a, &v, 1);
        let off = rng.below(25) as isize;
        if av_align(&a.shifted(off), &v.shifted(off), 1) != base {
            return Err(fail("av_align_oracle", "shift variance".into()));
        }
    }
    Ok(())
}

/// Counter semantics for the alternating schedule, both readings.
pub fn check_counters() -> Result<()> {
    let s = BlockSchedule::build(2, 2, SchedulePolicy::StrictAlternate);
    let expected = vec![BlockKind::Video, BlockKind::Audio, BlockKind::Video, BlockKind::Audio];
    if s.order != expected {
        return Err(fail("counters", format!("{:?}", s.order)));
    }
    let (iv, ia) = s.counters(false);
    if iv != vec![1, 1, 2, 2] || ia != vec![0, 1, 1, 2] {
        return Err(fail("counters", format!("ours: {iv:?} {ia:?}")));
    }
    let (ivl, ial) = s.counters(true);
    if ivl != vec![2, 2, 3, 3] || ial != vec![1, 2, 2, 3] {
        return Err(fail("counters", format!("literal: {ivl:?} {ial:?}")));
    }
    Ok(())
}

/// Rotation isometry and the relative-position property.
pub fn check_rope_isometry() -> Result<()> {
    let mut rng = RngStream::derive(4007, "check.rope");
    let layout = RopeLayout { d_head: 4, ratios: (1.0, 1.0, 1.0), base: 10_000.0 };
    let ang = build_rope_angles(RopeKind::Audio1d { len: 8 }, &layout)?;
    let x = Tensor::randn(&[1, 1, 8, 4], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let r = tape.rope(xv, &ang, 0)?;
    let out = tape.value(r);
    for tok in 0..8 {
        for p in 0..2 {
            let i = tok * 4 + 2 * p;
            let n0 = x.data()[i].hypot(x.data()[i + 1]);
            let n1 = out.data()[i].hypot(out.data()[i + 1]);
            if (n0 - n1).abs() > 1e-12 {
                return Err(fail("rope_isometry", format!("pair norm drift {}", (n0 - n1).abs())));
            }
        }
    }
    // Relative position: inner products depend only on the offset.
    let q = Tensor::randn(&[4], &mut rng);
    let k = Tensor::randn(&[4], &mut rng);
    let rot = |v: &Tensor, pos: usize| -> Vec<f64> {
        let mut o = v.data().to_vec();
        for p in 0..2 {
            let th = ang.data()[pos * 2 + p];
            let (c, s) = (th.cos(), th.sin());
            let (a, b) = (o[2 * p], o[2 * p + 1]);
            o[2 * p] = a * c - b * s;
            o[2 * p + 1] = a * s + b * c;
        }
        o
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for s in 0..4usize {
        let d0 = dot(&rot(&q, 1), &rot(&k, 3));
        let d1 = dot(&rot(&q, 1 + s), &rot(&k, 3 + s));
        if (d0 - d1).abs() > 1e-9 {
            return Err(fail("rope_isometry", format!("relative-position drift {}", (d0 - d1).abs())));
        }
    }
    Ok(())
}

/// Same seed, same losses; frozen tower weights stay bitwise unchanged.
pub fn check_training_determinism() -> Result<()> {
    let cfg = tiny_model_config(8, 1, BlockFamily::Sd3Dual);
    let scene = SyntheticSceneConfig {
        frames: 8,
        height: 4,
        width: 4,
        channels: 2,
        audio_len: 8,
        audio_width: 4,
        ..SyntheticSceneConfig::default()
    };
    let tcfg = TrainerConfig { batch_size: 2, steps: 3, learning_rate: 1e-3, ..TrainerConfig::default() };
    let run = || -> Result<Vec<f64>> {
        let mut model = Model::init(cfg, 7)?;
        let mut data_rng = RngStream::derive(7, "data");
        let scenes = make_dataset(&scene, 4, cfg.text_len, &mut data_rng)?;
        let mut streams = TrainStreams::new(7);
        let mut opt = Adam::new(tcfg.learning_rate, 0);
        let mut losses = Vec::new();
        for step in 0..tcfg.steps {
            let idx: Vec<usize> = (0..tcfg.batch_size).map(|_| streams.batch.below(scenes.len())).collect();
            let batch = assemble_batch(&scenes, &idx)?;
            let info = train_step(&mut model, &batch, &tcfg, &mut opt, &mut streams, step)?;
            losses.push(info.loss);
        }
        Ok(losses)
    };
    let l1 = run()?;
    let l2 = run()?;
    if l1.iter().zip(&l2).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(fail("training_determinism", format!("{l1:?} vs {l2:?}")));
    }

    // Freeze contract: one step must leave every video-tower weight intact.
    let mut frozen_cfg = cfg;
    frozen_cfg.frozen_video = true;
    let mut model = Model::init(frozen_cfg, 9)?;
    let before: Vec<(String, Tensor)> = model
        .params
        .iter()
        .filter(|(n, _)| !model.is_trainable(n))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let mut data_rng = RngStream::derive(9, "data");
    let scenes = make_dataset(&scene, 4, frozen_cfg.text_len, &mut data_rng)?;
    let mut streams = TrainStreams::new(9);
    let mut opt = Adam::new(1e-3, 0);
    let batch = assemble_batch(&scenes, &[0, 1])?;
    train_step(&mut model, &batch, &tcfg, &mut opt, &mut streams, 0)?;
    for (name, old) in before {
        if !model.params.get(&name)?.bit_eq(&old) {
            return Err(fail("training_determinism", format!("frozen weight {name} changed")));
        }
    }
    Ok(())
}

/// The full suite in a fixed order.
pub fn run_all_checks() -> Vec<CheckOutcome> {
    vec![
        CheckOutcome { name: "zero_gate_identity", result: check_zero_gate_identity(10) },
        CheckOutcome { name: "plugin_orthogonality", result: check_plugin_orthogonality(6) },
        CheckOutcome { name: "block_gradients", result: check_block_gradients(2, 1e-5) },
        CheckOutcome { name: "full_model_gradients", result: check_full_model_gradients(1, 1e-5) },
        CheckOutcome { name: "sampler_order", result: check_sampler_orders() },
        CheckOutcome { name: "frechet_oracle", result: check_frechet_oracle() },
        CheckOutcome { name: "av_align_oracle", result: check_av_align_oracle() },
        CheckOutcome { name: "counter_semantics", result: check_counters() },
        CheckOutcome { name: "rope_isometry", result: check_rope_isometry() },
        CheckOutcome { name: "training_determinism", result: check_training_determinism() },
    ]
}
