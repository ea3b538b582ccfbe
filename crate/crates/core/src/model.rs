//! Model assembly: towers, schedules, conditioning regimes, and heads.
//!
//! The model predicts a joint velocity `(u_v, u_a)` for the video and audio
//! latents. Three regimes are supported: from-scratch dual-stream training,
//! plug-in adaptation of a frozen video tower, and the read-only-text tower
//! family. Text conditioning is either static (every block sees the initial
//! text state) or dynamic (a shared text state threads through an
//! alternating video/audio block schedule).

use crate::blocks::{
    dual_stream_block, omni_block, wan_block, AttentionWeights, AttnScale, DualStreamWeights,
    OmniBlockWeights, OmniMode, WanBlockWeights,
};
use crate::error::{Error, Result};
use crate::modulation::{time_embed, SlotMlpWeights, TimeEmbedWeights};
use crate::nn::{Activation, Mlp};
use crate::params::{BoundParams, ParamStore};
use crate::rng::RngStream;
use crate::rope::{
    build_rope_angles, embed_audio, patchify_video, unpatchify_video, AudioEmbedConfig,
    AudioEmbedWeights, PatchConfig, RopeKind, RopeLayout,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockFamily {
    Sd3Dual,
    Wan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulePolicy {
    StrictAlternate,
    VideoFirstRatio,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub video_blocks: usize,
    pub audio_blocks: usize,
    pub omni_blocks: usize,
    pub width: usize,
    pub n_heads: usize,
    pub family: BlockFamily,
    pub conditioning: Conditioning,
    pub frozen_video: bool,
    pub patch: PatchConfig,
    pub audio_embed: AudioEmbedConfig,
    pub rope: RopeLayout,
    pub attn_scale: AttnScale,
    pub schedule_policy: SchedulePolicy,
    pub text_vocab: usize,
    pub text_len: usize,
    pub time_freqs: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.n_heads == 0 || self.width % self.n_heads != 0 {
            return Err(Error::invalid(
                "model_config",
                format!("width {} not divisible by {} heads", self.width, self.n_heads),
            ));
        }
        let d_head = self.width / self.n_heads;
        if self.rope.d_head != d_head {
            return Err(Error::invalid(
                "model_config",
                format!("rope d_head {} != width/heads {}", self.rope.d_head, d_head),
            ));
        }
        if d_head % 2 != 0 {
            return Err(Error::invalid("model_config", format!("odd d_head {}", d_head)));
        }
        if self.patch.d != self.width || self.audio_embed.d != self.width {
            return Err(Error::invalid("model_config", "embedder width mismatch"));
        }
        if self.audio_embed.pos_kernel % 2 == 0 {
            return Err(Error::invalid("model_config", "positional conv kernel must be odd"));
        }
        if self.conditioning == Conditioning::Dynamic && self.family != BlockFamily::Sd3Dual {
            return Err(Error::invalid(
                "model_config",
                "dynamic conditioning requires the dual-stream family (read-only text cannot be updated)",
            ));
        }
        if self.text_vocab < 2 {
            return Err(Error::invalid("model_config", "text vocab needs at least pad + one token"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.width / self.n_heads
    }
}

// ---- block schedule -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Video,
    Audio,
}

/// Ordered tower schedule for dynamic conditioning, with derived per-step
/// counters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSchedule {
    pub order: Vec<BlockKind>,
}

impl BlockSchedule {
    pub fn build(video_blocks: usize, audio_blocks: usize, policy: SchedulePolicy) -> Self {
        let order = match policy {
            SchedulePolicy::StrictAlternate => {
                let mut order = Vec::with_capacity(video_blocks + audio_blocks);
                let common = video_blocks.min(audio_blocks);
                for _ in 0..common {
                    order.push(BlockKind::Video);
                    order.push(BlockKind::Audio);
                }
                for _ in common..video_blocks {
                    order.push(BlockKind::Video);
                }
                for _ in common..audio_blocks {
                    order.push(BlockKind::Audio);
                }
                order
            }
            SchedulePolicy::VideoFirstRatio => {
                // Bresenham-style interleave: keep emitted fractions close,
                // video wins ties.
                let mut order = Vec::with_capacity(video_blocks + audio_blocks);
                let (mut nv, mut na) = (0usize, 0usize);
                while nv < video_blocks || na < audio_blocks {
                    let take_video = if nv >= video_blocks {
                        false
                    } else if na >= audio_blocks {
                        true
                    } else {
                        (nv + 1) * audio_blocks <= (na + 1) * video_blocks
                    };
                    if take_video {
                        order.push(BlockKind::Video);
                        nv += 1;
                    } else {
                        order.push(BlockKind::Audio);
                        na += 1;
                    }
                }
                order
            }
        };
        BlockSchedule { order }
    }

    /// Per-step counters `(i_v, i_a)`. In the default one-based reading,
    /// `i_v(l)` counts the video blocks among steps `1..=l`, so the first
    /// video step reads 1. `literal_offset` adds the extra +1 of the
    /// published formula, exposed for audit only.
    pub fn counters(&self, literal_offset: bool) -> (Vec<usize>, Vec<usize>) {
        let off = usize::from(literal_offset);
        let mut iv = Vec::with_capacity(self.order.len());
        let mut ia = Vec::with_capacity(self.order.len());
        let (mut nv, mut na) = (0usize, 0usize);
        for kind in &self.order {
            match kind {
                BlockKind::Video => nv += 1,
                BlockKind::Audio => na += 1,
            }
            iv.push(nv + off);
            ia.push(na + off);
        }
        (iv, ia)
    }
}

// ---- model -------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Name prefixes owned by the pretrained video backbone; with
/// `frozen_video` these are excluded from the trainable set.
pub const FROZEN_PREFIXES: [&str; 3] = ["video.", "time.", "text."];

fn xavier(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
    Tensor::randn_scaled(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

impl Model {
    /// Fresh model with gates (and the cross-attention output projections)
    /// zero-initialized, so every block starts as the identity on its
    /// residual path.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = RngStream::derive(seed, "model.init");
        let d = config.width;
        let mut p = ParamStore::new();

        let nf = config.time_freqs;
        p.insert("time.w1", xavier(&[2 * nf, d], 2 * nf, &mut rng));
        p.insert("time.b1", Tensor::zeros(&[d]));
        p.insert("time.w2", xavier(&[d, d], d, &mut rng));
        p.insert("time.b2", Tensor::zeros(&[d]));

        p.insert("text.table", Tensor::randn(&[config.text_vocab, d], &mut rng));

        let pe = config.patch.patch_elems();
        p.insert("video.patch.w", xavier(&[pe, d], pe, &mut rng));
        p.insert("video.patch.b", Tensor::zeros(&[d]));
        p.insert("video.head.w", xavier(&[d, pe], d, &mut rng));
        p.insert("video.head.b", Tensor::zeros(&[pe]));

        let ae = &config.audio_embed;
        p.insert("audio.embed.w", xavier(&[ae.d_a, d], ae.d_a, &mut rng));
        p.insert("audio.embed.b", Tensor::zeros(&[d]));
        for layer in 0..ae.pos_layers {
            let (w, b) = if layer + 1 == ae.pos_layers {
                // Zero-init the last conv so the embedding starts as the
                // pure linear projection.
                (Tensor::zeros(&[d, ae.pos_kernel]), Tensor::zeros(&[d]))
            } else {
                (xavier(&[d, ae.pos_kernel], ae.pos_kernel, &mut rng), Tensor::zeros(&[d]))
            };
            p.insert(format!("audio.embed.pos{layer:02}.w"), w);
            p.insert(format!("audio.embed.pos{layer:02}.b"), b);
        }
        p.insert("audio.head.w", xavier(&[d, ae.d_a], d, &mut rng));
        p.insert("audio.head.b", Tensor::zeros(&[ae.d_a]));

        for tower in ["video", "audio"] {
            let count = if tower == "video" { config.video_blocks } else { config.audio_blocks };
            for i in 0..count {
                let pre = format!("{tower}.block{i:02}");
                insert_attn(&mut p, &pre, d, &mut rng);
                match config.family {
                    BlockFamily::Sd3Dual => {
                        insert_mlp(&mut p, &format!("{pre}.mlp_x"), d, &mut rng);
                        insert_mlp(&mut p, &format!("{pre}.mlp_y"), d, &mut rng);
                        insert_slots(&mut p, &format!("{pre}.slots_x"), d);
                        insert_slots(&mut p, &format!("{pre}.slots_y"), d);
                    }
                    BlockFamily::Wan => {
                        p.insert(format!("{pre}.cross.wq"), xavier(&[d, d], d, &mut rng));
                        p.insert(format!("{pre}.cross.wk"), xavier(&[d, d], d, &mut rng));
                        p.insert(format!("{pre}.cross.wv"), xavier(&[d, d], d, &mut rng));
                        p.insert(format!("{pre}.cross.wo"), Tensor::zeros(&[d, d]));
                        insert_mlp(&mut p, &format!("{pre}.mlp"), d, &mut rng);
                        insert_slots(&mut p, &format!("{pre}.slots"), d);
                    }
                }
            }
        }

        for i in 0..config.omni_blocks {
            let pre = format!("omni.block{i:02}");
            insert_attn(&mut p, &pre, d, &mut rng);
            for m in ["v", "y", "a"] {
                insert_mlp(&mut p, &format!("{pre}.mlp_{m}"), d, &mut rng);
                insert_slots(&mut p, &format!("{pre}.slots_{m}"), d);
            }
        }

        Ok(Model { config, params: p })
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        if self.config.frozen_video {
            !FROZEN_PREFIXES.iter().any(|pre| name.starts_with(pre))
        } else {
            true
        }
    }

    /// Sorted names of the weights the optimizer may update.
    pub fn trainable_parameters(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| self.is_trainable(n))
            .map(str::to_string)
            .collect()
    }

    /// Leaf every weight into the tape. With `for_training` the trainable
    /// subset participates in differentiation.
    pub fn bind(&self, tape: &mut Tape, for_training: bool) -> BoundParams {
        BoundParams::bind(tape, &self.params, |name| for_training && self.is_trainable(name))
    }

    /// Text token ids -> embedded text state `[B, L_y, D]`.
    pub fn embed_text(&self, tape: &mut Tape, vars: &BoundParams, ids: &[usize], batch: usize) -> Result<Var> {
        if ids.len() != batch * self.config.text_len {
            return Err(Error::shape(
                "embed_text",
                format!("{} ids for batch {} x len {}", ids.len(), batch, self.config.text_len),
            ));
        }
        let table = vars.var("text.table")?;
        tape.embedding(table, ids, batch, self.config.text_len)
    }

    fn dual_weights(&self, vars: &BoundParams, pre: &str) -> Result<DualStreamWeights> {
        Ok(DualStreamWeights {
            attn: self.attn_weights(vars, pre)?,
            mlp_x: self.mlp_weights(vars, &format!("{pre}.mlp_x"))?,
            mlp_y: self.mlp_weights(vars, &format!("{pre}.mlp_y"))?,
            slots_x: SlotMlpWeights {
                w: vars.var(&format!("{pre}.slots_x.w"))?,
                b: vars.var(&format!("{pre}.slots_x.b"))?,
            },
            slots_y: SlotMlpWeights {
                w: vars.var(&format!("{pre}.slots_y.w"))?,
                b: vars.var(&format!("{pre}.slots_y.b"))?,
            },
        })
    }

    fn wan_weights(&self, vars: &BoundParams, pre: &str) -> Result<WanBlockWeights> {
        Ok(WanBlockWeights {
            self_attn: self.attn_weights(vars, pre)?,
            cross_q: vars.var(&format!("{pre}.cross.wq"))?,
            cross_k: vars.var(&format!("{pre}.cross.wk"))?,
            cross_v: vars.var(&format!("{pre}.cross.wv"))?,
            cross_o: vars.var(&format!("{pre}.cross.wo"))?,
            mlp: self.mlp_weights(vars, &format!("{pre}.mlp"))?,
            slots: SlotMlpWeights {
                w: vars.var(&format!("{pre}.slots.w"))?,
                b: vars.var(&format!("{pre}.slots.b"))?,
            },
        })
    }

    fn omni_weights(&self, vars: &BoundParams, pre: &str) -> Result<OmniBlockWeights> {
        Ok(OmniBlockWeights {
            attn: self.attn_weights(vars, pre)?,
            mlp_v: self.mlp_weights(vars, &format!("{pre}.mlp_v"))?,
            mlp_y: self.mlp_weights(vars, &format!("{pre}.mlp_y"))?,
            mlp_a: self.mlp_weights(vars, &format!("{pre}.mlp_a"))?,
            slots_v: SlotMlpWeights {
                w: vars.var(&format!("{pre}.slots_v.w"))?,
                b: vars.var(&format!("{pre}.slots_v.b"))?,
            },
            slots_y: SlotMlpWeights {
                w: vars.var(&format!("{pre}.slots_y.w"))?,
                b: vars.var(&format!("{pre}.slots_y.b"))?,
            },
            slots_a: SlotMlpWeights {
                w: vars.var(&format!("{pre}.slots_a.w"))?,
                b: vars.var(&format!("{pre}.slots_a.b"))?,
            },
        })
    }

    fn attn_weights(&self, vars: &BoundParams, pre: &str) -> Result<AttentionWeights> {
        Ok(AttentionWeights {
            w_q: vars.var(&format!("{pre}.attn.wq"))?,
            w_k: vars.var(&format!("{pre}.attn.wk"))?,
            w_v: vars.var(&format!("{pre}.attn.wv"))?,
            w_o: vars.var(&format!("{pre}.attn.wo"))?,
            n_heads: self.config.n_heads,
        })
    }

    fn mlp_weights(&self, vars: &BoundParams, pre: &str) -> Result<Mlp> {
        Ok(Mlp {
            w1: vars.var(&format!("{pre}.w1"))?,
            b1: vars.var(&format!("{pre}.b1"))?,
            w2: vars.var(&format!("{pre}.w2"))?,
            b2: vars.var(&format!("{pre}.b2"))?,
            act: Activation::Gelu,
        })
    }

    fn time_weights(&self, vars: &BoundParams) -> Result<TimeEmbedWeights> {
        Ok(TimeEmbedWeights {
            w1: vars.var("time.w1")?,
            b1: vars.var("time.b1")?,
            w2: vars.var("time.w2")?,
            b2: vars.var("time.b2")?,
        })
    }

    fn audio_embed_weights(&self, vars: &BoundParams) -> Result<AudioEmbedWeights> {
        let mut pos = Vec::with_capacity(self.config.audio_embed.pos_layers);
        for layer in 0..self.config.audio_embed.pos_layers {
            pos.push((
                vars.var(&format!("audio.embed.pos{layer:02}.w"))?,
                vars.var(&format!("audio.embed.pos{layer:02}.b"))?,
            ));
        }
        Ok(AudioEmbedWeights {
            w: vars.var("audio.embed.w")?,
            b: vars.var("audio.embed.b")?,
            pos,
        })
    }

    fn run_tower_static(
        &self,
        tape: &mut Tape,
        vars: &BoundParams,
        tower: &str,
        count: usize,
        mut x: Var,
        y0: Var,
        t_emb: Var,
        rope: &Tensor,
    ) -> Result<Var> {
        for i in 0..count {
            let pre = format!("{tower}.block{i:02}");
            x = match self.config.family {
                BlockFamily::Sd3Dual => {
                    let wts = self.dual_weights(vars, &pre)?;
                    // Static conditioning: every block reads the initial
                    // text state; its text update is discarded.
                    let (x2, _y2) = dual_stream_block(tape, x, y0, t_emb, &wts, Some(rope), self.config.attn_scale)?;
                    x2
                }
                BlockFamily::Wan => {
                    let wts = self.wan_weights(vars, &pre)?;
                    wan_block(tape, x, y0, t_emb, &wts, Some(rope), self.config.attn_scale)?
                }
            };
        }
        Ok(x)
    }

    /// Video-tower-only pathway: patchify, run the video tower on the
    /// initial text state, project through the video head. This is exactly
    /// the computation the joint forward performs for video under static
    /// conditioning, and stands in for "the base model alone".
    pub fn video_only_forward(
        &self,
        tape: &mut Tape,
        vars: &BoundParams,
        v_sigma: Var,
        y0: Var,
        sigma: &[f64],
    ) -> Result<Var> {
        let (frames, h, w) = video_geometry(tape.shape(v_sigma))?;
        let grid = RopeKind::Video3d {
            frames,
            rows: h / self.config.patch.p_h,
            cols: w / self.config.patch.p_w,
        };
        let rope_v = build_rope_angles(grid, &self.config.rope)?;
        let tw = self.time_weights(vars)?;
        let t_emb = time_embed(tape, sigma, self.config.time_freqs, &tw)?;
        let pw = vars.var("video.patch.w")?;
        let pb = vars.var("video.patch.b")?;
        let v_tok = patchify_video(tape, v_sigma, &self.config.patch, pw, pb)?;
        let v_tok = self.run_tower_static(tape, vars, "video", self.config.video_blocks, v_tok, y0, t_emb, &rope_v)?;
        self.video_head(tape, vars, v_tok, frames, h, w)
    }

    fn video_head(&self, tape: &mut Tape, vars: &BoundParams, v_tok: Var, frames: usize, h: usize, w: usize) -> Result<Var> {
        let hw = vars.var("video.head.w")?;
        let hb = vars.var("video.head.b")?;
        let raw = crate::nn::linear(tape, v_tok, hw, hb)?;
        unpatchify_video(tape, raw, &self.config.patch, frames, h, w)
    }

    /// Full joint forward: `(u_v, u_a) = model((v_sigma, a_sigma), sigma, y0)`.
    /// `omni_mode` masks or drops one modality span inside the omni stack
    /// (training-time robustness); inference passes `OmniMode::None`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_latents(
        &self,
        tape: &mut Tape,
        vars: &BoundParams,
        v_sigma: Var,
        a_sigma: Var,
        y0: Var,
        sigma: &[f64],
        omni_mode: OmniMode,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let (frames, h, w) = video_geometry(tape.shape(v_sigma))?;
        let ash = tape.shape(a_sigma).to_vec();
        if ash.len() != 3 || ash[2] != cfg.audio_embed.d_a {
            return Err(Error::geometry(
                "forward",
                format!("audio latent {:?}, expected [B,L,{}]", ash, cfg.audio_embed.d_a),
            ));
        }
        let l_a = ash[1];
        let batch = ash[0];
        if tape.shape(v_sigma)[0] != batch || sigma.len() != batch {
            return Err(Error::geometry("forward", "batch size mismatch across inputs"));
        }
        let ysh = tape.shape(y0).to_vec();
        if ysh.len() != 3 || ysh[0] != batch || ysh[2] != cfg.width {
            return Err(Error::geometry(
                "forward",
                format!("text state {:?}, expected [B,L,{}]", ysh, cfg.width),
            ));
        }

        let grid = RopeKind::Video3d {
            frames,
            rows: h / cfg.patch.p_h,
            cols: w / cfg.patch.p_w,
        };
        let rope_v = build_rope_angles(grid, &cfg.rope)?;
        let rope_a = build_rope_angles(RopeKind::Audio1d { len: l_a }, &cfg.rope)?;

        let tw = self.time_weights(vars)?;
        let t_emb = time_embed(tape, sigma, cfg.time_freqs, &tw)?;

        let pw = vars.var("video.patch.w")?;
        let pb = vars.var("video.patch.b")?;
        let mut v_tok = patchify_video(tape, v_sigma, &cfg.patch, pw, pb)?;
        let aw = self.audio_embed_weights(vars)?;
        let mut a_tok = embed_audio(tape, a_sigma, &cfg.audio_embed, &aw)?;

        let mut y_state = y0;
        match cfg.conditioning {
            Conditioning::Static => {
                v_tok = self.run_tower_static(tape, vars, "video", cfg.video_blocks, v_tok, y0, t_emb, &rope_v)?;
                a_tok = self.run_tower_static(tape, vars, "audio", cfg.audio_blocks, a_tok, y0, t_emb, &rope_a)?;
            }
            Conditioning::Dynamic => {
                let schedule = BlockSchedule::build(cfg.video_blocks, cfg.audio_blocks, cfg.schedule_policy);
                let (iv, ia) = schedule.counters(false);
                for (step, kind) in schedule.order.iter().enumerate() {
                    match kind {
                        BlockKind::Video => {
                            let pre = format!("video.block{:02}", iv[step] - 1);
                            let wts = self.dual_weights(vars, &pre)?;
                            let (v2, y2) =
                                dual_stream_block(tape, v_tok, y_state, t_emb, &wts, Some(&rope_v), cfg.attn_scale)?;
                            v_tok = v2;
                            y_state = y2;
                        }
                        BlockKind::Audio => {
                            let pre = format!("audio.block{:02}", ia[step] - 1);
                            let wts = self.dual_weights(vars, &pre)?;
                            let (a2, y2) =
                                dual_stream_block(tape, a_tok, y_state, t_emb, &wts, Some(&rope_a), cfg.attn_scale)?;
                            a_tok = a2;
                            y_state = y2;
                        }
                    }
                }
            }
        }

        // Omni blocks see the final text state under dynamic conditioning
        // and the initial one under static.
        let mut y_omni = match cfg.conditioning {
            Conditioning::Dynamic => y_state,
            Conditioning::Static => y0,
        };
        for i in 0..cfg.omni_blocks {
            let pre = format!("omni.block{i:02}");
            let wts = self.omni_weights(vars, &pre)?;
            let (v2, y2, a2) = omni_block(
                tape, v_tok, y_omni, a_tok, t_emb, &wts, &rope_v, &rope_a, cfg.attn_scale, omni_mode,
            )?;
            v_tok = v2;
            y_omni = y2;
            a_tok = a2;
        }

        let u_v = self.video_head(tape, vars, v_tok, frames, h, w)?;
        let ahw = vars.var("audio.head.w")?;
        let ahb = vars.var("audio.head.b")?;
        let u_a = crate::nn::linear(tape, a_tok, ahw, ahb)?;
        Ok((u_v, u_a))
    }

    /// Convenience wrapper binding constants for inference-style calls.
    pub fn forward(
        &self,
        tape: &mut Tape,
        v_sigma: &Tensor,
        a_sigma: &Tensor,
        y0: &Tensor,
        sigma: &[f64],
    ) -> Result<(Tensor, Tensor)> {
        let vars = self.bind(tape, false);
        let v = tape.constant(v_sigma.clone());
        let a = tape.constant(a_sigma.clone());
        let y = tape.constant(y0.clone());
        let (uv, ua) = self.forward_latents(tape, &vars, v, a, y, sigma, OmniMode::None)?;
        Ok((tape.value(uv).clone(), tape.value(ua).clone()))
    }
}

fn video_geometry(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 5 {
        return Err(Error::geometry(
            "forward",
            format!("video latent rank {} != 5", shape.len()),
        ));
    }
    Ok((shape[2], shape[3], shape[4]))
}

fn insert_attn(p: &mut ParamStore, pre: &str, d: usize, rng: &mut RngStream) {
    p.insert(format!("{pre}.attn.wq"), xavier(&[d, d], d, rng));
    p.insert(format!("{pre}.attn.wk"), xavier(&[d, d], d, rng));
    p.insert(format!("{pre}.attn.wv"), xavier(&[d, d], d, rng));
    p.insert(format!("{pre}.attn.wo"), xavier(&[d, d], d, rng));
}

fn insert_mlp(p: &mut ParamStore, pre: &str, d: usize, rng: &mut RngStream) {
    let hidden = 4 * d;
    p.insert(format!("{pre}.w1"), xavier(&[d, hidden], d, rng));
    p.insert(format!("{pre}.b1"), Tensor::zeros(&[hidden]));
    p.insert(format!("{pre}.w2"), xavier(&[hidden, d], hidden, rng));
    p.insert(format!("{pre}.b2"), Tensor::zeros(&[d]));
}

fn insert_slots(p: &mut ParamStore, pre: &str, d: usize) {
    // Zero-initialized: all six slots (and so both gates) start at zero.
    p.insert(format!("{pre}.w"), Tensor::zeros(&[d, 6 * d]));
    p.insert(format!("{pre}.b"), Tensor::zeros(&[6 * d]));
}

impl Model {
    /// Install weights from a checkpoint, verifying the name set and every
    /// shape against this model's configuration.
    pub fn load_weights(&mut self, weights: &[(String, Tensor)]) -> Result<()> {
        if weights.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors in file, model has {}",
                weights.len(),
                self.params.len()
            )));
        }
        for (name, t) in weights {
            let expected = self
                .params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if expected.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} in file, config expects {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
        }
        for (name, t) in weights {
            self.params.set(name, t.clone())?;
        }
        Ok(())
    }

    /// Ordered weight list for checkpointing.
    pub fn export_weights(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }
}
