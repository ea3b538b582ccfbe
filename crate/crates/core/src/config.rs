//! Experiment configuration.
//!
//! Flat UTF-8 `key = value` lines with `#` comments. Unknown keys are hard
//! errors with a line diagnostic. Every field has a default, and
//! `canonical_echo` serializes the full effective configuration in sorted
//! key order — the string embedded in checkpoints and sidecars.

use std::collections::BTreeMap;
use std::path::Path;

use crate::blocks::AttnScale;
use crate::error::{Error, Result};
use crate::flow::{MaskPolicy, TrainerConfig, Weighting};
use crate::metrics::JavisConfig;
use crate::model::{BlockFamily, Conditioning, ModelConfig, SchedulePolicy};
use crate::rope::{AudioEmbedConfig, PatchConfig, RopeLayout};
use crate::sampler::{SamplerConfig, Solver};
use crate::synth::SyntheticSceneConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub sampler: SamplerConfig,
    pub scene: SyntheticSceneConfig,
    pub train_scenes: usize,
    pub eval_samples: usize,
    pub sample_count: usize,
    pub eval_feature_dim: usize,
    pub eval_feature_seed: u64,
    pub av_tolerance: usize,
    pub javis: JavisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scene = SyntheticSceneConfig::default();
        let width = 32;
        let n_heads = 4;
        ExperimentConfig {
            seed: 0,
            out_dir: "out".to_string(),
            model: ModelConfig {
                video_blocks: 2,
                audio_blocks: 2,
                omni_blocks: 1,
                width,
                n_heads,
                family: BlockFamily::Sd3Dual,
                conditioning: Conditioning::Static,
                frozen_video: false,
                patch: PatchConfig { p_h: 2, p_w: 2, c_v: scene.channels, d: width },
                audio_embed: AudioEmbedConfig {
                    d_a: scene.audio_width,
                    d: width,
                    pos_kernel: 3,
                    pos_layers: 2,
                },
                rope: RopeLayout { d_head: width / n_heads, ratios: (2.0, 1.0, 1.0), base: 10_000.0 },
                attn_scale: AttnScale::PerHead,
                schedule_policy: SchedulePolicy::StrictAlternate,
                text_vocab: 2 + scene.event_types,
                text_len: 4,
                time_freqs: 256,
            },
            trainer: TrainerConfig::default(),
            sampler: SamplerConfig::default(),
            scene,
            train_scenes: 64,
            eval_samples: 16,
            sample_count: 4,
            eval_feature_dim: 12,
            eval_feature_seed: 17,
            av_tolerance: 1,
            javis: JavisConfig::default(),
        }
    }
}

fn parse_as<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| Error::Config {
        line,
        detail: format!("cannot parse `{value}` for key `{key}`"),
    })
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_content(&text)
    }

    pub fn from_str_content(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: line_no,
                    detail: format!("expected `key = value`, got `{raw}`"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if let Some(prev) = seen.insert(key.to_string(), line_no) {
                return Err(Error::Config {
                    line: line_no,
                    detail: format!("duplicate key `{key}` (first set on line {prev})"),
                });
            }
            cfg.apply(line_no, key, value)?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    fn apply(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_as(line, key, value)?,
            "out_dir" => self.out_dir = value.to_string(),

            "model.video_blocks" => self.model.video_blocks = parse_as(line, key, value)?,
            "model.audio_blocks" => self.model.audio_blocks = parse_as(line, key, value)?,
            "model.omni_blocks" => self.model.omni_blocks = parse_as(line, key, value)?,
            "model.width" => self.model.width = parse_as(line, key, value)?,
            "model.heads" => self.model.n_heads = parse_as(line, key, value)?,
            "model.family" => {
                self.model.family = match value {
                    "sd3_dual" => BlockFamily::Sd3Dual,
                    "wan" => BlockFamily::Wan,
                    other => {
                        return Err(Error::Config {
                            line,
                            detail: format!("family `{other}` (expected sd3_dual|wan)"),
                        })
                    }
                }
            }
            "model.conditioning" => {
                self.model.conditioning = match value {
                    "static" => Conditioning::Static,
                    "dynamic" => Conditioning::Dynamic,
                    other => {
                        return Err(Error::Config {
                            line,
                            detail: format!("conditioning `{other}` (expected static|dynamic)"),
                        })
                    }
                }
            }
            "model.frozen_video" => self.model.frozen_video = parse_as(line, key, value)?,
            "model.patch_h" => self.model.patch.p_h = parse_as(line, key, value)?,
            "model.patch_w" => self.model.patch.p_w = parse_as(line, key, value)?,
            "model.rope_ratio_t" => self.model.rope.ratios.0 = parse_as(line, key, value)?,
            "model.rope_ratio_h" => self.model.rope.ratios.1 = parse_as(line, key, value)?,
            "model.rope_ratio_w" => self.model.rope.ratios.2 = parse_as(line, key, value)?,
            "model.rope_base" => self.model.rope.base = parse_as(line, key, value)?,
            "model.attn_scale" => {
                self.model.attn_scale = match value {
                    "per_head" => AttnScale::PerHead,
                    "full_width" => AttnScale::FullWidth,
                    other => {
                        return Err(Error::Config {
                            line,
                            detail: format!("attn_scale `{other}` (expected per_head|full_width)"),
                        })
                    }
                }
            }
            "model.schedule" => {
                self.model.schedule_policy = match value {
                    "strict_alternate" => SchedulePolicy::StrictAlternate,
                    "video_first_ratio" => SchedulePolicy::VideoFirstRatio,
                    other => {
                        return Err(Error::Config {
                            line,
                            detail: format!("schedule `{other}` (expected strict_alternate|video_first_ratio)"),
                        })
                    }
                }
            }
            "model.text_len" => self.model.text_len = parse_as(line, key, value)?,
            "model.time_freqs" => self.model.time_freqs = parse_as(line, key, value)?,
            "model.pos_kernel" => self.model.audio_embed.pos_kernel = parse_as(line, key, value)?,
            "model.pos_layers" => self.model.audio_embed.pos_layers = parse_as(line, key, value)?,

            "trainer.weighting" => {
                self.trainer.weighting = match value {
                    "constant_one" => Weighting::ConstantOne,
                    "sigma_one_minus_sigma" => Weighting::SigmaOneMinusSigma,
                    other => {
                        return Err(Error::Config {
                            line,
                            detail: format!("weighting `{other}` (expected constant_one|sigma_one_minus_sigma)"),
                        })
                    }
                }
            }
            "trainer.p_cap" => self.trainer.p_cap = parse_as(line, key, value)?,
            "trainer.s_max" => self.trainer.s_max = parse_as(line, key, value)?,
            "trainer.modality_mode" => {
                self.trainer.modality_mode = match value {
                    "mask" => MaskPolicy::Mask,
                    "drop" => MaskPolicy::Drop,
                    "none" => MaskPolicy::None,
                    other => {
                        return Err(Error::Config {
                            line,
                            detail: format!("modality_mode `{other}` (expected mask|drop|none)"),
                        })
                    }
                }
            }
            "trainer.lr" => self.trainer.learning_rate = parse_as(line, key, value)?,
            "trainer.warmup_steps" => self.trainer.warmup_steps = parse_as(line, key, value)?,
            "trainer.batch_size" => self.trainer.batch_size = parse_as(line, key, value)?,
            "trainer.steps" => self.trainer.steps = parse_as(line, key, value)?,

            "sampler.steps" => self.sampler.n_steps = parse_as(line, key, value)?,
            "sampler.solver" => {
                self.sampler.solver = match value {
                    "euler" => Solver::Euler,
                    "heun" => Solver::Heun,
                    other => {
                        return Err(Error::Config {
                            line,
                            detail: format!("solver `{other}` (expected euler|heun)"),
                        })
                    }
                }
            }
            "sampler.guidance" => self.sampler.guidance = parse_as(line, key, value)?,

            "scene.frames" => self.scene.frames = parse_as(line, key, value)?,
            "scene.height" => self.scene.height = parse_as(line, key, value)?,
            "scene.width" => self.scene.width = parse_as(line, key, value)?,
            "scene.channels" => self.scene.channels = parse_as(line, key, value)?,
            "scene.audio_len" => self.scene.audio_len = parse_as(line, key, value)?,
            "scene.audio_width" => self.scene.audio_width = parse_as(line, key, value)?,
            "scene.events_min" => self.scene.events_min = parse_as(line, key, value)?,
            "scene.events_max" => self.scene.events_max = parse_as(line, key, value)?,
            "scene.event_types" => self.scene.event_types = parse_as(line, key, value)?,
            "scene.coupling" => self.scene.coupling = parse_as(line, key, value)?,
            "scene.background_noise" => self.scene.background_noise = parse_as(line, key, value)?,
            "scene.fps" => self.scene.fps = parse_as(line, key, value)?,

            "data.train_scenes" => self.train_scenes = parse_as(line, key, value)?,
            "eval.samples" => self.eval_samples = parse_as(line, key, value)?,
            "eval.feature_dim" => self.eval_feature_dim = parse_as(line, key, value)?,
            "eval.feature_seed" => self.eval_feature_seed = parse_as(line, key, value)?,
            "eval.av_tolerance" => self.av_tolerance = parse_as(line, key, value)?,
            "eval.javis_window_s" => self.javis.window_s = parse_as(line, key, value)?,
            "eval.javis_hop_s" => self.javis.hop_s = parse_as(line, key, value)?,
            "eval.javis_bottom" => self.javis.bottom_fraction = parse_as(line, key, value)?,
            "sample.count" => self.sample_count = parse_as(line, key, value)?,

            other => {
                return Err(Error::Config {
                    line,
                    detail: format!("unknown key `{other}`"),
                })
            }
        }
        Ok(())
    }

    /// Derive dependent fields and cross-validate.
    fn finish(&mut self) -> Result<()> {
        self.model.patch.c_v = self.scene.channels;
        self.model.patch.d = self.model.width;
        self.model.audio_embed.d_a = self.scene.audio_width;
        self.model.audio_embed.d = self.model.width;
        self.model.rope.d_head = self.model.width / self.model.n_heads.max(1);
        self.model.text_vocab = 2 + self.scene.event_types;
        self.javis.fps = self.scene.fps;
        self.model.validate().map_err(|e| Error::Config { line: 0, detail: e.to_string() })?;
        self.trainer.validate().map_err(|e| Error::Config { line: 0, detail: e.to_string() })?;
        self.scene.validate().map_err(|e| Error::Config { line: 0, detail: e.to_string() })?;
        self.sampler.grid().map_err(|e| Error::Config { line: 0, detail: e.to_string() })?;
        self.scene
            .validate()
            .map_err(|e| Error::Config { line: 0, detail: e.to_string() })?;
        if self.scene.height % self.model.patch.p_h != 0 || self.scene.width % self.model.patch.p_w != 0 {
            return Err(Error::Config {
                line: 0,
                detail: "scene grid not divisible by the patch size".to_string(),
            });
        }
        if self.eval_samples < 2 || self.eval_feature_dim == 0 {
            return Err(Error::Config {
                line: 0,
                detail: "eval needs at least 2 samples and a positive feature dim".to_string(),
            });
        }
        Ok(())
    }

    /// Full effective configuration, one `key = value` line per key,
    /// sorted. Parsing the echo reproduces the config exactly.
    pub fn canonical_echo(&self) -> String {
        let family = match self.model.family {
            BlockFamily::Sd3Dual => "sd3_dual",
            BlockFamily::Wan => "wan",
        };
        let conditioning = match self.model.conditioning {
            Conditioning::Static => "static",
            Conditioning::Dynamic => "dynamic",
        };
        let attn_scale = match self.model.attn_scale {
            AttnScale::PerHead => "per_head",
            AttnScale::FullWidth => "full_width",
        };
        let schedule = match self.model.schedule_policy {
            SchedulePolicy::StrictAlternate => "strict_alternate",
            SchedulePolicy::VideoFirstRatio => "video_first_ratio",
        };
        let weighting = match self.trainer.weighting {
            Weighting::ConstantOne => "constant_one",
            Weighting::SigmaOneMinusSigma => "sigma_one_minus_sigma",
        };
        let modality = match self.trainer.modality_mode {
            MaskPolicy::Mask => "mask",
            MaskPolicy::Drop => "drop",
            MaskPolicy::None => "none",
        };
        let solver = match self.sampler.solver {
            Solver::Euler => "euler",
            Solver::Heun => "heun",
        };
        let mut lines: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("out_dir".into(), self.out_dir.clone()),
            ("model.video_blocks".into(), self.model.video_blocks.to_string()),
            ("model.audio_blocks".into(), self.model.audio_blocks.to_string()),
            ("model.omni_blocks".into(), self.model.omni_blocks.to_string()),
            ("model.width".into(), self.model.width.to_string()),
            ("model.heads".into(), self.model.n_heads.to_string()),
            ("model.family".into(), family.into()),
            ("model.conditioning".into(), conditioning.into()),
            ("model.frozen_video".into(), self.model.frozen_video.to_string()),
            ("model.patch_h".into(), self.model.patch.p_h.to_string()),
            ("model.patch_w".into(), self.model.patch.p_w.to_string()),
            ("model.rope_ratio_t".into(), fmt_f64(self.model.rope.ratios.0)),
            ("model.rope_ratio_h".into(), fmt_f64(self.model.rope.ratios.1)),
            ("model.rope_ratio_w".into(), fmt_f64(self.model.rope.ratios.2)),
            ("model.rope_base".into(), fmt_f64(self.model.rope.base)),
            ("model.attn_scale".into(), attn_scale.into()),
            ("model.schedule".into(), schedule.into()),
            ("model.text_len".into(), self.model.text_len.to_string()),
            ("model.time_freqs".into(), self.model.time_freqs.to_string()),
            ("model.pos_kernel".into(), self.model.audio_embed.pos_kernel.to_string()),
            ("model.pos_layers".into(), self.model.audio_embed.pos_layers.to_string()),
            ("trainer.weighting".into(), weighting.into()),
            ("trainer.p_cap".into(), fmt_f64(self.trainer.p_cap)),
            ("trainer.s_max".into(), self.trainer.s_max.to_string()),
            ("trainer.modality_mode".into(), modality.into()),
            ("trainer.lr".into(), fmt_f64(self.trainer.learning_rate)),
            ("trainer.warmup_steps".into(), self.trainer.warmup_steps.to_string()),
            ("trainer.batch_size".into(), self.trainer.batch_size.to_string()),
            ("trainer.steps".into(), self.trainer.steps.to_string()),
            ("sampler.steps".into(), self.sampler.n_steps.to_string()),
            ("sampler.solver".into(), solver.into()),
            ("sampler.guidance".into(), fmt_f64(self.sampler.guidance)),
            ("scene.frames".into(), self.scene.frames.to_string()),
            ("scene.height".into(), self.scene.height.to_string()),
            ("scene.width".into(), self.scene.width.to_string()),
            ("scene.channels".into(), self.scene.channels.to_string()),
            ("scene.audio_len".into(), self.scene.audio_len.to_string()),
            ("scene.audio_width".into(), self.scene.audio_width.to_string()),
            ("scene.events_min".into(), self.scene.events_min.to_string()),
            ("scene.events_max".into(), self.scene.events_max.to_string()),
            ("scene.event_types".into(), self.scene.event_types.to_string()),
            ("scene.coupling".into(), fmt_f64(self.scene.coupling)),
            ("scene.background_noise".into(), fmt_f64(self.scene.background_noise)),
            ("scene.fps".into(), fmt_f64(self.scene.fps)),
            ("data.train_scenes".into(), self.train_scenes.to_string()),
            ("eval.samples".into(), self.eval_samples.to_string()),
            ("eval.feature_dim".into(), self.eval_feature_dim.to_string()),
            ("eval.feature_seed".into(), self.eval_feature_seed.to_string()),
            ("eval.av_tolerance".into(), self.av_tolerance.to_string()),
            ("eval.javis_window_s".into(), fmt_f64(self.javis.window_s)),
            ("eval.javis_hop_s".into(), fmt_f64(self.javis.hop_s)),
            ("eval.javis_bottom".into(), fmt_f64(self.javis.bottom_fraction)),
            ("sample.count".into(), self.sample_count.to_string()),
        ];
        lines.sort();
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

fn fmt_f64(v: f64) -> String {
    // Round-trippable float formatting.
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("nan") {
        s
    } else {
        format!("{s}.0")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let mut cfg = ExperimentConfig::default();
        cfg.finish().unwrap();
    }

    #[test]
    fn parses_keys_and_comments() {
        let text = "\
# comment line
seed = 42
model.width = 16   # trailing comment
model.heads = 2
trainer.steps = 5
";
        let cfg = ExperimentConfig::from_str_content(text).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.model.width, 16);
        assert_eq!(cfg.trainer.steps, 5);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "seed = 1\nmodle.width = 16\n";
        match ExperimentConfig::from_str_content(text) {
            Err(Error::Config { line, detail }) => {
                assert_eq!(line, 2);
                assert!(detail.contains("modle.width"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn bad_value_reports_line_and_key() {
        let text = "trainer.lr = fast\n";
        match ExperimentConfig::from_str_content(text) {
            Err(Error::Config { line, detail }) => {
                assert_eq!(line, 1);
                assert!(detail.contains("trainer.lr"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        let text = "seed = 1\nseed = 2\n";
        assert!(matches!(
            ExperimentConfig::from_str_content(text),
            Err(Error::Config { line: 2, .. })
        ));
    }

    #[test]
    fn echo_roundtrips() {
        let text = "seed = 9\nmodel.width = 16\nmodel.heads = 2\nscene.coupling = 0.5\ntrainer.lr = 0.001\n";
        let cfg = ExperimentConfig::from_str_content(text).unwrap();
        let echo = cfg.canonical_echo();
        let back = ExperimentConfig::from_str_content(&echo).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(echo, back.canonical_echo());
    }

    #[test]
    fn cross_validation_catches_geometry() {
        let text = "scene.height = 5\n"; // not divisible by patch 2
        assert!(ExperimentConfig::from_str_content(text).is_err());
    }

    #[test]
    fn dynamic_wan_rejected() {
        let text = "model.family = wan\nmodel.conditioning = dynamic\n";
        assert!(ExperimentConfig::from_str_content(text).is_err());
    }
}
