//! Experiment pipeline: the operations behind the CLI subcommands.
//!
//! `train` writes a checkpoint and an append-only loss log, `sample` writes
//! latent containers with text sidecars, `eval` scores generated clips
//! against a held-out synthetic set (Fréchet features come from a fixed
//! seeded random projection, exercising the embedding-file path end to
//! end), and `check` runs the property suite. Everything is a pure
//! function of (config, seed); running twice produces identical bytes.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checks::run_all_checks;
use crate::config::ExperimentConfig;
use crate::containers::{Checkpoint, LatentFile};
use crate::error::{Error, Result};
use crate::flow::{train_step, Adam, TrainStreams, UNCOND_TOKEN};
use crate::metrics::{
    audio_envelope_from_latent, av_align, avh_score, cosine_agg, detect_audio_peaks,
    detect_video_peaks, frechet_distance, gaussian_stats, javis_score, motion_from_latent,
    read_embeddings, uniform_indices, write_embeddings, AudioPeakConfig, CosineMode, CosineSample,
    EmbeddingSet, Role,
};
use crate::model::Model;
use crate::rng::RngStream;
use crate::sampler::{generate, GenerateRequest};
use crate::synth::{assemble_batch, make_dataset, Scene};
use crate::tensor::Tensor;

/// Format with six significant digits, the report convention.
pub fn format_sig(v: f64) -> String {
    if v == 0.0 {
        return "0.00000".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.5e}")
    }
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.bin")
}

pub fn train_log_path(out_dir: &Path) -> PathBuf {
    out_dir.join("train.log")
}

pub fn sample_path(out_dir: &Path, index: usize) -> PathBuf {
    out_dir.join(format!("sample_{index:03}.bin"))
}

pub fn eval_report_path(out_dir: &Path) -> PathBuf {
    out_dir.join("eval_report.txt")
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Train from scratch per the config; write the loss log and the final
/// checkpoint. With zero steps only the initial checkpoint is written.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    let mut model = Model::init(cfg.model, cfg.seed)?;
    let mut data_rng = RngStream::derive(cfg.seed, "data.train");
    let scenes = make_dataset(&cfg.scene, cfg.train_scenes, cfg.model.text_len, &mut data_rng)?;
    let mut streams = TrainStreams::new(cfg.seed);
    let mut opt = Adam::new(cfg.trainer.learning_rate, cfg.trainer.warmup_steps);

    let mut log = fs::File::create(train_log_path(&out_dir))?;
    let mut losses = Vec::with_capacity(cfg.trainer.steps as usize);
    for step in 0..cfg.trainer.steps {
        let indices: Vec<usize> = (0..cfg.trainer.batch_size)
            .map(|_| streams.batch.below(scenes.len()))
            .collect();
        let batch = assemble_batch(&scenes, &indices)?;
        let info = train_step(&mut model, &batch, &cfg.trainer, &mut opt, &mut streams, step)?;
        losses.push(info.loss);
        writeln!(
            log,
            "{step}, {}, {}, {}",
            format_sig(info.loss),
            format_sig(info.p_mask),
            format_sig(info.lr)
        )?;
    }
    log.flush()?;

    let ckpt = Checkpoint {
        config_echo: cfg.canonical_echo(),
        seed: cfg.seed,
        step: cfg.trainer.steps,
        stream_counters: streams.counters(),
        weights: model.export_weights(),
    };
    let path = checkpoint_path(&out_dir);
    ckpt.save(&path)?;
    Ok(TrainReport { losses, checkpoint: path })
}

/// Rebuild the model from a checkpoint, verifying shapes against the
/// config.
pub fn load_model(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Model> {
    let path = checkpoint_path(out_dir);
    if !path.exists() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", path.display())));
    }
    let ckpt = Checkpoint::load(&path)?;
    let mut model = Model::init(cfg.model, ckpt.seed)?;
    model.load_weights(&ckpt.weights)?;
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct SampleReport {
    pub files: Vec<PathBuf>,
}

/// Generate `sample.count` clips from the checkpointed model. Prompts are
/// drawn from the scene distribution; each clip gets a latent container and
/// a text sidecar.
pub fn run_sample(cfg: &ExperimentConfig) -> Result<SampleReport> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    let model = load_model(cfg, &out_dir)?;
    let n = cfg.sample_count;
    let mut prompt_rng = RngStream::derive(cfg.seed, "sample.prompts");
    let prompts = make_dataset(&cfg.scene, n, cfg.model.text_len, &mut prompt_rng)?;
    let ids: Vec<usize> = prompts.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    let uncond: Vec<usize> = vec![UNCOND_TOKEN; n * cfg.model.text_len];
    let req = GenerateRequest {
        batch: n,
        frames: cfg.scene.frames,
        height: cfg.scene.height,
        width: cfg.scene.width,
        audio_len: cfg.scene.audio_len,
    };
    let (videos, audios) = generate(&model, &ids, &uncond, &req, &cfg.sampler, cfg.seed)?;

    let per_v = videos.numel() / n;
    let per_a = audios.numel() / n;
    let vshape = videos.shape()[1..].to_vec();
    let ashape = audios.shape()[1..].to_vec();
    let mut files = Vec::with_capacity(n);
    for i in 0..n {
        let v = Tensor::new(vshape.clone(), videos.data()[i * per_v..(i + 1) * per_v].to_vec())?;
        let a = Tensor::new(ashape.clone(), audios.data()[i * per_a..(i + 1) * per_a].to_vec())?;
        let path = sample_path(&out_dir, i);
        LatentFile {
            tensors: vec![("video".into(), v), ("audio".into(), a)],
        }
        .save(&path)?;
        let tokens: Vec<String> = prompts[i].tokens.iter().map(|t| t.to_string()).collect();
        let sidecar = format!(
            "sample_index = {i}\nseed = {}\nprompt_tokens = {}\nsolver = {:?}\nguidance = {}\n# config\n{}",
            cfg.seed,
            tokens.join(" "),
            cfg.sampler.solver,
            format_sig(cfg.sampler.guidance),
            cfg.canonical_echo()
        );
        fs::write(path.with_extension("txt"), sidecar)?;
        files.push(path);
    }
    Ok(SampleReport { files })
}

/// Fixed random projection of a flat slice into `dim` features.
struct FeatureMap {
    weights: Vec<f64>,
    dim: usize,
    input: usize,
}

impl FeatureMap {
    fn new(seed: u64, name: &str, input: usize, dim: usize) -> FeatureMap {
        let mut rng = RngStream::derive(seed, name);
        let scale = 1.0 / (input as f64).sqrt();
        let weights = (0..dim * input).map(|_| rng.normal() * scale).collect();
        FeatureMap { weights, dim, input }
    }

    fn apply(&self, data: &[f64]) -> Vec<f64> {
        debug_assert_eq!(data.len(), self.input);
        (0..self.dim)
            .map(|r| {
                self.weights[r * self.input..(r + 1) * self.input]
                    .iter()
                    .zip(data)
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect()
    }
}

fn token_histogram(tokens: &[usize], vocab: usize) -> Vec<f64> {
    let mut h = vec![0.0; vocab];
    for &t in tokens {
        h[t.min(vocab - 1)] += 1.0;
    }
    h
}

/// One generated or real clip plus its conditioning tokens.
struct EvalClip {
    video: Tensor,
    audio: Tensor,
    tokens: Vec<usize>,
}

/// Evaluate the checkpointed model: generate clips, score them against a
/// held-out synthetic set, and write `name=value` report lines.
pub fn run_eval(cfg: &ExperimentConfig) -> Result<Vec<(String, f64)>> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    let model = load_model(cfg, &out_dir)?;
    let n = cfg.eval_samples;

    // Generated set, conditioned on freshly drawn prompts.
    let mut prompt_rng = RngStream::derive(cfg.seed, "eval.prompts");
    let prompts = make_dataset(&cfg.scene, n, cfg.model.text_len, &mut prompt_rng)?;
    let ids: Vec<usize> = prompts.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    let uncond: Vec<usize> = vec![UNCOND_TOKEN; n * cfg.model.text_len];
    let req = GenerateRequest {
        batch: n,
        frames: cfg.scene.frames,
        height: cfg.scene.height,
        width: cfg.scene.width,
        audio_len: cfg.scene.audio_len,
    };
    let (videos, audios) = generate(&model, &ids, &uncond, &req, &cfg.sampler, cfg.seed.wrapping_add(1))?;
    let per_v = videos.numel() / n;
    let per_a = audios.numel() / n;
    let vshape = videos.shape()[1..].to_vec();
    let ashape = audios.shape()[1..].to_vec();
    let generated: Vec<EvalClip> = (0..n)
        .map(|i| {
            Ok(EvalClip {
                video: Tensor::new(vshape.clone(), videos.data()[i * per_v..(i + 1) * per_v].to_vec())?,
                audio: Tensor::new(ashape.clone(), audios.data()[i * per_a..(i + 1) * per_a].to_vec())?,
                tokens: prompts[i].tokens.clone(),
            })
        })
        .collect::<Result<_>>()?;

    // Held-out real set.
    let mut real_rng = RngStream::derive(cfg.seed, "eval.data");
    let real_scenes: Vec<Scene> = make_dataset(&cfg.scene, n, cfg.model.text_len, &mut real_rng)?;
    let real: Vec<EvalClip> = real_scenes
        .into_iter()
        .map(|s| EvalClip { video: s.video, audio: s.audio, tokens: s.tokens })
        .collect();

    let report = score_sets(cfg, &out_dir, &generated, &real)?;
    let mut text = String::new();
    for (k, v) in &report {
        text.push_str(&format!("{k}={}\n", format_sig(*v)));
    }
    fs::write(eval_report_path(&out_dir), &text)?;
    Ok(report)
}

fn score_sets(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    generated: &[EvalClip],
    real: &[EvalClip],
) -> Result<Vec<(String, f64)>> {
    let scene = &cfg.scene;
    let dim = cfg.eval_feature_dim;
    let fseed = cfg.eval_feature_seed;
    let video_numel = scene.channels * scene.frames * scene.height * scene.width;
    let frame_numel = scene.channels * scene.height * scene.width;
    let audio_numel = scene.audio_len * scene.audio_width;
    let vocab = cfg.model.text_vocab;

    let map_video = FeatureMap::new(fseed, "proj.video", video_numel, dim);
    let map_audio = FeatureMap::new(fseed, "proj.audio", audio_numel, dim);
    let map_frame = FeatureMap::new(fseed, "proj.frame", frame_numel, dim);
    let map_text = FeatureMap::new(fseed, "proj.text", vocab, dim);
    let map_video2 = FeatureMap::new(fseed, "proj.video.cavp", video_numel, dim);
    let map_audio2 = FeatureMap::new(fseed, "proj.audio.cavp", audio_numel, dim);
    let map_awin = FeatureMap::new(fseed, "proj.audio.window", scene.audio_width, dim);

    let frame_slice = |clip: &EvalClip, f: usize| -> Vec<f64> {
        // [C, F, H, W] -> flat (c, h, w) values of frame f.
        let plane = scene.height * scene.width;
        let mut out = Vec::with_capacity(frame_numel);
        for c in 0..scene.channels {
            let base = (c * scene.frames + f) * plane;
            out.extend_from_slice(&clip.video.data()[base..base + plane]);
        }
        out
    };

    // Frechet features through the embedding-file interface; the fan-out
    // over clips is order-preserving, so the rows are deterministic.
    let emb_of = |clips: &[EvalClip], map: &FeatureMap, video: bool, role: Role| -> Result<EmbeddingSet> {
        let rows: Vec<Vec<f64>> = crate::par::map_indexed(clips.len(), map.input * map.dim, |i| {
            let c = &clips[i];
            map.apply(if video { c.video.data() } else { c.audio.data() })
        });
        EmbeddingSet::from_rows(&rows, role)
    };
    let sets = [
        ("gen_video.emb", emb_of(generated, &map_video, true, Role::Video)?),
        ("real_video.emb", emb_of(real, &map_video, true, Role::Video)?),
        ("gen_audio.emb", emb_of(generated, &map_audio, false, Role::Audio)?),
        ("real_audio.emb", emb_of(real, &map_audio, false, Role::Audio)?),
    ];
    let mut loaded = Vec::new();
    for (name, set) in &sets {
        let path = out_dir.join(name);
        write_embeddings(&path, set)?;
        loaded.push(read_embeddings(&path)?);
    }
    let fvd = frechet_distance(&gaussian_stats(&loaded[0])?, &gaussian_stats(&loaded[1])?)?;
    let fad = frechet_distance(&gaussian_stats(&loaded[2])?, &gaussian_stats(&loaded[3])?)?;

    // Per-clip cosine and synchrony scores, fanned out per sample with an
    // index-ordered fold.
    struct ClipScores {
        clip: CosineSample,
        clap: CosineSample,
        ib: CosineSample,
        cavp: CosineSample,
        avh: f64,
        javis: f64,
        align: f64,
    }
    let clip_frames = 48.min(scene.frames);
    let per_clip: Vec<Result<ClipScores>> = crate::par::map_indexed(generated.len(), 1 << 16, |i| {
        let clip = &generated[i];
        let text_feat = map_text.apply(&token_histogram(&clip.tokens, vocab));
        let frame_ids = uniform_indices(scene.frames, clip_frames);
        let frames: Vec<Vec<f64>> = frame_ids.iter().map(|&f| map_frame.apply(&frame_slice(clip, f))).collect();
        let audio_feat = map_audio.apply(clip.audio.data());

        let all_frames: Vec<Vec<f64>> =
            (0..scene.frames).map(|f| map_frame.apply(&frame_slice(clip, f))).collect();
        let avh = avh_score(&all_frames, &audio_feat)?;

        let windows = crate::metrics::cosine::javis_windows(scene.frames, &cfg.javis);
        let steps_per_frame = scene.audio_len as f64 / scene.frames as f64;
        let window_audio: Vec<Vec<f64>> = windows
            .iter()
            .map(|&(start, end)| {
                let lo = ((start as f64) * steps_per_frame).floor() as usize;
                let hi = (((end as f64) * steps_per_frame).ceil() as usize).clamp(lo + 1, scene.audio_len);
                let mut pooled = vec![0.0; scene.audio_width];
                for l in lo..hi {
                    for (p, &v) in pooled
                        .iter_mut()
                        .zip(&clip.audio.data()[l * scene.audio_width..(l + 1) * scene.audio_width])
                    {
                        *p += v;
                    }
                }
                pooled.iter_mut().for_each(|p| *p /= (hi - lo) as f64);
                map_awin.apply(&pooled)
            })
            .collect();
        let javis = javis_score(&all_frames, &window_audio, &cfg.javis)?;
        let align = clip_av_align(cfg, clip)?;
        Ok(ClipScores {
            clip: CosineSample::Frames { frames, reference: text_feat.clone() },
            clap: CosineSample::Pair { left: text_feat, right: audio_feat.clone() },
            ib: CosineSample::Pair { left: map_video.apply(clip.video.data()), right: audio_feat },
            cavp: CosineSample::Pair {
                left: map_video2.apply(clip.video.data()),
                right: map_audio2.apply(clip.audio.data()),
            },
            avh,
            javis,
            align,
        })
    });
    let mut clip_samples = Vec::new();
    let mut clap_samples = Vec::new();
    let mut ib_samples = Vec::new();
    let mut cavp_samples = Vec::new();
    let mut avh_total = 0.0;
    let mut javis_total = 0.0;
    let mut align_total = 0.0;
    for scores in per_clip {
        let s = scores?;
        clip_samples.push(s.clip);
        clap_samples.push(s.clap);
        ib_samples.push(s.ib);
        cavp_samples.push(s.cavp);
        avh_total += s.avh;
        javis_total += s.javis;
        align_total += s.align;
    }
    let clip_score = cosine_agg(CosineMode::ClipVideo, &clip_samples)?;
    let clap_score = cosine_agg(CosineMode::ClapAudio, &clap_samples)?;
    let ib_score = cosine_agg(CosineMode::IbAv, &ib_samples)?;
    let cavp_score = cosine_agg(CosineMode::Cavp, &cavp_samples)?;
    let n = generated.len() as f64;

    Ok(vec![
        ("fvd".to_string(), fvd),
        ("fad".to_string(), fad),
        ("clip".to_string(), clip_score),
        ("clap".to_string(), clap_score),
        ("cavp".to_string(), cavp_score),
        ("ib_av".to_string(), ib_score),
        ("avh".to_string(), avh_total / n),
        ("javis".to_string(), javis_total / n),
        ("av_align".to_string(), align_total / n),
    ])
}

/// Peak-alignment score of one clip from the default detectors.
fn clip_av_align(cfg: &ExperimentConfig, clip: &EvalClip) -> Result<f64> {
    let motion = motion_from_latent(&clip.video)?;
    let vp = detect_video_peaks(&motion, 3.0, 2)?;
    let env = audio_envelope_from_latent(&clip.audio)?;
    let acfg = AudioPeakConfig {
        sample_rate: cfg.scene.audio_rate(),
        fps: cfg.scene.fps,
        window: 1,
        hop: 1,
        k_mad: 3.0,
        min_separation_s: 2.0 / cfg.scene.fps,
    };
    let ap = detect_audio_peaks(&env, &acfg)?;
    Ok(av_align(&ap, &vp, cfg.av_tolerance))
}

/// Run the property suite; returns the pass/fail lines printed by the CLI.
pub fn run_check() -> (Vec<String>, bool) {
    let mut lines = Vec::new();
    let mut all_ok = true;
    for outcome in run_all_checks() {
        match outcome.result {
            Ok(()) => lines.push(format!("PASS {}", outcome.name)),
            Err(e) => {
                all_ok = false;
                lines.push(format!("FAIL {} ({e})", outcome.name));
            }
        }
    }
    (lines, all_ok)
}

/// Alignment of a generated latent pair using the ground-truth-style
/// detectors; exposed for the acceptance suite.
pub fn latent_pair_alignment(cfg: &ExperimentConfig, video: &Tensor, audio: &Tensor, tolerance: usize) -> Result<f64> {
    let clip = EvalClip {
        video: video.clone(),
        audio: audio.clone(),
        tokens: Vec::new(),
    };
    let mut cfg2 = cfg.clone();
    cfg2.av_tolerance = tolerance;
    clip_av_align(&cfg2, &clip)
}
