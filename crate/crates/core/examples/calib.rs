use std::path::Path;
use triflow::config::ExperimentConfig;
use triflow::metrics::{audio_envelope_from_latent, detect_audio_peaks, detect_video_peaks, motion_from_latent, AudioPeakConfig};
use triflow::pipeline::{latent_pair_alignment, load_model};
use triflow::rng::RngStream;
use triflow::sampler::{generate, GenerateRequest};
use triflow::tensor::Tensor;

fn main() {
    let cfg_path = std::env::args().nth(1).unwrap_or("/tmp/calib/accept.cfg".into());
    let text = std::fs::read_to_string(cfg_path).unwrap();
    let cfg = ExperimentConfig::from_str_content(&text).unwrap();
    let model = load_model(&cfg, Path::new(&cfg.out_dir)).unwrap();
    let n = 32;
    let mut prompt_rng = RngStream::derive(cfg.seed, "accept.prompts");
    let prompts = triflow::synth::make_dataset(&cfg.scene, n, cfg.model.text_len, &mut prompt_rng).unwrap();
    let ids: Vec<usize> = prompts.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    let uncond = vec![triflow::flow::UNCOND_TOKEN; n * cfg.model.text_len];
    let req = GenerateRequest {
        batch: n,
        frames: cfg.scene.frames,
        height: cfg.scene.height,
        width: cfg.scene.width,
        audio_len: cfg.scene.audio_len,
    };
    for gamma in [1.0f64, 2.0, 3.0] {
        let mut scfg = cfg.sampler.clone();
        scfg.guidance = gamma;
        let (videos, audios) = generate(&model, &ids, &uncond, &req, &scfg, 424242).unwrap();
        let per_v = videos.numel() / n;
        let per_a = audios.numel() / n;
        let clip = |t: &Tensor, i: usize, per: usize| -> Tensor {
            Tensor::new(t.shape()[1..].to_vec(), t.data()[i * per..(i + 1) * per].to_vec()).unwrap()
        };
        let vids: Vec<Tensor> = (0..n).map(|i| clip(&videos, i, per_v)).collect();
        let auds: Vec<Tensor> = (0..n).map(|i| clip(&audios, i, per_a)).collect();
        let mut aligned = 0.0;
        let mut shuffled = 0.0;
        let mut vp_count = 0usize;
        let mut ap_count = 0usize;
        for i in 0..n {
            aligned += latent_pair_alignment(&cfg, &vids[i], &auds[i], 1).unwrap();
            shuffled += latent_pair_alignment(&cfg, &vids[i], &auds[(i + 1) % n], 1).unwrap();
            let motion = motion_from_latent(&vids[i]).unwrap();
            vp_count += detect_video_peaks(&motion, 3.0, 2).unwrap().len();
            let env = audio_envelope_from_latent(&auds[i]).unwrap();
            let acfg = AudioPeakConfig {
                sample_rate: cfg.scene.audio_rate(),
                fps: cfg.scene.fps,
                window: 1, hop: 1, k_mad: 3.0,
                min_separation_s: 2.0 / cfg.scene.fps,
            };
            ap_count += detect_audio_peaks(&env, &acfg).unwrap().len();
        }
        aligned /= n as f64;
        shuffled /= n as f64;
        println!(
            "gamma={gamma}: aligned={aligned:.3} shuffled={shuffled:.3} gain={:.3} | avg peaks v={:.1} a={:.1}",
            aligned - shuffled,
            vp_count as f64 / n as f64,
            ap_count as f64 / n as f64
        );
    }
    // One clip's raw signals for inspection.
    let (videos, audios) = generate(&model, &ids, &uncond, &req, &cfg.sampler, 424242).unwrap();
    let v0 = Tensor::new(videos.shape()[1..].to_vec(), videos.data()[..videos.numel() / n].to_vec()).unwrap();
    let a0 = Tensor::new(audios.shape()[1..].to_vec(), audios.data()[..audios.numel() / n].to_vec()).unwrap();
    let motion = motion_from_latent(&v0).unwrap();
    let env = audio_envelope_from_latent(&a0).unwrap();
    println!("motion: {:?}", motion.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    println!("envelope: {:?}", env.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
}
