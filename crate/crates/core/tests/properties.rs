//! Property tests for the substrate invariants.

use proptest::prelude::*;
use triflow::metrics::{av_align, avh_score, PeakSet};
use triflow::rng::RngStream;
use triflow::rope::{build_rope_angles, patchify_raw, unpatchify_video, PatchConfig, RopeKind, RopeLayout};
use triflow::tape::Tape;
use triflow::tensor::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        xs in prop::collection::vec(-30.0f64..30.0, 2..24),
        shift in -100.0f64..100.0,
    ) {
        let n = xs.len();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(xs.clone()));
        let s = tape.softmax_lastdim(a).unwrap();
        let sum: f64 = tape.value(s).data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(tape.value(s).data().iter().all(|&v| v >= 0.0));

        let shifted: Vec<f64> = xs.iter().map(|v| v + shift).collect();
        let b = tape.constant(Tensor::from_vec(shifted));
        let s2 = tape.softmax_lastdim(b).unwrap();
        for i in 0..n {
            prop_assert!((tape.value(s).data()[i] - tape.value(s2).data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_rows_standardized(
        xs in prop::collection::vec(-50.0f64..50.0, 4..32),
    ) {
        let n = xs.len();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(xs));
        let y = tape.layernorm_noaffine(a, 1e-9).unwrap();
        let row = tape.value(y).data();
        let mean: f64 = row.iter().sum::<f64>() / n as f64;
        let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-9, "mean {mean}");
        // Degenerate (constant) rows normalize to zero variance.
        prop_assert!(var < 1.0 + 1e-6, "var {var}");
    }

    #[test]
    fn rope_preserves_pair_norms(seed in 0u64..1000, len in 1usize..10) {
        let mut rng = RngStream::new(seed);
        let d_head = 6;
        let x = Tensor::randn(&[1, 2, len, d_head], &mut rng);
        let layout = RopeLayout { d_head, ratios: (2.0, 1.0, 1.0), base: 10_000.0 };
        let angles = build_rope_angles(RopeKind::Audio1d { len }, &layout).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let r = tape.rope(v, &angles, 0).unwrap();
        let out = tape.value(r);
        for h in 0..2 {
            for t in 0..len {
                for p in 0..d_head / 2 {
                    let i = ((h * len) + t) * d_head + 2 * p;
                    let n0 = x.data()[i].hypot(x.data()[i + 1]);
                    let n1 = out.data()[i].hypot(out.data()[i + 1]);
                    prop_assert!((n0 - n1).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn patchify_unpatchify_bijection(
        seed in 0u64..1000,
        frames in 1usize..4,
        grid in 1usize..4,
        p in 1usize..3,
        c in 1usize..4,
    ) {
        let (h, w) = (grid * p, grid * p);
        let cfg = PatchConfig { p_h: p, p_w: p, c_v: c, d: 8 };
        let mut rng = RngStream::new(seed);
        let v = Tensor::randn(&[2, c, frames, h, w], &mut rng);
        let mut tape = Tape::new();
        let vv = tape.constant(v.clone());
        let raw = patchify_raw(&mut tape, vv, &cfg).unwrap();
        let back = unpatchify_video(&mut tape, raw, &cfg, frames, h, w).unwrap();
        prop_assert!(tape.value(back).bit_eq(&v));
    }

    #[test]
    fn av_align_bounded_and_shift_invariant(
        a in prop::collection::vec(0usize..200, 0..8),
        v in prop::collection::vec(0usize..200, 0..8),
        tol in 0usize..4,
        off in 0usize..50,
    ) {
        let pa = PeakSet::new(a);
        let pv = PeakSet::new(v);
        let s = av_align(&pa, &pv, tol);
        prop_assert!((0.0..=1.0).contains(&s));
        let s2 = av_align(&pa.shifted(off as isize), &pv.shifted(off as isize), tol);
        prop_assert_eq!(s, s2);
    }

    #[test]
    fn cosine_alignment_bounded(seed in 0u64..2000, frames in 1usize..8) {
        let mut rng = RngStream::new(seed);
        let fr: Vec<Vec<f64>> = (0..frames)
            .map(|_| (0..4).map(|_| rng.normal()).collect())
            .collect();
        let audio: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let s = avh_score(&fr, &audio).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        // Parallel frames reach exactly 1.
        let parallel: Vec<Vec<f64>> = (0..frames).map(|_| audio.iter().map(|v| v * 2.0).collect()).collect();
        let s1 = avh_score(&parallel, &audio).unwrap();
        prop_assert!((s1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences(
        seed in 0u64..500,
        m in 1usize..5,
        k in 1usize..5,
        n in 1usize..5,
    ) {
        let mut rng = RngStream::new(seed);
        let a = Tensor::randn(&[m, k], &mut rng);
        let b = Tensor::randn(&[k, n], &mut rng);
        let f = |inp: &[Tensor]| -> triflow::error::Result<f64> {
            let mut tape = Tape::new();
            let av = tape.param(inp[0].clone());
            let bv = tape.param(inp[1].clone());
            let c = tape.matmul(av, bv)?;
            let s = tape.sum_all(c)?;
            tape.value(s).item()
        };
        let inputs = vec![a.clone(), b.clone()];
        let numeric = triflow::gradcheck::finite_diff(&f, &inputs, 1e-5).unwrap();
        let mut tape = Tape::new();
        let av = tape.param(a);
        let bv = tape.param(b);
        let c = tape.matmul(av, bv).unwrap();
        let s = tape.sum_all(c).unwrap();
        let grads = tape.backward(s).unwrap();
        let analytic = vec![grads.get(av).unwrap().clone(), grads.get(bv).unwrap().clone()];
        let err = triflow::gradcheck::max_rel_err(&analytic, &numeric);
        prop_assert!(err < 1e-5, "rel err {err}");
    }
}
