//! Finite-difference gradient checks for every differentiable kernel,
//! on random inputs of each supported rank.

use triflow::error::Result;
use triflow::gradcheck::{finite_diff, max_rel_err, FD_STEP};
use triflow::rng::RngStream;
use triflow::rope::{build_rope_angles, RopeKind, RopeLayout};
use triflow::tape::{Tape, Var};
use triflow::tensor::Tensor;

/// Run one gradcheck: `build` constructs a scalar loss after leafing each
/// input in order.
fn check<B>(name: &str, inputs: Vec<Tensor>, build: B)
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    let f = |inp: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inp.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss).item()
    };
    let numeric = finite_diff(&f, &inputs, FD_STEP).unwrap();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, input)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(input.shape())))
        .collect();
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < 1e-5, "{name}: rel err {err}");
}

/// A scalar probe that weights elements unevenly so symmetric errors
/// cannot cancel.
fn probe(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.value(x).numel();
    let shape = tape.shape(x).to_vec();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * (i as f64) * (-1.0f64).powi(i as i32)).collect();
    let wv = tape.constant(Tensor::new(shape, w)?);
    let prod = tape.mul(x, wv)?;
    tape.sum_all(prod)
}

#[test]
fn elementwise_ops() {
    let mut rng = RngStream::new(700);
    for shape in [vec![5], vec![2, 3], vec![2, 3, 4]] {
        let a = Tensor::randn(&shape, &mut rng);
        let b = Tensor::randn(&shape, &mut rng);
        check("add", vec![a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1])?;
            probe(t, s)
        });
        check("sub", vec![a.clone(), b.clone()], |t, v| {
            let s = t.sub(v[0], v[1])?;
            probe(t, s)
        });
        check("mul", vec![a.clone(), b.clone()], |t, v| {
            let s = t.mul(v[0], v[1])?;
            probe(t, s)
        });
        check("scale", vec![a.clone()], |t, v| {
            let s = t.scale(v[0], -1.7)?;
            probe(t, s)
        });
        check("add_scalar", vec![a.clone()], |t, v| {
            let s = t.add_scalar(v[0], 0.9)?;
            probe(t, s)
        });
        check("gelu", vec![a.clone()], |t, v| {
            let s = t.gelu(v[0])?;
            probe(t, s)
        });
        check("silu", vec![a.clone()], |t, v| {
            let s = t.silu(v[0])?;
            probe(t, s)
        });
    }
}

#[test]
fn broadcast_ops() {
    let mut rng = RngStream::new(701);
    let x = Tensor::randn(&[2, 4, 3], &mut rng);
    let gate = Tensor::randn(&[2, 1, 3], &mut rng);
    check("mul_broadcast", vec![x.clone(), gate.clone()], |t, v| {
        let s = t.mul(v[0], v[1])?;
        probe(t, s)
    });
    check("add_broadcast", vec![x, gate], |t, v| {
        let s = t.add(v[0], v[1])?;
        probe(t, s)
    });
}

#[test]
fn shape_ops() {
    let mut rng = RngStream::new(702);
    let a = Tensor::randn(&[2, 3, 4], &mut rng);
    check("reshape", vec![a.clone()], |t, v| {
        let s = t.reshape(v[0], vec![6, 4])?;
        probe(t, s)
    });
    check("permute", vec![a.clone()], |t, v| {
        let s = t.permute(v[0], &[2, 0, 1])?;
        probe(t, s)
    });
    check("transpose", vec![a.clone()], |t, v| {
        let s = t.transpose_last2(v[0])?;
        probe(t, s)
    });
    let b = Tensor::randn(&[2, 2, 4], &mut rng);
    check("concat", vec![a.clone(), b], |t, v| {
        let s = t.concat(&[v[0], v[1]], 1)?;
        probe(t, s)
    });
    check("narrow", vec![a], |t, v| {
        let s = t.narrow(v[0], 1, 1, 2)?;
        probe(t, s)
    });
}

#[test]
fn matmul_variants() {
    let mut rng = RngStream::new(703);
    let a2 = Tensor::randn(&[4, 5], &mut rng);
    let b2 = Tensor::randn(&[5, 3], &mut rng);
    check("matmul_2d", vec![a2, b2], |t, v| {
        let s = t.matmul(v[0], v[1])?;
        probe(t, s)
    });
    let a4 = Tensor::randn(&[2, 3, 2, 4], &mut rng);
    let b4 = Tensor::randn(&[2, 3, 4, 2], &mut rng);
    check("matmul_batched", vec![a4.clone(), b4], |t, v| {
        let s = t.matmul(v[0], v[1])?;
        probe(t, s)
    });
    let shared = Tensor::randn(&[4, 3], &mut rng);
    check("matmul_shared_rhs", vec![a4, shared], |t, v| {
        let s = t.matmul(v[0], v[1])?;
        probe(t, s)
    });
}

#[test]
fn row_kernels() {
    let mut rng = RngStream::new(704);
    for shape in [vec![6], vec![3, 5], vec![2, 2, 4]] {
        let a = Tensor::randn(&shape, &mut rng);
        check("softmax", vec![a.clone()], |t, v| {
            let s = t.softmax_lastdim(v[0])?;
            probe(t, s)
        });
        if *shape.last().unwrap() >= 2 {
            check("layernorm", vec![a.clone()], |t, v| {
                let s = t.layernorm_noaffine(v[0], 1e-6)?;
                probe(t, s)
            });
        }
    }
    let a = Tensor::randn(&[2, 4], &mut rng);
    let mask = [true, false, true, true];
    check("masked_softmax", vec![a], move |t, v| {
        let s = t.masked_softmax_lastdim(v[0], &mask)?;
        probe(t, s)
    });
}

#[test]
fn reductions() {
    let mut rng = RngStream::new(705);
    let a = Tensor::randn(&[3, 4], &mut rng);
    check("sum_all", vec![a.clone()], |t, v| t.sum_all(v[0]));
    check("mean_all", vec![a.clone()], |t, v| t.mean_all(v[0]));
    check("mean_per_batch", vec![a], |t, v| {
        let s = t.mean_per_batch(v[0])?;
        probe(t, s)
    });
}

#[test]
fn rope_kernel() {
    let mut rng = RngStream::new(706);
    let x = Tensor::randn(&[1, 2, 5, 4], &mut rng);
    let layout = RopeLayout { d_head: 4, ratios: (1.0, 1.0, 1.0), base: 10_000.0 };
    let angles = build_rope_angles(RopeKind::Audio1d { len: 3 }, &layout).unwrap();
    check("rope", vec![x], move |t, v| {
        let s = t.rope(v[0], &angles, 1)?;
        probe(t, s)
    });
}

#[test]
fn embedding_kernel() {
    let mut rng = RngStream::new(707);
    let table = Tensor::randn(&[5, 3], &mut rng);
    let ids = [4usize, 0, 2, 2];
    check("embedding", vec![table], move |t, v| {
        let s = t.embedding(v[0], &ids, 2, 2)?;
        probe(t, s)
    });
}

#[test]
fn depthwise_conv_kernel() {
    let mut rng = RngStream::new(708);
    let x = Tensor::randn(&[2, 5, 3], &mut rng);
    let w = Tensor::randn(&[3, 3], &mut rng);
    let b = Tensor::randn(&[3], &mut rng);
    check("depthwise_conv1d", vec![x, w, b], |t, v| {
        let s = t.depthwise_conv1d(v[0], v[1], v[2])?;
        probe(t, s)
    });
}

#[test]
fn remap_kernel() {
    let mut rng = RngStream::new(709);
    let x = Tensor::randn(&[6], &mut rng);
    let map = vec![3usize, 0, 5, 1, 4, 2];
    check("remap", vec![x], move |t, v| {
        let s = t.remap(v[0], vec![6], std::rc::Rc::new(map.clone()))?;
        probe(t, s)
    });
}
