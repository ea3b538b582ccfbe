//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Tape`] owns the forward values; every operation appends a node whose
//! backward closure knows how to push gradients to its parents. Nodes are
//! created in topological order by construction, so the backward sweep is a
//! single reverse pass with sequential, index-ordered accumulation — the
//! gradient of a graph is bitwise reproducible.
//!
//! Kernels validate output finiteness: a NaN or Inf anywhere is an error,
//! not a silent poison value.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{strides_of, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tape, &Tensor) -> Vec<(Var, Tensor)>>;

struct Node {
    value: Tensor,
    needs_grad: bool,
    backward: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`]. Only leaves retain a gradient;
/// interior gradients are dropped once propagated.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

fn check_finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Sum `grad` down to `shape` over broadcast dimensions (same rank, each dim
/// equal or 1 on the input side).
fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let gshape = grad.shape();
    let gstrides = strides_of(gshape);
    let ostrides = strides_of(shape);
    let mut out = Tensor::zeros(shape);
    let odata = out.data_mut();
    let rank = gshape.len();
    for (idx, &gv) in grad.data().iter().enumerate() {
        let mut oflat = 0usize;
        let mut rem = idx;
        for d in 0..rank {
            let coord = rem / gstrides[d];
            rem %= gstrides[d];
            let ocoord = if shape[d] == 1 { 0 } else { coord };
            oflat += ocoord * ostrides[d];
        }
        odata[oflat] += gv;
    }
    out
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch {:?} vs {:?}", a, b)));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y {
                Ok(x)
            } else if x == 1 {
                Ok(y)
            } else if y == 1 {
                Ok(x)
            } else {
                Err(Error::shape(op, format!("{:?} vs {:?}", a, b)))
            }
        })
        .collect()
}

/// Elementwise binary op with broadcasting.
fn broadcast_zip(out_shape: &[usize], a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64 + Sync) -> Tensor {
    if a.shape() == b.shape() {
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape.to_vec(), data).expect("same-shape zip");
    }
    let ostrides = strides_of(out_shape);
    let astrides = strides_of(a.shape());
    let bstrides = strides_of(b.shape());
    let ashape = a.shape();
    let bshape = b.shape();
    let rank = out_shape.len();
    let mut out = Tensor::zeros(out_shape);
    let (adata, bdata) = (a.data(), b.data());
    for (idx, ov) in out.data_mut().iter_mut().enumerate() {
        let mut aflat = 0usize;
        let mut bflat = 0usize;
        let mut rem = idx;
        for d in 0..rank {
            let coord = rem / ostrides[d];
            rem %= ostrides[d];
            aflat += if ashape[d] == 1 { 0 } else { coord * astrides[d] };
            bflat += if bshape[d] == 1 { 0 } else { coord * bstrides[d] };
        }
        *ov = f(adata[aflat], bdata[bflat]);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, backward: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            backward: if needs_grad { backward } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, None)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shape("add", self.shape(a), self.shape(b))?;
        let value = broadcast_zip(&out_shape, self.value(a), self.value(b), |x, y| x + y);
        let value = check_finite("add", value)?;
        let needs = self.needs(a) || self.needs(b);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        Ok(self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| {
                vec![(a, reduce_to_shape(g, &sa)), (b, reduce_to_shape(g, &sb))]
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shape("sub", self.shape(a), self.shape(b))?;
        let value = broadcast_zip(&out_shape, self.value(a), self.value(b), |x, y| x - y);
        let value = check_finite("sub", value)?;
        let needs = self.needs(a) || self.needs(b);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        Ok(self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| {
                vec![
                    (a, reduce_to_shape(g, &sa)),
                    (b, reduce_to_shape(&g.scale(-1.0), &sb)),
                ]
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shape("mul", self.shape(a), self.shape(b))?;
        let value = broadcast_zip(&out_shape, self.value(a), self.value(b), |x, y| x * y);
        let value = check_finite("mul", value)?;
        let needs = self.needs(a) || self.needs(b);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        Ok(self.push(
            value,
            needs,
            Some(Box::new(move |t, g| {
                let ga = broadcast_zip(g.shape(), g, t.value(b), |gv, y| gv * y);
                let gb = broadcast_zip(g.shape(), g, t.value(a), |gv, x| gv * x);
                vec![(a, reduce_to_shape(&ga, &sa)), (b, reduce_to_shape(&gb, &sb))]
            })),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = check_finite("scale", self.value(a).scale(c))?;
        let needs = self.needs(a);
        Ok(self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| vec![(a, g.scale(c))])),
        ))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = check_finite("add_scalar", self.value(a).map(|v| v + c))?;
        let needs = self.needs(a);
        Ok(self.push(value, needs, Some(Box::new(move |_t, g| vec![(a, g.clone())]))))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        // tanh approximation; smooth enough for finite-difference checks.
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const K: f64 = 0.044715;
        let value = check_finite(
            "gelu",
            self.value(a).map(|x| 0.5 * x * (1.0 + (C * (x + K * x * x * x)).tanh())),
        )?;
        let needs = self.needs(a);
        Ok(self.push(
            value,
            needs,
            Some(Box::new(move |t, g| {
                let x = t.value(a);
                let data: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| {
                        let u = C * (x + K * x * x * x);
                        let th = u.tanh();
                        let du = C * (1.0 + 3.0 * K * x * x);
                        gv * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                    })
                    .collect();
                vec![(a, Tensor::new(x.shape().to_vec(), data).expect("gelu grad"))]
            })),
        ))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = check_finite("silu", self.value(a).map(|x| x / (1.0 + (-x).exp())))?;
        let needs = self.needs(a);
        Ok(self.push(
            value,
            needs,
            Some(Box::new(move |t, g| {
                let x = t.value(a);
                let data: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        gv * (s * (1.0 + x * (1.0 - s)))
                    })
                    .collect();
                vec![(a, Tensor::new(x.shape().to_vec(), data).expect("silu grad"))]
            })),
        ))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let needs = self.needs(a);
        let orig = self.shape(a).to_vec();
        Ok(self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| {
                vec![(a, g.clone().reshaped(orig.clone()).expect("reshape grad"))]
            })),
        ))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        if axes.len() != in_shape.len() {
            return Err(Error::shape("permute", format!("axes {:?} rank {}", axes, in_shape.len())));
        }
        let mut seen = vec![false; axes.len()];
        for &ax in axes {
            if ax >= axes.len() || seen[ax] {
                return Err(Error::shape("permute", format!("bad axes {:?}", axes)));
            }
            seen[ax] = true;
        }
        let value = permute_tensor(self.value(a), axes);
        let needs = self.needs(a);
        let mut inv = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        Ok(self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| vec![(a, permute_tensor(g, &inv))])),
        ))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", rank)));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let base = self.shape(parts[0]).to_vec();
        let rank = base.len();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {} rank {}", axis, rank)));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank {
                return Err(Error::shape("concat", "rank mismatch".to_string()));
            }
            for d in 0..rank {
                if d != axis && s[d] != base[d] {
                    return Err(Error::shape("concat", format!("{:?} vs {:?}", s, base)));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;

        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&out_shape);
        let mut offset = 0usize;
        let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        for (pi, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            let len_axis = sizes[pi];
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * len_axis * inner;
                out.data_mut()[dst_start..dst_start + len_axis * inner]
                    .copy_from_slice(&src[src_start..src_start + len_axis * inner]);
            }
            offset += len_axis;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let parts_vec = parts.to_vec();
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |_t, g| {
                let gdata = g.data();
                let mut grads = Vec::with_capacity(parts_vec.len());
                let mut offset = 0usize;
                for (pi, &p) in parts_vec.iter().enumerate() {
                    let len_axis = shapes[pi][axis];
                    let mut gp = Tensor::zeros(&shapes[pi]);
                    for o in 0..outer {
                        let src_start = (o * axis_total + offset) * inner;
                        let dst_start = o * len_axis * inner;
                        gp.data_mut()[dst_start..dst_start + len_axis * inner]
                            .copy_from_slice(&gdata[src_start..src_start + len_axis * inner]);
                    }
                    offset += len_axis;
                    grads.push((p, gp));
                }
                grads
            })),
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let rank = in_shape.len();
        if axis >= rank || start + len > in_shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {} [{},{}) of {:?}", axis, start, start + len, in_shape),
            ));
        }
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let axis_len = in_shape[axis];
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let mut out = Tensor::zeros(&out_shape);
        let src = self.value(a).data();
        for o in 0..outer {
            let src_start = (o * axis_len + start) * inner;
            let dst_start = o * len * inner;
            out.data_mut()[dst_start..dst_start + len * inner]
                .copy_from_slice(&src[src_start..src_start + len * inner]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |_t, g| {
                let mut gp = Tensor::zeros(&in_shape);
                let gdata = g.data();
                for o in 0..outer {
                    let dst_start = (o * axis_len + start) * inner;
                    let src_start = o * len * inner;
                    gp.data_mut()[dst_start..dst_start + len * inner]
                        .copy_from_slice(&gdata[src_start..src_start + len * inner]);
                }
                vec![(a, gp)]
            })),
        ))
    }

    // ---- contractions ---------------------------------------------------

    /// Matrix product over the last two axes. `b` either shares `a`'s
    /// leading dimensions or is rank-2 and broadcast across them.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ash, bsh)));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", format!("inner dims {} vs {}", k, kb)));
        }
        let shared_b = bsh.len() == 2 && ash.len() > 2;
        if !shared_b && ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(Error::shape("matmul", format!("batch dims {:?} vs {:?}", ash, bsh)));
        }
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let value = matmul_forward(self.value(a), self.value(b), batch, m, k, n, shared_b);
        let value = check_finite("matmul", value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            value,
            needs,
            Some(Box::new(move |t, g| {
                let av = t.value(a);
                let bv = t.value(b);
                let ga = matmul_grad_a(g, bv, batch, m, k, n, shared_b, av.shape());
                let gb = matmul_grad_b(g, av, batch, m, k, n, shared_b, bv.shape());
                vec![(a, ga), (b, gb)]
            })),
        ))
    }

    // ---- row-normalizing kernels -----------------------------------------

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("softmax", "rank 0".to_string()))?;
        if d == 0 {
            return Err(Error::shape("softmax", "empty last dim".to_string()));
        }
        let mut out = Tensor::zeros(&shape);
        let src = self.value(a).data();
        par::for_each_row(out.data_mut(), d, |i, row| {
            softmax_row(&src[i * d..(i + 1) * d], row);
        });
        let out = check_finite("softmax", out)?;
        let needs = self.needs(a);
        let out_id = Var(self.nodes.len());
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |t, g| {
                let y = t.value(out_id);
                let mut gp = Tensor::zeros(y.shape());
                let ydata = y.data();
                let gdata = g.data();
                par::for_each_row(gp.data_mut(), d, |i, row| {
                    let ys = &ydata[i * d..(i + 1) * d];
                    let gs = &gdata[i * d..(i + 1) * d];
                    let dot: f64 = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..d {
                        row[j] = ys[j] * (gs[j] - dot);
                    }
                });
                vec![(a, gp)]
            })),
        ))
    }

    /// Softmax over the last axis restricted to keys where `key_mask` is
    /// true; masked positions get probability exactly zero.
    pub fn masked_softmax_lastdim(&mut self, a: Var, key_mask: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("masked_softmax", "rank 0".to_string()))?;
        if key_mask.len() != d {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask len {} vs dim {}", key_mask.len(), d),
            ));
        }
        if !key_mask.iter().any(|&m| m) {
            return Err(Error::EmptyAttention);
        }
        let mask = key_mask.to_vec();
        let mut out = Tensor::zeros(&shape);
        let src = self.value(a).data();
        par::for_each_row(out.data_mut(), d, |i, row| {
            masked_softmax_row(&src[i * d..(i + 1) * d], &mask, row);
        });
        let out = check_finite("masked_softmax", out)?;
        let needs = self.needs(a);
        let out_id = Var(self.nodes.len());
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |t, g| {
                // Masked entries have y=0, so the plain softmax Jacobian
                // already sends them zero gradient.
                let y = t.value(out_id);
                let mut gp = Tensor::zeros(y.shape());
                let ydata = y.data();
                let gdata = g.data();
                par::for_each_row(gp.data_mut(), d, |i, row| {
                    let ys = &ydata[i * d..(i + 1) * d];
                    let gs = &gdata[i * d..(i + 1) * d];
                    let dot: f64 = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..d {
                        row[j] = ys[j] * (gs[j] - dot);
                    }
                });
                vec![(a, gp)]
            })),
        ))
    }

    /// LayerNorm over the last axis, no affine parameters.
    pub fn layernorm_noaffine(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layernorm", "rank 0".to_string()))?;
        if d < 2 {
            return Err(Error::shape("layernorm", format!("last dim {} < 2", d)));
        }
        let mut out = Tensor::zeros(&shape);
        let src = self.value(a).data();
        par::for_each_row(out.data_mut(), d, |i, row| {
            layernorm_row(&src[i * d..(i + 1) * d], eps, row);
        });
        let out = check_finite("layernorm", out)?;
        let needs = self.needs(a);
        let out_id = Var(self.nodes.len());
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |t, g| {
                let x = t.value(a);
                let y = t.value(out_id);
                let mut gp = Tensor::zeros(x.shape());
                let (xdata, ydata, gdata) = (x.data(), y.data(), g.data());
                par::for_each_row(gp.data_mut(), d, |i, row| {
                    let xs = &xdata[i * d..(i + 1) * d];
                    let ys = &ydata[i * d..(i + 1) * d];
                    let gs = &gdata[i * d..(i + 1) * d];
                    let nd = d as f64;
                    let mean = xs.iter().sum::<f64>() / nd;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nd;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = gs.iter().sum::<f64>() / nd;
                    let gydot = gs.iter().zip(ys).map(|(&gv, &yv)| gv * yv).sum::<f64>() / nd;
                    for j in 0..d {
                        row[j] = inv * (gs[j] - gmean - ys[j] * gydot);
                    }
                });
                vec![(a, gp)]
            })),
        ))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let value = check_finite("sum_all", value)?;
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| {
                let gv = g.data()[0];
                vec![(a, Tensor::full(&shape, gv))]
            })),
        ))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::invalid("mean_all", "empty tensor"));
        }
        let value = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n as f64);
        let value = check_finite("mean_all", value)?;
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| {
                let gv = g.data()[0] / n as f64;
                vec![(a, Tensor::full(&shape, gv))]
            })),
        ))
    }

    /// Mean over every axis except the first, yielding `[B]`.
    pub fn mean_per_batch(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::shape("mean_per_batch", "rank 0".to_string()));
        }
        let b = shape[0];
        let per: usize = shape[1..].iter().product();
        if per == 0 {
            return Err(Error::invalid("mean_per_batch", "empty per-batch extent"));
        }
        let src = self.value(a).data();
        let data: Vec<f64> = (0..b)
            .map(|i| src[i * per..(i + 1) * per].iter().sum::<f64>() / per as f64)
            .collect();
        let value = check_finite("mean_per_batch", Tensor::new(vec![b], data)?)?;
        let needs = self.needs(a);
        Ok(self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| {
                let mut gp = Tensor::zeros(&shape);
                let gdata = g.data();
                for (i, chunk) in gp.data_mut().chunks_mut(per).enumerate() {
                    let gv = gdata[i] / per as f64;
                    chunk.iter_mut().for_each(|v| *v = gv);
                }
                vec![(a, gp)]
            })),
        ))
    }

    // ---- positional rotation ----------------------------------------------

    /// Rotate feature pairs of tokens inside `[span_start, span_start+len)`
    /// by the per-position angles; tokens outside the span pass through
    /// untouched. `x` is `[B, N_h, L, d_head]`, `angles` is `[len, d_head/2]`.
    pub fn rope(&mut self, x: Var, angles: &Tensor, span_start: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("rope", format!("expected rank 4, got {:?}", shape)));
        }
        let (l, dh) = (shape[2], shape[3]);
        if dh % 2 != 0 {
            return Err(Error::shape("rope", format!("odd head dim {}", dh)));
        }
        let span_len = angles.shape()[0];
        if angles.rank() != 2 || angles.shape()[1] != dh / 2 {
            return Err(Error::shape(
                "rope",
                format!("angles {:?} vs head dim {}", angles.shape(), dh),
            ));
        }
        if span_start + span_len > l {
            return Err(Error::shape(
                "rope",
                format!("span [{},{}) exceeds length {}", span_start, span_start + span_len, l),
            ));
        }
        let mut out = self.value(x).clone();
        rope_kernel(&mut out, angles, span_start, 1.0);
        let out = check_finite("rope", out)?;
        let needs = self.needs(x);
        let angles_b = angles.clone();
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |_t, g| {
                // The rotation is orthogonal; its transpose is the rotation
                // by the negated angles.
                let mut gp = g.clone();
                rope_kernel(&mut gp, &angles_b, span_start, -1.0);
                vec![(x, gp)]
            })),
        ))
    }

    // ---- lookup / conv ------------------------------------------------------

    /// Row lookup: `table` is `[V, D]`, `ids` is `[B, L]` flattened; output
    /// `[B, L, D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        let tsh = self.shape(table).to_vec();
        if tsh.len() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", tsh)));
        }
        if ids.len() != batch * len {
            return Err(Error::shape("embedding", format!("{} ids for {}x{}", ids.len(), batch, len)));
        }
        let (v, d) = (tsh[0], tsh[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid("embedding", format!("id {} out of vocab {}", bad, v)));
        }
        let src = self.value(table).data();
        let mut out = Tensor::zeros(&[batch, len, d]);
        for (row, &id) in ids.iter().enumerate() {
            out.data_mut()[row * d..(row + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        let ids_b = ids.to_vec();
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |_t, g| {
                let mut gt = Tensor::zeros(&[v, d]);
                let gdata = g.data();
                for (row, &id) in ids_b.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                    for (dv, &gv) in dst.iter_mut().zip(&gdata[row * d..(row + 1) * d]) {
                        *dv += gv;
                    }
                }
                vec![(table, gt)]
            })),
        ))
    }

    /// Depthwise 1-D convolution along the sequence axis with same padding.
    /// `x` is `[B, L, D]`, `w` is `[D, K]` (K odd), `bias` is `[D]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 3 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("x {:?} w {:?} b {:?}", xs, ws, bs),
            ));
        }
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        let k = ws[1];
        if ws[0] != d || bs[0] != d || k % 2 == 0 {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("channels {} kernel {:?} bias {:?}", d, ws, bs),
            ));
        }
        let pad = k / 2;
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(bias).data());
        let mut out = Tensor::zeros(&[b, l, d]);
        {
            let odata = out.data_mut();
            par::for_each_row(odata, d, |row, orow| {
                let (bi, li) = (row / l, row % l);
                for (ch, ov) in orow.iter_mut().enumerate() {
                    let mut acc = bv[ch];
                    for kk in 0..k {
                        let pos = li as isize + kk as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < l {
                            acc += xv[(bi * l + pos as usize) * d + ch] * wv[ch * k + kk];
                        }
                    }
                    *ov = acc;
                }
            });
        }
        let out = check_finite("depthwise_conv1d", out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |t, g| {
                let xv = t.value(x).data();
                let wv = t.value(w).data();
                let gdata = g.data();
                let mut gx = Tensor::zeros(&[b, l, d]);
                par::for_each_row(gx.data_mut(), d, |row, grow| {
                    let (bi, li) = (row / l, row % l);
                    for (ch, gv) in grow.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for kk in 0..k {
                            // out position that consumed x[li] with tap kk.
                            let pos = li as isize - (kk as isize - pad as isize);
                            if pos >= 0 && (pos as usize) < l {
                                acc += gdata[(bi * l + pos as usize) * d + ch] * wv[ch * k + kk];
                            }
                        }
                        *gv = acc;
                    }
                });
                let mut gw = Tensor::zeros(&[d, k]);
                let mut gb = Tensor::zeros(&[d]);
                for bi in 0..b {
                    for li in 0..l {
                        for ch in 0..d {
                            let gv = gdata[(bi * l + li) * d + ch];
                            gb.data_mut()[ch] += gv;
                            for kk in 0..k {
                                let pos = li as isize + kk as isize - pad as isize;
                                if pos >= 0 && (pos as usize) < l {
                                    gw.data_mut()[ch * k + kk] += gv * xv[(bi * l + pos as usize) * d + ch];
                                }
                            }
                        }
                    }
                }
                vec![(x, gx), (w, gw), (bias, gb)]
            })),
        ))
    }

    /// Gather with a precomputed element bijection: `out[i] = in[map[i]]`.
    /// Used by the patchify/unpatchify reorderings.
    pub fn remap(&mut self, a: Var, out_shape: Vec<usize>, map: std::rc::Rc<Vec<usize>>) -> Result<Var> {
        let numel: usize = out_shape.iter().product();
        if numel != map.len() || numel != self.value(a).numel() {
            return Err(Error::shape(
                "remap",
                format!("map {} vs out {:?} vs in {}", map.len(), out_shape, self.value(a).numel()),
            ));
        }
        let src = self.value(a).data();
        let data: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(out_shape, data)?;
        let needs = self.needs(a);
        let in_shape = self.shape(a).to_vec();
        Ok(self.push(
            value,
            needs,
            Some(Box::new(move |_t, g| {
                let mut gp = Tensor::zeros(&in_shape);
                for (o, &i) in map.iter().enumerate() {
                    gp.data_mut()[i] = g.data()[o];
                }
                vec![(a, gp)]
            })),
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients accumulate in fixed tape
    /// order; leaves keep theirs, interior gradients are freed as soon as
    /// they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut by_node: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        by_node.resize_with(self.nodes.len(), || None);
        by_node[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                by_node[id] = None;
                continue;
            }
            let Some(back) = &node.backward else { continue };
            let Some(gout) = by_node[id].take() else { continue };
            for (parent, contrib) in back(self, &gout) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut by_node[parent.0] {
                    Some(existing) => {
                        debug_assert_eq!(existing.shape(), contrib.shape());
                        for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Grads { by_node })
    }
}

// ---- raw kernels ------------------------------------------------------------

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides_of(in_shape);
    let out_strides = strides_of(&out_shape);
    let mut out = Tensor::zeros(&out_shape);
    let src = t.data();
    let rank = axes.len();
    for (oflat, ov) in out.data_mut().iter_mut().enumerate() {
        let mut iflat = 0usize;
        let mut rem = oflat;
        for d in 0..rank {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            iflat += coord * in_strides[axes[d]];
        }
        *ov = src[iflat];
    }
    out
}

fn matmul_forward(a: &Tensor, b: &Tensor, batch: usize, m: usize, k: usize, n: usize, shared_b: bool) -> Tensor {
    let mut out_shape = a.shape()[..a.rank() - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = Tensor::zeros(&out_shape);
    let (adata, bdata) = (a.data(), b.data());
    par::for_each_row(out.data_mut(), n, |row, orow| {
        let (bi, i) = (row / m, row % m);
        let a_off = (bi * m + i) * k;
        let b_off = if shared_b { 0 } else { bi * k * n };
        for kk in 0..k {
            let av = adata[a_off + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &bdata[b_off + kk * n..b_off + (kk + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    });
    let _ = batch;
    out
}

fn matmul_grad_a(
    g: &Tensor,
    b: &Tensor,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    a_shape: &[usize],
) -> Tensor {
    // dA[bi, i, kk] = sum_j g[bi, i, j] * B[bi, kk, j]
    let mut ga = Tensor::zeros(a_shape);
    let (gdata, bdata) = (g.data(), b.data());
    par::for_each_row(ga.data_mut(), k, |row, arow| {
        let (bi, i) = (row / m, row % m);
        let g_off = (bi * m + i) * n;
        let b_off = if shared_b { 0 } else { bi * k * n };
        let grow = &gdata[g_off..g_off + n];
        for (kk, av) in arow.iter_mut().enumerate() {
            let brow = &bdata[b_off + kk * n..b_off + (kk + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *av = acc;
        }
    });
    let _ = batch;
    ga
}

fn matmul_grad_b(
    g: &Tensor,
    a: &Tensor,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    b_shape: &[usize],
) -> Tensor {
    let mut gb = Tensor::zeros(b_shape);
    let (gdata, adata) = (g.data(), a.data());
    if shared_b {
        // dB[kk, j] = sum_{bi, i} A[bi, i, kk] * g[bi, i, j]
        par::for_each_row(gb.data_mut(), n, |kk, brow| {
            for bi in 0..batch {
                for i in 0..m {
                    let av = adata[(bi * m + i) * k + kk];
                    if av == 0.0 {
                        continue;
                    }
                    let grow = &gdata[(bi * m + i) * n..(bi * m + i + 1) * n];
                    for (bv, &gv) in brow.iter_mut().zip(grow) {
                        *bv += av * gv;
                    }
                }
            }
        });
    } else {
        // dB[bi, kk, j] = sum_i A[bi, i, kk] * g[bi, i, j]
        par::for_each_row(gb.data_mut(), n, |row, brow| {
            let (bi, kk) = (row / k, row % k);
            for i in 0..m {
                let av = adata[(bi * m + i) * k + kk];
                if av == 0.0 {
                    continue;
                }
                let grow = &gdata[(bi * m + i) * n..(bi * m + i + 1) * n];
                for (bv, &gv) in brow.iter_mut().zip(grow) {
                    *bv += av * gv;
                }
            }
        });
    }
    gb
}

fn softmax_row(src: &[f64], out: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(src) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn masked_softmax_row(src: &[f64], mask: &[bool], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in src.iter().enumerate() {
        if mask[i] && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for i in 0..src.len() {
        if mask[i] {
            let e = (src[i] - max).exp();
            out[i] = e;
            sum += e;
        } else {
            out[i] = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn layernorm_row(src: &[f64], eps: f64, out: &mut [f64]) {
    let n = src.len() as f64;
    let mean = src.iter().sum::<f64>() / n;
    let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (o, &v) in out.iter_mut().zip(src) {
        *o = (v - mean) * inv;
    }
}

/// In-place pairwise rotation of `[B, N_h, L, d_head]` rows in the span.
/// `sign` of -1 applies the inverse rotation.
fn rope_kernel(x: &mut Tensor, angles: &Tensor, span_start: usize, sign: f64) {
    let shape = x.shape().to_vec();
    let (b, nh, l, dh) = (shape[0], shape[1], shape[2], shape[3]);
    let pairs = dh / 2;
    let span_len = angles.shape()[0];
    let ang = angles.data();
    let data = x.data_mut();
    par::for_each_row(data, dh, |row, token| {
        let li = row % l;
        let _ = (b, nh);
        if li < span_start || li >= span_start + span_len {
            return;
        }
        let arow = &ang[(li - span_start) * pairs..(li - span_start + 1) * pairs];
        for (p, &theta) in arow.iter().enumerate() {
            let (c, s) = ((theta).cos(), (sign * theta).sin());
            let x1 = token[2 * p];
            let x2 = token[2 * p + 1];
            token[2 * p] = x1 * c - x2 * s;
            token[2 * p + 1] = x1 * s + x2 * c;
        }
    });
}
