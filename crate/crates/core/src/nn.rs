//! Small shared building blocks on top of the tape.

use crate::error::Result;
use crate::tape::{Tape, Var};

/// `x W + b` where `x` is `[.., D_in]`, `w` is `[D_in, D_out]`, `b` is `[D_out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let rank = tape.shape(y).len();
    let d_out = *tape.shape(y).last().expect("matmul output has a last dim");
    let mut bshape = vec![1usize; rank - 1];
    bshape.push(d_out);
    let bias = tape.reshape(b, bshape)?;
    tape.add(y, bias)
}

#[derive(Debug, Clone, Copy)]
pub enum Activation {
    Gelu,
    Silu,
}

/// Two-layer feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub act: Activation,
}

impl Mlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = linear(tape, x, self.w1, self.b1)?;
        let h = match self.act {
            Activation::Gelu => tape.gelu(h)?,
            Activation::Silu => tape.silu(h)?,
        };
        linear(tape, h, self.w2, self.b2)
    }
}
