//! Desk-scale tri-modal (video / audio / text) diffusion transformer.
//!
//! The crate builds up from a deterministic f64 tensor substrate with
//! reverse-mode differentiation ([`tape`]), through tokenization and rotary
//! position embeddings ([`rope`]), AdaLN modulation ([`modulation`]) and the
//! three attention block families ([`blocks`]), to full model assembly
//! ([`model`]), flow-matching training ([`flow`]), probability-flow ODE
//! sampling with classifier-free guidance ([`sampler`]), and an
//! audio-video alignment metric suite ([`metrics`]). The [`pipeline`] module
//! and the companion CLI drive everything over a synthetic coupled
//! audio-video dataset ([`synth`]).

pub mod blocks;
pub mod checks;
pub mod config;
pub mod containers;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod modulation;
pub mod nn;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod rope;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
