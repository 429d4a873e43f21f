//! Minimal trainable network pieces with hand-written backward passes.
//!
//! Everything computes in `f64`; checkpoints store `f32`. Layers own their
//! [`Param`]s, and a parameter without a gradient slot is frozen: backward
//! passes never write to it and the optimizer never touches it.

mod adam;
mod attention;
pub mod checkpoint;
mod encoder;
pub mod gradcheck;
mod linear;
mod ops;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use attention::{AttentionBlock, AttentionCache, Segment};
pub use encoder::{Encoder, EncoderConfig, EncoderInput};
pub use linear::{lora_wrap, LinearLayer, LoRALinear, Projector};
pub use ops::{gelu, gelu_grad, l2_normalize_rows, l2_normalize_rows_backward, masked_mean_pool};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {found}")]
    Shape { context: String, expected: String, found: String },
    #[error("mask has no true positions")]
    EmptyMask,
    #[error("mask is not a contiguous true-prefix")]
    NonContiguousMask,
    #[error("degenerate embedding: row {row} has zero norm before normalization")]
    DegenerateEmbedding { row: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("backward called without a recorded forward pass")]
    NoForward,
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("LoRA rank {r} must satisfy 1 <= r < min({i}, {o})")]
    RankTooLarge { r: usize, i: usize, o: usize },
    #[error("encoder for {expected} received {found} input")]
    ModalityMismatch { expected: String, found: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(context: &str, expected: impl ToString, found: impl ToString) -> NnError {
    NnError::Shape { context: context.into(), expected: expected.to_string(), found: found.to_string() }
}

/// A named tensor with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    name: String,
    pub value: Array2<f64>,
    grad: Option<Array2<f64>>,
}

impl Param {
    pub fn trainable(name: impl Into<String>, value: Array2<f64>) -> Self {
        let grad = Some(Array2::zeros(value.raw_dim()));
        Self { name: name.into(), value, grad }
    }

    pub fn frozen(name: impl Into<String>, value: Array2<f64>) -> Self {
        Self { name: name.into(), value, grad: None }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_trainable(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<&Array2<f64>> {
        self.grad.as_ref()
    }

    pub fn freeze(&mut self) {
        self.grad = None;
    }

    pub fn accumulate(&mut self, g: &Array2<f64>) {
        if let Some(acc) = self.grad.as_mut() {
            *acc += g;
        }
    }

    pub(crate) fn grad_mut(&mut self) -> Option<&mut Array2<f64>> {
        self.grad.as_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.is_trainable() {
                n += p.len();
            }
        });
        n
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }
}

/// `rows x cols` matrix of Gaussian entries with the given standard deviation.
pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
}
