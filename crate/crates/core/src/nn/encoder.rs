//! Modality encoders mapping inputs to unit vectors in the shared space.
//!
//! - image: feature vector -> linear -> GELU -> head
//! - dna / text: token embeddings -> self-attention -> masked mean pool -> head
//!
//! The head is `linear -> GELU -> linear`, followed by row-wise l2
//! normalization. A token sequence whose mask is entirely false (an empty
//! taxonomy string) is encoded through its first position, the PAD embedding.

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionBlock, AttentionCache, Segment};
use super::ops::{gelu, gelu_grad, l2_normalize_rows, l2_normalize_rows_backward};
use super::{gaussian_matrix, shape_err, LinearLayer, NnError, Param, Parameterized, Projector};
use crate::tokenizers::TokenSeq;
use crate::Modality;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub modality: Modality,
    /// Feature dimension for images, vocabulary size for token modalities.
    pub input_dim: usize,
    pub d_model: usize,
    pub hidden: usize,
    pub d_shared: usize,
    /// LoRA rank on the attention query/key projectors; `None` leaves them plain.
    pub lora_rank: Option<usize>,
    /// Also wrap the two head linears.
    #[serde(default)]
    pub lora_head: bool,
}

/// Encoder input batch.
#[derive(Debug, Clone, Copy)]
pub enum EncoderInput<'a> {
    Features(&'a Array2<f64>),
    Tokens(&'a [TokenSeq]),
}

impl EncoderInput<'_> {
    fn kind(&self) -> &'static str {
        match self {
            EncoderInput::Features(_) => "feature-vector",
            EncoderInput::Tokens(_) => "token",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum InputStage {
    Projection(LinearLayer),
    Embedding(Param),
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
enum StemTape {
    Features { x: Array2<f64>, pre: Array2<f64> },
    Tokens { ids: Vec<usize>, segments: Vec<Segment>, attention: AttentionCache },
}

#[derive(Debug, Clone)]
struct Tape {
    stem: StemTape,
    pooled: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    y: Array2<f64>,
    norms: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    input: InputStage,
    attention: Option<AttentionBlock>,
    head_in: Projector,
    head_out: Projector,
    tape: Option<Tape>,
}

impl PartialEq for Encoder {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.input == other.input
            && self.attention == other.attention
            && self.head_in == other.head_in
            && self.head_out == other.head_out
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let name = config.modality.as_str();
        let (input, attention) = match config.modality {
            Modality::Image => (
                InputStage::Projection(LinearLayer::new(&format!("{name}.input"), config.input_dim, config.d_model, &mut rng)),
                None,
            ),
            Modality::Dna | Modality::Text => {
                let table = gaussian_matrix(&mut rng, config.input_dim, config.d_model, 1.0);
                let mut block = AttentionBlock::new(&format!("{name}.attention"), config.d_model, &mut rng);
                if let Some(r) = config.lora_rank {
                    block.attach_lora(r, &mut rng)?;
                }
                (InputStage::Embedding(Param::trainable(format!("{name}.embedding"), table)), Some(block))
            }
        };
        let mut head_in = Projector::Plain(LinearLayer::new(&format!("{name}.head_in"), config.d_model, config.hidden, &mut rng));
        let mut head_out =
            Projector::Plain(LinearLayer::new(&format!("{name}.head_out"), config.hidden, config.d_shared, &mut rng));
        if config.lora_head {
            let r = config.lora_rank.unwrap_or(4);
            head_in.attach_lora(r, &mut rng)?;
            head_out.attach_lora(r, &mut rng)?;
        }
        Ok(Self { config, input, attention, head_in, head_out, tape: None })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn modality(&self) -> Modality {
        self.config.modality
    }

    pub fn output_dim(&self) -> usize {
        self.config.d_shared
    }

    pub fn attention(&self) -> Option<&AttentionBlock> {
        self.attention.as_ref()
    }

    /// Inference: unit-norm embeddings, one row per input. Pure.
    pub fn forward(&self, input: EncoderInput<'_>) -> Result<Array2<f64>, NnError> {
        Ok(self.run(input)?.y)
    }

    /// Forward pass that records activations for [`Encoder::backward`].
    pub fn forward_train(&mut self, input: EncoderInput<'_>) -> Result<Array2<f64>, NnError> {
        let tape = self.run(input)?;
        let y = tape.y.clone();
        self.tape = Some(tape);
        Ok(y)
    }

    /// Accumulates gradients of all trainable parameters given `dL/dY` for
    /// the last training forward. Consumes the recorded activations.
    pub fn backward(&mut self, dy: &Array2<f64>) -> Result<(), NnError> {
        let tape = self.tape.take().ok_or(NnError::NoForward)?;
        if dy.dim() != tape.y.dim() {
            return Err(shape_err("encoder backward", format!("{:?}", tape.y.dim()), format!("{:?}", dy.dim())));
        }
        let dz2 = l2_normalize_rows_backward(&tape.y, &tape.norms, dy);
        let da1 = self.head_out.backward(&tape.a1, &dz2);
        let dz1 = da1 * &tape.z1.mapv(gelu_grad);
        let dpooled = self.head_in.backward(&tape.pooled, &dz1);
        match (tape.stem, &mut self.input) {
            (StemTape::Features { x, pre }, InputStage::Projection(layer)) => {
                let dpre = dpooled * &pre.mapv(gelu_grad);
                layer.backward(&x, &dpre);
            }
            (StemTape::Tokens { ids, segments, attention }, InputStage::Embedding(table)) => {
                let mut dh = Array2::zeros((ids.len(), self.config.d_model));
                for (i, seg) in segments.iter().enumerate() {
                    let share = dpooled.row(i).to_owned() / seg.len as f64;
                    for mut row in dh.slice_mut(s![seg.start..seg.start + seg.len, ..]).rows_mut() {
                        row.assign(&share);
                    }
                }
                let block = self.attention.as_mut().expect("token encoders carry attention");
                let dx = block.backward(&attention, &dh);
                if let Some(g) = table.grad_mut() {
                    for (row, &id) in dx.rows().into_iter().zip(&ids) {
                        g.row_mut(id).scaled_add(1.0, &row);
                    }
                }
            }
            _ => unreachable!("tape kind follows input stage"),
        }
        Ok(())
    }

    fn run(&self, input: EncoderInput<'_>) -> Result<Tape, NnError> {
        let (stem, pooled) = match (input, &self.input) {
            (EncoderInput::Features(x), InputStage::Projection(layer)) => {
                if x.nrows() == 0 {
                    return Err(NnError::EmptyBatch);
                }
                if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
                    return Err(NnError::NonFinite(format!("image feature row {}", bad / x.ncols())));
                }
                let pre = layer.forward(x)?;
                let pooled = pre.mapv(gelu);
                (StemTape::Features { x: x.clone(), pre }, pooled)
            }
            (EncoderInput::Tokens(seqs), InputStage::Embedding(table)) => {
                if seqs.is_empty() {
                    return Err(NnError::EmptyBatch);
                }
                let (ids, segments) = gather_tokens(seqs, table.value.nrows())?;
                let mut x = Array2::zeros((ids.len(), self.config.d_model));
                for (mut row, &id) in x.rows_mut().into_iter().zip(&ids) {
                    row.assign(&table.value.row(id));
                }
                let block = self.attention.as_ref().expect("token encoders carry attention");
                let (h, attention) = block.forward_segments(&x, &segments)?;
                let mut pooled = Array2::zeros((segments.len(), self.config.d_model));
                for (mut out, seg) in pooled.rows_mut().into_iter().zip(&segments) {
                    let rows = h.slice(s![seg.start..seg.start + seg.len, ..]);
                    out.assign(&rows.mean_axis(Axis(0)).expect("segments are non-empty"));
                }
                (StemTape::Tokens { ids, segments, attention }, pooled)
            }
            (input, _) => {
                return Err(NnError::ModalityMismatch {
                    expected: self.config.modality.to_string(),
                    found: input.kind().to_string(),
                })
            }
        };
        let z1 = self.head_in.forward(&pooled)?;
        let a1 = z1.mapv(gelu);
        let z2 = self.head_out.forward(&a1)?;
        let (y, norms) = l2_normalize_rows(&z2)?;
        Ok(Tape { stem, pooled, z1, a1, y, norms })
    }
}

/// Flattens the real tokens of each sequence. An all-padding sequence
/// contributes its first (PAD) position.
fn gather_tokens(seqs: &[TokenSeq], vocab: usize) -> Result<(Vec<usize>, Vec<Segment>), NnError> {
    let mut ids = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    for seq in seqs {
        if seq.ids.len() != seq.mask.len() || seq.ids.is_empty() {
            return Err(shape_err("token sequence", "equal non-zero ids/mask lengths", format!("{}/{}", seq.ids.len(), seq.mask.len())));
        }
        let real = seq.real_len();
        if seq.mask[real..].iter().any(|&m| m) {
            return Err(NnError::NonContiguousMask);
        }
        let len = real.max(1);
        let start = ids.len();
        for &id in &seq.ids[..len] {
            if id as usize >= vocab {
                return Err(NnError::TokenOutOfRange { id, vocab });
            }
            ids.push(id as usize);
        }
        segments.push(Segment { start, len, keys: len });
    }
    Ok((ids, segments))
}

impl Parameterized for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match &self.input {
            InputStage::Projection(l) => l.visit(f),
            InputStage::Embedding(p) => f(p),
        }
        if let Some(a) = &self.attention {
            a.visit(f);
        }
        self.head_in.visit(f);
        self.head_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match &mut self.input {
            InputStage::Projection(l) => l.visit_mut(f),
            InputStage::Embedding(p) => f(p),
        }
        if let Some(a) = &mut self.attention {
            a.visit_mut(f);
        }
        self.head_in.visit_mut(f);
        self.head_out.visit_mut(f);
    }
}
