//! Contrastive alignment of the three encoders.
//!
//! [`ntxent_pair_loss`] is the symmetric NT-Xent loss between two aligned
//! batches, [`trimodal_loss`] sums it over every selected modality pair, and
//! [`train`] fits the encoders with Adam on the pretrain + seen-train pool.

mod loss;
mod probe;
mod trainer;

use ndarray::Array2;
use thiserror::Error;

pub use loss::{ntxent_loss_matrices, ntxent_pair_loss, trimodal_loss, PairLoss, Reduction, TrimodalLoss};
pub use probe::{train_linear_probe, LinearProbe, ProbeConfig};
pub use trainer::{train, AlignedModel, EpochLog, ModelConfig, Prepared, TrainerConfig, TrainingLog};

use crate::nn::NnError;
use crate::tokenizers::TokenizerError;
use crate::Modality;

/// Row norms of an [`EmbeddingBatch`] must be within this of 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("record ids differ at row {row}: '{left}' vs '{right}'")]
    IdMismatch { row: usize, left: String, right: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("row {row} has norm {norm}, expected unit norm")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("at least two modalities are required, got {0}")]
    TooFewModalities(usize),
    #[error("modality {0} given more than once")]
    DuplicateModality(Modality),
    #[error("temperature must be finite and > 0, got {0}")]
    BadTemperature(f64),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training pool is empty")]
    EmptyPool,
    #[error("loss diverged (non-finite) at step {step}")]
    Divergence { step: u64 },
    #[error("model has no {0} encoder")]
    MissingEncoder(Modality),
    #[error("record '{0}' has no species label")]
    MissingSpecies(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// `n x d` unit-norm embeddings of one modality; row `i` belongs to `record_ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub matrix: Array2<f64>,
    pub modality: Modality,
    pub record_ids: Vec<String>,
}

impl EmbeddingBatch {
    pub fn new(matrix: Array2<f64>, modality: Modality, record_ids: Vec<String>) -> Result<Self, AlignError> {
        if matrix.nrows() != record_ids.len() {
            return Err(AlignError::Shape(format!("{} rows but {} record ids", matrix.nrows(), record_ids.len())));
        }
        for (row, r) in matrix.rows().into_iter().enumerate() {
            let norm = r.dot(&r).sqrt();
            if norm.is_nan() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(AlignError::NotUnitNorm { row, norm });
            }
        }
        Ok(Self { matrix, modality, record_ids })
    }

    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}
