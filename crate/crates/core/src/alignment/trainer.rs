use std::io::{Read, Write};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{trimodal_loss, AlignError, EmbeddingBatch, Reduction};
use crate::corpus::{serialize_taxonomy, Record, RecordSet};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{Adam, AdamConfig, Encoder, EncoderConfig, EncoderInput, Param, Parameterized};
use crate::splitter::SplitManifest;
use crate::tokenizers::{build_word_vocab, tokenize_dna, tokenize_text, KmerVocab, TokenSeq, WordVocab};
use crate::Modality;

const MODEL_FORMAT: &str = "tmal-aligned-model";
const EMBED_CHUNK: usize = 512;

/// Encoder architecture and tokenizer settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub hidden: usize,
    pub d_shared: usize,
    pub lora_rank: Option<usize>,
    pub lora_head: bool,
    pub kmer: usize,
    pub max_len_nt: usize,
    pub text_max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            hidden: 64,
            d_shared: 32,
            lora_rank: Some(4),
            lora_head: false,
            kmer: 5,
            max_len_nt: 660,
            text_max_len: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub modalities: Vec<Modality>,
    pub reduction: Reduction,
    pub model: ModelConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            batch_size: 64,
            epochs: 30,
            lr: 1e-3,
            seed: 0,
            modalities: Modality::ALL.to_vec(),
            reduction: Reduction::Mean,
            model: ModelConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(AlignError::BadTemperature(self.temperature));
        }
        if self.batch_size == 0 {
            return Err(AlignError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(AlignError::Config(format!("lr must be finite and > 0, got {}", self.lr)));
        }
        validate_modalities(&self.modalities)
    }
}

fn validate_modalities(modalities: &[Modality]) -> Result<(), AlignError> {
    for (i, m) in modalities.iter().enumerate() {
        if modalities[..i].contains(m) {
            return Err(AlignError::DuplicateModality(*m));
        }
    }
    if modalities.len() < 2 {
        return Err(AlignError::TooFewModalities(modalities.len()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
    /// Loss on a fixed probe batch before the first and after the last step.
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
}

impl TrainingLog {
    /// One JSON object per epoch.
    pub fn write_jsonl<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        for e in &self.epochs {
            let line = serde_json::to_string(e).map_err(std::io::Error::other)?;
            writeln!(sink, "{line}")?;
        }
        Ok(())
    }
}

/// Encoder inputs for a list of records.
#[derive(Debug, Clone)]
pub enum Prepared {
    Features(Array2<f64>),
    Tokens(Vec<TokenSeq>),
}

impl Prepared {
    pub fn input(&self) -> EncoderInput<'_> {
        match self {
            Prepared::Features(x) => EncoderInput::Features(x),
            Prepared::Tokens(t) => EncoderInput::Tokens(t),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Prepared {
        match self {
            Prepared::Features(x) => Prepared::Features(x.select(Axis(0), rows)),
            Prepared::Tokens(t) => Prepared::Tokens(rows.iter().map(|&i| t[i].clone()).collect()),
        }
    }
}

/// Serialized alongside the tensors in a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    format: String,
    model: ModelConfig,
    d_img: usize,
    modalities: Vec<Modality>,
    seed: u64,
    word_vocab: Vec<String>,
}

/// The trained encoders plus everything needed to tokenize their inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedModel {
    config: ModelConfig,
    d_img: usize,
    seed: u64,
    kmer_vocab: KmerVocab,
    word_vocab: WordVocab,
    encoders: Vec<Encoder>,
}

impl AlignedModel {
    /// Fresh encoders for `modalities`. Each modality's initialization depends
    /// only on `seed`, not on which other modalities are present.
    pub fn new(
        config: ModelConfig,
        d_img: usize,
        word_vocab: WordVocab,
        modalities: &[Modality],
        seed: u64,
    ) -> Result<Self, AlignError> {
        validate_modalities(modalities)?;
        let kmer_vocab = KmerVocab::new(config.kmer)?;
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let seeds: Vec<u64> = Modality::ALL.iter().map(|_| master.next_u64()).collect();
        let mut encoders = Vec::new();
        for (m, s) in Modality::ALL.into_iter().zip(seeds) {
            if !modalities.contains(&m) {
                continue;
            }
            let input_dim = match m {
                Modality::Image => d_img,
                Modality::Dna => kmer_vocab.len(),
                Modality::Text => word_vocab.len(),
            };
            let enc_config = EncoderConfig {
                modality: m,
                input_dim,
                d_model: config.d_model,
                hidden: config.hidden,
                d_shared: config.d_shared,
                lora_rank: config.lora_rank,
                lora_head: config.lora_head,
            };
            encoders.push(Encoder::new(enc_config, s)?);
        }
        Ok(Self { config, d_img, seed, kmer_vocab, word_vocab, encoders })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    pub fn word_vocab(&self) -> &WordVocab {
        &self.word_vocab
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.encoders.iter().map(|e| e.modality()).collect()
    }

    pub fn encoder(&self, modality: Modality) -> Option<&Encoder> {
        self.encoders.iter().find(|e| e.modality() == modality)
    }

    pub fn encoder_mut(&mut self, modality: Modality) -> Option<&mut Encoder> {
        self.encoders.iter_mut().find(|e| e.modality() == modality)
    }

    /// Tokenizes or stacks the inputs of `modality` for `records`.
    pub fn prepare(&self, records: &[&Record], modality: Modality) -> Result<Prepared, AlignError> {
        Ok(match modality {
            Modality::Image => {
                let mut x = Array2::zeros((records.len(), self.d_img));
                for (mut row, r) in x.rows_mut().into_iter().zip(records) {
                    if r.image_feature.len() != self.d_img {
                        return Err(AlignError::Shape(format!(
                            "record '{}' has {} image features, model expects {}",
                            r.record_id,
                            r.image_feature.len(),
                            self.d_img
                        )));
                    }
                    row.iter_mut().zip(&r.image_feature).for_each(|(o, &v)| *o = f64::from(v));
                }
                Prepared::Features(x)
            }
            Modality::Dna => Prepared::Tokens(
                records
                    .iter()
                    .map(|r| tokenize_dna(&r.dna_barcode, &self.kmer_vocab, self.config.max_len_nt))
                    .collect::<Result<_, _>>()?,
            ),
            Modality::Text => Prepared::Tokens(
                records
                    .iter()
                    .map(|r| tokenize_text(&serialize_taxonomy(&r.taxonomy), &self.word_vocab, self.config.text_max_len))
                    .collect::<Result<_, _>>()?,
            ),
        })
    }

    /// Unit-norm embeddings of `records` in `modality`.
    pub fn embed(&self, records: &[&Record], modality: Modality) -> Result<EmbeddingBatch, AlignError> {
        let encoder = self.encoder(modality).ok_or(AlignError::MissingEncoder(modality))?;
        if records.is_empty() {
            return Err(AlignError::EmptyBatch);
        }
        let mut matrix = Array2::zeros((records.len(), self.config.d_shared));
        for (c, chunk) in records.chunks(EMBED_CHUNK).enumerate() {
            let prepared = self.prepare(chunk, modality)?;
            let y = encoder.forward(prepared.input())?;
            let start = c * EMBED_CHUNK;
            matrix.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&y);
        }
        let ids = records.iter().map(|r| r.record_id.clone()).collect();
        EmbeddingBatch::new(matrix, modality, ids)
    }

    /// Loss of the current parameters on `rows` of pre-tokenized inputs, one
    /// [`Prepared`] per model modality in [`AlignedModel::modalities`] order.
    pub fn batch_loss(&self, prepared: &[Prepared], ids: &[String], rows: &[usize], config: &TrainerConfig) -> Result<f64, AlignError> {
        let batch_ids: Vec<String> = rows.iter().map(|&i| ids[i].clone()).collect();
        let mut batches = Vec::with_capacity(self.encoders.len());
        for (enc, p) in self.encoders.iter().zip(prepared) {
            let y = enc.forward(p.select(rows).input())?;
            batches.push(EmbeddingBatch { matrix: y, modality: enc.modality(), record_ids: batch_ids.clone() });
        }
        let refs: Vec<&EmbeddingBatch> = batches.iter().collect();
        Ok(trimodal_loss(&refs, config.temperature, config.reduction)?.loss)
    }

    /// Like [`AlignedModel::batch_loss`], additionally accumulating the loss
    /// gradient into every trainable parameter.
    pub fn backprop_batch(
        &mut self,
        prepared: &[Prepared],
        ids: &[String],
        rows: &[usize],
        config: &TrainerConfig,
    ) -> Result<f64, AlignError> {
        let batch_ids: Vec<String> = rows.iter().map(|&i| ids[i].clone()).collect();
        let mut outputs = Vec::with_capacity(self.encoders.len());
        for (enc, p) in self.encoders.iter_mut().zip(prepared) {
            let y = enc.forward_train(p.select(rows).input())?;
            outputs.push(EmbeddingBatch { matrix: y, modality: enc.modality(), record_ids: batch_ids.clone() });
        }
        let refs: Vec<&EmbeddingBatch> = outputs.iter().collect();
        let loss = trimodal_loss(&refs, config.temperature, config.reduction)?;
        for (enc, g) in self.encoders.iter_mut().zip(&loss.grads) {
            enc.backward(g)?;
        }
        Ok(loss.loss)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = ModelMeta {
            format: MODEL_FORMAT.into(),
            model: self.config.clone(),
            d_img: self.d_img,
            modalities: self.modalities(),
            seed: self.seed,
            word_vocab: self.word_vocab.tokens().to_vec(),
        };
        Checkpoint::from_params(self, serde_json::to_string(&meta).expect("meta serializes"))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, AlignError> {
        let meta: ModelMeta = serde_json::from_str(&ck.config)
            .map_err(|e| AlignError::Config(format!("checkpoint config is not a model description: {e}")))?;
        if meta.format != MODEL_FORMAT {
            return Err(AlignError::Config(format!("checkpoint format '{}', expected '{MODEL_FORMAT}'", meta.format)));
        }
        let vocab = WordVocab::from_tokens(meta.word_vocab)?;
        let mut model = Self::new(meta.model, meta.d_img, vocab, &meta.modalities, meta.seed)?;
        ck.load_into(&mut model)?;
        Ok(model)
    }

    pub fn save<W: Write>(&self, sink: W) -> Result<(), AlignError> {
        Ok(self.to_checkpoint().write_to(sink)?)
    }

    pub fn load<R: Read>(source: R) -> Result<Self, AlignError> {
        Self::from_checkpoint(&Checkpoint::read_from(source)?)
    }
}

impl Parameterized for AlignedModel {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoders.iter().for_each(|e| e.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoders.iter_mut().for_each(|e| e.visit_mut(f));
    }
}

/// Fits fresh encoders on the pretrain and seen-train records of `manifest`.
pub fn train(
    corpus: &RecordSet,
    manifest: &SplitManifest,
    config: &TrainerConfig,
) -> Result<(AlignedModel, TrainingLog), AlignError> {
    config.validate()?;
    let pool: Vec<&Record> = corpus
        .iter()
        .filter(|r| manifest.get(&r.record_id).is_some_and(|p| p.is_training_pool()))
        .collect();
    if pool.is_empty() {
        return Err(AlignError::EmptyPool);
    }
    let texts: Vec<String> = pool.iter().map(|r| serialize_taxonomy(&r.taxonomy)).collect();
    let vocab = build_word_vocab(&texts);
    let mut model = AlignedModel::new(config.model.clone(), corpus.d_img(), vocab, &config.modalities, config.seed)?;
    train_model(&mut model, &pool, config)
        .map(|log| (model, log))
}

/// Training loop over an already built model.
pub(crate) fn train_model(model: &mut AlignedModel, pool: &[&Record], config: &TrainerConfig) -> Result<TrainingLog, AlignError> {
    let prepared: Vec<Prepared> = model.modalities().iter().map(|&m| model.prepare(pool, m)).collect::<Result<_, _>>()?;
    let ids: Vec<String> = pool.iter().map(|r| r.record_id.clone()).collect();
    let probe_rows: Vec<usize> = (0..pool.len().min(config.batch_size)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let mut log = TrainingLog {
        initial_probe_loss: model.batch_loss(&prepared, &ids, &probe_rows, config)?,
        ..TrainingLog::default()
    };
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for rows in order.chunks(config.batch_size) {
            log.steps += 1;
            model.zero_grad();
            let loss = model.backprop_batch(&prepared, &ids, rows, config)?;
            if !loss.is_finite() {
                return Err(AlignError::Divergence { step: log.steps });
            }
            adam.step(&mut [model as &mut dyn Parameterized]).map_err(|e| match e {
                crate::nn::NnError::NonFiniteGradient(_) => AlignError::Divergence { step: log.steps },
                other => other.into(),
            })?;
            total += loss;
            batches += 1;
        }
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: total / batches as f64,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    log.final_probe_loss = model.batch_loss(&prepared, &ids, &probe_rows, config)?;
    Ok(log)
}
