//! Tri-modal contrastive alignment toolkit.
//!
//! Three encoders (image features, DNA barcodes, taxonomy text) are fitted to a
//! shared unit-sphere embedding space with a symmetric pairwise NT-Xent loss.
//! The aligned space is then used for zero-shot taxonomic classification by
//! nearest-key cosine retrieval, including an open-set pipeline that routes
//! queries between seen-species image keys and unseen-species DNA keys.
//!
//! Module map:
//!
//! - [`corpus`]: records, taxonomy, feature matrices, synthetic corpora
//! - [`tokenizers`]: non-overlapping k-mer DNA tokens and word-level text tokens
//! - [`nn`]: linear / LoRA / attention layers with analytic backward, Adam
//! - [`alignment`]: NT-Xent losses, trainer, linear probe
//! - [`splitter`]: seen/unseen, query/key partitioning and its validator
//! - [`retrieval`]: exact cosine key indexes, nearest-key and open-set classifiers
//! - [`metrics`]: micro/macro accuracy, harmonic means, binned and binary reports

pub mod alignment;
pub mod corpus;
pub mod metrics;
pub mod modality;
pub mod nn;
pub mod retrieval;
pub mod splitter;
pub mod tokenizers;

pub use modality::Modality;
