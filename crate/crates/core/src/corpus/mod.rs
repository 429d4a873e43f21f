//! Record data model, record tables and feature matrices.
//!
//! A record table is a UTF-8 TSV with header
//! `record_id dna_barcode order family genus species image_ref`; `image_ref`
//! is a row index into a sidecar [`FeatureMatrix`] holding the precomputed
//! image features. Empty taxonomy cells mean the rank is unknown.

mod features;
mod synthetic;
mod taxonomy;

use std::collections::HashMap;
use std::io::{BufRead, Write};

use thiserror::Error;

pub use features::{FeatureMatrix, FEATURE_MAGIC, FEATURE_VERSION};
pub use synthetic::{generate_synthetic_corpus, generate_with_counts, SyntheticConfig};
pub use taxonomy::{serialize_taxonomy, Rank, Taxonomy};

pub const RECORD_HEADER: [&str; 7] = [
    "record_id",
    "dna_barcode",
    "order",
    "family",
    "genus",
    "species",
    "image_ref",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("taxonomy not prefix-complete: {0}")]
    NotPrefixComplete(String),
    #[error("invalid taxonomy label {0:?}")]
    InvalidLabel(String),
    #[error("duplicate record_id '{0}'")]
    DuplicateId(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("image_ref {index} out of range for {rows}-row feature matrix (line {line})")]
    ImageRefOutOfRange { line: usize, index: usize, rows: usize },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty DNA barcode for record '{0}'")]
    EmptyBarcode(String),
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },
    #[error("{magic} version mismatch: expected {expected}, found {found}")]
    BadVersion { magic: &'static str, expected: u8, found: u8 },
    #[error("truncated: {0}")]
    Truncated(String),
    #[error("{0}")]
    NonFinite(String),
    #[error("shape: {0}")]
    Shape(String),
}

/// One specimen.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub record_id: String,
    pub image_feature: Vec<f32>,
    pub dna_barcode: String,
    pub taxonomy: Taxonomy,
}

/// Ordered, immutable collection of records sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    records: Vec<Record>,
    d_img: usize,
    by_id: HashMap<String, usize>,
}

impl RecordSet {
    pub fn new(records: Vec<Record>, d_img: usize) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.image_feature.len() != d_img {
                return Err(CorpusError::DimensionMismatch {
                    expected: d_img,
                    found: r.image_feature.len(),
                });
            }
            if r.dna_barcode.is_empty() {
                return Err(CorpusError::EmptyBarcode(r.record_id.clone()));
            }
            if r.record_id.is_empty() || r.record_id.contains(['\t', '\n', '\r']) {
                return Err(CorpusError::Parse { line: i + 2, msg: format!("invalid record_id {:?}", r.record_id) });
            }
            if by_id.insert(r.record_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(r.record_id.clone()));
            }
        }
        Ok(Self { records, d_img, by_id })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, record_id: &str) -> Option<&Record> {
        self.by_id.get(record_id).map(|&i| &self.records[i])
    }

    pub fn index_of(&self, record_id: &str) -> Option<usize> {
        self.by_id.get(record_id).copied()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Record> {
        self.records.iter()
    }
}

fn cell(s: &str) -> Option<String> {
    (!s.is_empty()).then(|| s.to_string())
}

/// Parses a record table against its feature matrix sidecar.
pub fn parse_records<R: BufRead>(stream: R, features: &FeatureMatrix) -> Result<RecordSet, CorpusError> {
    let mut lines = stream.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or(CorpusError::Parse { line: 1, msg: "missing header".into() })?;
    let columns: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
    if columns != RECORD_HEADER {
        return Err(CorpusError::Parse {
            line: 1,
            msg: format!("expected header {:?}, got {:?}", RECORD_HEADER.join("\t"), header),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != RECORD_HEADER.len() {
            return Err(CorpusError::Parse {
                line: line_no,
                msg: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let taxonomy = Taxonomy::new(cell(fields[2]), cell(fields[3]), cell(fields[4]), cell(fields[5]))
            .map_err(|e| CorpusError::Parse { line: line_no, msg: e.to_string() })?;
        let index: usize = fields[6].parse().map_err(|_| CorpusError::Parse {
            line: line_no,
            msg: format!("bad image_ref {:?}", fields[6]),
        })?;
        if index >= features.rows() {
            return Err(CorpusError::ImageRefOutOfRange { line: line_no, index, rows: features.rows() });
        }
        records.push(Record {
            record_id: fields[0].to_string(),
            image_feature: features.row(index).to_vec(),
            dna_barcode: fields[1].to_string(),
            taxonomy,
        });
    }
    RecordSet::new(records, features.cols())
}

/// Writes the record table; image features go to the returned matrix, one
/// row per record in record order (`image_ref` = row index).
pub fn write_records<W: Write>(set: &RecordSet, mut sink: W) -> Result<FeatureMatrix, CorpusError> {
    writeln!(sink, "{}", RECORD_HEADER.join("\t"))?;
    let mut values = Vec::with_capacity(set.len() * set.d_img());
    for (i, r) in set.iter().enumerate() {
        let t = &r.taxonomy;
        writeln!(
            sink,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.record_id,
            r.dna_barcode,
            t.get(Rank::Order).unwrap_or(""),
            t.get(Rank::Family).unwrap_or(""),
            t.get(Rank::Genus).unwrap_or(""),
            t.get(Rank::Species).unwrap_or(""),
            i
        )?;
        values.extend_from_slice(&r.image_feature);
    }
    FeatureMatrix::new(set.len(), set.d_img(), values)
}
