//! Embedding store: a feature-matrix file plus a TSV sidecar
//! `row<TAB>record_id<TAB>modality`.

use std::io::{BufRead, Read, Write};

use ndarray::Array2;

use super::{check_unit, KeyStrategy, RetrievalError};
use crate::alignment::EmbeddingBatch;
use crate::corpus::FeatureMatrix;

pub const STORE_SIDECAR_HEADER: &str = "row\trecord_id\tmodality";

/// Embeddings as persisted: the matrix is widened from f32 on read.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredEmbeddings {
    pub matrix: Array2<f64>,
    pub record_ids: Vec<String>,
    pub kind: KeyStrategy,
}

impl StoredEmbeddings {
    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }
}

impl From<&EmbeddingBatch> for StoredEmbeddings {
    fn from(b: &EmbeddingBatch) -> Self {
        Self { matrix: b.matrix.clone(), record_ids: b.record_ids.clone(), kind: b.modality.into() }
    }
}

pub fn write_store<W1: Write, W2: Write>(
    store: &StoredEmbeddings,
    matrix_sink: W1,
    mut sidecar: W2,
) -> Result<(), RetrievalError> {
    FeatureMatrix::from_array(&store.matrix).write_to(matrix_sink)?;
    writeln!(sidecar, "{STORE_SIDECAR_HEADER}")?;
    for (i, id) in store.record_ids.iter().enumerate() {
        writeln!(sidecar, "{i}\t{id}\t{}", store.kind)?;
    }
    Ok(())
}

/// Reads a store, checking that the sidecar covers every row in order, uses
/// a single modality tag, and that every row is unit-norm.
pub fn read_store<R1: Read, R2: BufRead>(matrix_source: R1, sidecar: R2) -> Result<StoredEmbeddings, RetrievalError> {
    let features = FeatureMatrix::read_from(matrix_source)?;
    let mut lines = sidecar.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != STORE_SIDECAR_HEADER {
        return Err(RetrievalError::Format(format!("sidecar header {header:?}, expected {STORE_SIDECAR_HEADER:?}")));
    }
    let mut ids = Vec::with_capacity(features.rows());
    let mut kind = None;
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [row, id, tag] = fields[..] else {
            return Err(RetrievalError::Format(format!("sidecar line {}: expected 3 fields", i + 2)));
        };
        if row.parse::<usize>().ok() != Some(ids.len()) {
            return Err(RetrievalError::Format(format!("sidecar line {}: row {row:?}, expected {}", i + 2, ids.len())));
        }
        let tag: KeyStrategy = tag.parse().map_err(RetrievalError::Format)?;
        if kind.is_some_and(|k| k != tag) {
            return Err(RetrievalError::Format(format!("sidecar line {}: mixed modalities", i + 2)));
        }
        kind = Some(tag);
        ids.push(id.to_string());
    }
    if ids.len() != features.rows() {
        return Err(RetrievalError::Format(format!("sidecar lists {} rows, matrix has {}", ids.len(), features.rows())));
    }
    let kind = kind.ok_or_else(|| RetrievalError::Format("empty store".into()))?;
    let matrix = features.to_array();
    for (i, r) in matrix.rows().into_iter().enumerate() {
        check_unit("stored embedding", i, r)?;
    }
    Ok(StoredEmbeddings { matrix, record_ids: ids, kind })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip() {
        let s = StoredEmbeddings {
            matrix: array![[0.6, 0.8], [1.0, 0.0]],
            record_ids: vec!["a".into(), "b".into()],
            kind: KeyStrategy::Avg,
        };
        let (mut m, mut t) = (Vec::new(), Vec::new());
        write_store(&s, &mut m, &mut t).unwrap();
        let back = read_store(m.as_slice(), t.as_slice()).unwrap();
        assert_eq!(back.record_ids, s.record_ids);
        assert_eq!(back.kind, KeyStrategy::Avg);
        assert!(back.matrix.iter().zip(s.matrix.iter()).all(|(a, b)| (a - b).abs() < 1e-7));
        let text = String::from_utf8(t).unwrap();
        assert!(text.starts_with("row\trecord_id\tmodality\n0\ta\tavg\n"));
        assert!(read_store(m.as_slice(), "row\trecord_id\tmodality\n0\ta\tavg\n".as_bytes()).is_err());
    }
}
