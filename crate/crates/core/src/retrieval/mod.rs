//! Exact cosine retrieval over unit-norm key embeddings.

mod open_set;
mod store;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use open_set::{
    open_set_classify_linear, open_set_classify_nn, tune_threshold, Branch, OpenSetConfig, OpenSetPrediction,
    OpenSetVariant, TuneResult,
};
pub use store::{read_store, write_store, StoredEmbeddings, STORE_SIDECAR_HEADER};

use crate::alignment::{EmbeddingBatch, UNIT_NORM_TOLERANCE};
use crate::corpus::{CorpusError, Rank, Taxonomy};
use crate::nn::NnError;
use crate::Modality;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("empty key set")]
    EmptyKeySet,
    #[error("duplicate key id '{0}'")]
    DuplicateId(String),
    #[error("{what} row {row} has norm {norm}, expected unit norm")]
    NotUnitNorm { what: &'static str, row: usize, norm: f64 },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{keys} keys but {labels} taxonomies")]
    LabelCount { keys: usize, labels: usize },
    #[error("key sets differ: record '{0}' missing from one side")]
    IdMismatch(String),
    #[error("degenerate average (zero vector) for record '{0}'")]
    DegenerateAverage(String),
    #[error("k = {k} out of range 1..={size}")]
    KOutOfRange { k: usize, size: usize },
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("grid_size must be >= 2, got {0}")]
    BadGrid(usize),
    #[error("H.M. undefined: no gold-{0} queries")]
    HmUndefined(&'static str),
    #[error("store format: {0}")]
    Format(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which embeddings serve as keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyStrategy {
    Image,
    Dna,
    Text,
    Avg,
}

impl KeyStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            KeyStrategy::Image => "image",
            KeyStrategy::Dna => "dna",
            KeyStrategy::Text => "text",
            KeyStrategy::Avg => "avg",
        }
    }
}

impl From<Modality> for KeyStrategy {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Image => KeyStrategy::Image,
            Modality::Dna => KeyStrategy::Dna,
            Modality::Text => KeyStrategy::Text,
        }
    }
}

impl fmt::Display for KeyStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KeyStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" => Ok(KeyStrategy::Image),
            "dna" => Ok(KeyStrategy::Dna),
            "text" => Ok(KeyStrategy::Text),
            "avg" => Ok(KeyStrategy::Avg),
            other => Err(format!("unknown key strategy '{other}' (expected image, dna, text or avg)")),
        }
    }
}

/// One retrieved key.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub record_id: String,
    pub similarity: f64,
}

pub(crate) fn check_unit(what: &'static str, row: usize, v: ArrayView1<'_, f64>) -> Result<(), RetrievalError> {
    let norm = v.dot(&v).sqrt();
    if (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE {
        Ok(())
    } else {
        Err(RetrievalError::NotUnitNorm { what, row, norm })
    }
}

/// Immutable set of unit-norm keys with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyIndex {
    matrix: Array2<f64>,
    ids: Vec<String>,
    taxonomies: Vec<Taxonomy>,
    strategy: KeyStrategy,
}

impl KeyIndex {
    pub fn from_parts(
        matrix: Array2<f64>,
        ids: Vec<String>,
        taxonomies: Vec<Taxonomy>,
        strategy: KeyStrategy,
    ) -> Result<Self, RetrievalError> {
        if ids.is_empty() {
            return Err(RetrievalError::EmptyKeySet);
        }
        if matrix.nrows() != ids.len() || taxonomies.len() != ids.len() {
            return Err(RetrievalError::LabelCount { keys: matrix.nrows(), labels: taxonomies.len().min(ids.len()) });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(RetrievalError::DuplicateId(id.clone()));
            }
        }
        for (i, row) in matrix.rows().into_iter().enumerate() {
            check_unit("key", i, row)?;
        }
        Ok(Self { matrix, ids, taxonomies, strategy })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn strategy(&self) -> KeyStrategy {
        self.strategy
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn taxonomy(&self, index: usize) -> &Taxonomy {
        &self.taxonomies[index]
    }

    fn check_query(&self, q: ArrayView1<'_, f64>) -> Result<(), RetrievalError> {
        if q.len() != self.dim() {
            return Err(RetrievalError::DimensionMismatch { expected: self.dim(), found: q.len() });
        }
        check_unit("query", 0, q)
    }

    /// Exact top-k by descending cosine similarity; ties by ascending record id.
    pub fn query_topk(&self, q: ArrayView1<'_, f64>, k: usize) -> Result<Vec<Hit>, RetrievalError> {
        if k == 0 || k > self.len() {
            return Err(RetrievalError::KOutOfRange { k, size: self.len() });
        }
        self.check_query(q)?;
        let scores: Vec<f64> = self.matrix.rows().into_iter().map(|r| r.dot(&q)).collect();
        // partial_cmp so that 0.0 and -0.0 tie; scores are finite for unit inputs
        let better = |a: usize, b: usize| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| self.ids[a].cmp(&self.ids[b]))
        };
        let mut order: Vec<usize> = (0..self.len()).collect();
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, |&a, &b| better(a, b));
            order.truncate(k);
        }
        order.sort_unstable_by(|&a, &b| better(a, b));
        Ok(order
            .into_iter()
            .map(|i| Hit { index: i, record_id: self.ids[i].clone(), similarity: scores[i] })
            .collect())
    }

    pub fn nearest(&self, q: ArrayView1<'_, f64>) -> Result<Hit, RetrievalError> {
        Ok(self.query_topk(q, 1)?.remove(0))
    }

    /// Label at `rank` of the nearest key; `None` (abstain) if that key lacks it.
    pub fn classify_by_nn(&self, q: ArrayView1<'_, f64>, rank: Rank) -> Result<Option<String>, RetrievalError> {
        let hit = self.nearest(q)?;
        Ok(self.taxonomies[hit.index].get(rank).map(str::to_owned))
    }
}

/// Index over a batch whose strategy is the batch's modality.
pub fn build_index(embeddings: &EmbeddingBatch, taxonomies: Vec<Taxonomy>) -> Result<KeyIndex, RetrievalError> {
    KeyIndex::from_parts(
        embeddings.matrix.clone(),
        embeddings.record_ids.clone(),
        taxonomies,
        embeddings.modality.into(),
    )
}

/// Per record, the renormalized mean of its image and DNA keys, in the
/// image index's order.
pub fn make_avg_index(image_keys: &KeyIndex, dna_keys: &KeyIndex) -> Result<KeyIndex, RetrievalError> {
    if image_keys.dim() != dna_keys.dim() {
        return Err(RetrievalError::DimensionMismatch { expected: image_keys.dim(), found: dna_keys.dim() });
    }
    let dna_pos: std::collections::HashMap<&str, usize> =
        dna_keys.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let image_ids: HashSet<&str> = image_keys.ids.iter().map(String::as_str).collect();
    if let Some(extra) = dna_keys.ids.iter().find(|id| !image_ids.contains(id.as_str())) {
        return Err(RetrievalError::IdMismatch(extra.clone()));
    }
    let mut matrix = Array2::zeros(image_keys.matrix.raw_dim());
    for (i, id) in image_keys.ids.iter().enumerate() {
        let j = *dna_pos.get(id.as_str()).ok_or_else(|| RetrievalError::IdMismatch(id.clone()))?;
        let mean = (&image_keys.matrix.row(i) + &dna_keys.matrix.row(j)) * 0.5;
        let norm = mean.dot(&mean).sqrt();
        if norm < 1e-12 {
            return Err(RetrievalError::DegenerateAverage(id.clone()));
        }
        matrix.row_mut(i).assign(&(mean / norm));
    }
    KeyIndex::from_parts(matrix, image_keys.ids.clone(), image_keys.taxonomies.clone(), KeyStrategy::Avg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gaussian_matrix, l2_normalize_rows};
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn index(m: Array2<f64>) -> KeyIndex {
        let n = m.nrows();
        let ids = (0..n).map(|i| format!("k{i:04}")).collect();
        let tax = (0..n).map(|i| Taxonomy::from_labels(["O".to_string(), format!("F{i}")]).unwrap()).collect();
        KeyIndex::from_parts(m, ids, tax, KeyStrategy::Dna).unwrap()
    }

    fn naive(index: &KeyIndex, q: &Array1<f64>, k: usize) -> Vec<String> {
        let mut all: Vec<(f64, &String)> =
            index.matrix.rows().into_iter().zip(&index.ids).map(|(r, id)| (r.dot(q), id)).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        all.into_iter().take(k).map(|(_, id)| id.clone()).collect()
    }

    #[test]
    fn empty_and_duplicate_keys_rejected() {
        let err = KeyIndex::from_parts(Array2::zeros((0, 3)), vec![], vec![], KeyStrategy::Image).unwrap_err();
        assert_eq!(err.to_string(), "empty key set");
        let m = array![[1.0, 0.0], [0.0, 1.0]];
        let t = vec![Taxonomy::empty(), Taxonomy::empty()];
        assert!(matches!(
            KeyIndex::from_parts(m, vec!["a".into(), "a".into()], t, KeyStrategy::Image),
            Err(RetrievalError::DuplicateId(_))
        ));
    }

    #[test]
    fn topk_matches_naive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = index(l2_normalize_rows(&gaussian_matrix(&mut rng, 512, 8, 1.0)).unwrap().0);
        for _ in 0..20 {
            let q = l2_normalize_rows(&gaussian_matrix(&mut rng, 1, 8, 1.0)).unwrap().0.row(0).to_owned();
            let got: Vec<String> = idx.query_topk(q.view(), 5).unwrap().into_iter().map(|h| h.record_id).collect();
            assert_eq!(got, naive(&idx, &q, 5));
        }
    }

    #[test]
    fn exact_match_and_ties() {
        let idx = index(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        let hits = idx.query_topk(array![0.0, 1.0, 0.0].view(), 2).unwrap();
        assert_eq!((hits[0].record_id.as_str(), hits[1].record_id.as_str()), ("k0001", "k0002"));
        assert!((hits[0].similarity - 1.0).abs() < 1e-6);
        let orth = idx.query_topk(array![0.0, 0.0, 1.0].view(), 3).unwrap();
        let ids: Vec<&str> = orth.iter().map(|h| h.record_id.as_str()).collect();
        assert_eq!(ids, ["k0000", "k0001", "k0002"]);
        assert!(matches!(idx.query_topk(array![1.0, 0.0, 0.0].view(), 4), Err(RetrievalError::KOutOfRange { .. })));
    }

    #[test]
    fn classify_abstains_on_missing_rank() {
        let idx = index(array![[1.0, 0.0]]);
        let q = array![0.6, 0.8];
        assert_eq!(idx.classify_by_nn(q.view(), Rank::Order).unwrap().as_deref(), Some("O"));
        assert_eq!(idx.classify_by_nn(q.view(), Rank::Species).unwrap(), None);
    }

    #[test]
    fn averaged_keys() {
        let same = index(array![[0.6, 0.8]]);
        let avg = make_avg_index(&same, &same).unwrap();
        assert_eq!(avg.matrix, same.matrix);
        assert_eq!(avg.strategy(), KeyStrategy::Avg);
        let neg = index(array![[-0.6, -0.8]]);
        let err = make_avg_index(&same, &neg).unwrap_err();
        assert!(err.to_string().contains("degenerate average (zero vector)"));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = index(l2_normalize_rows(&gaussian_matrix(&mut rng, 50, 6, 1.0)).unwrap().0);
        let b = index(l2_normalize_rows(&gaussian_matrix(&mut rng, 50, 6, 1.0)).unwrap().0);
        let avg = make_avg_index(&a, &b).unwrap();
        for i in 0..50 {
            let (x, y, m) = (a.matrix.row(i), b.matrix.row(i), avg.matrix.row(i));
            assert!((m.dot(&m) - 1.0).abs() < 1e-12);
            // on the arc: the angle to each parent is half the parents' angle
            let half = x.dot(&y).clamp(-1.0, 1.0).acos() / 2.0;
            assert!((m.dot(&x).clamp(-1.0, 1.0).acos() - half).abs() < 1e-6);
            assert!((m.dot(&y).clamp(-1.0, 1.0).acos() - half).abs() < 1e-6);
        }
    }
}
