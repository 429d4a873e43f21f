//! Open-set IS+DU classification: seen species from image keys (or a
//! linear probe), unseen species from DNA keys, gated by a threshold on the
//! seen-side confidence.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::{check_unit, KeyIndex, RetrievalError};
use crate::alignment::LinearProbe;
use crate::corpus::Taxonomy;
use crate::metrics::harmonic_mean;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Seen,
    Unseen,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Seen => "seen",
            Branch::Unseen => "unseen",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Branch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seen" => Ok(Branch::Seen),
            "unseen" => Ok(Branch::Unseen),
            other => Err(format!("unknown branch '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpenSetConfig {
    /// Cosine threshold for the nearest-neighbor variant.
    pub t1: f64,
    /// Softmax-confidence threshold for the linear variant.
    pub t2: f64,
    pub grid_size: usize,
}

impl Default for OpenSetConfig {
    fn default() -> Self {
        Self { t1: 0.5, t2: 0.5, grid_size: 1000 }
    }
}

impl OpenSetConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        check_threshold(self.t1)?;
        check_threshold(self.t2)?;
        if self.grid_size < 2 {
            return Err(RetrievalError::BadGrid(self.grid_size));
        }
        Ok(())
    }
}

fn check_threshold(t: f64) -> Result<(), RetrievalError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(RetrievalError::BadThreshold(t))
    }
}

/// Seen-side model of the pipeline.
#[derive(Debug, Clone, Copy)]
pub enum OpenSetVariant<'a> {
    /// Gate on the maximum cosine similarity to seen image keys.
    Nn { seen_image: &'a KeyIndex },
    /// Gate on the maximum softmax probability of a probe over seen species.
    Linear { probe: &'a LinearProbe },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetPrediction {
    pub taxonomy: Taxonomy,
    pub branch: Branch,
    /// The gated score: max cosine (nn) or max probability (linear).
    pub score: f64,
    /// Matched key, absent for the linear seen branch.
    pub key_id: Option<String>,
    pub similarity: Option<f64>,
}

/// Seen-side decision for one query.
struct SeenSide {
    score: f64,
    taxonomy: Taxonomy,
    key: Option<(String, f64)>,
}

fn seen_side(variant: OpenSetVariant<'_>, q: ArrayView1<'_, f64>) -> Result<SeenSide, RetrievalError> {
    match variant {
        OpenSetVariant::Nn { seen_image } => {
            let hit = seen_image.nearest(q)?;
            Ok(SeenSide {
                score: hit.similarity,
                taxonomy: seen_image.taxonomy(hit.index).clone(),
                key: Some((hit.record_id, hit.similarity)),
            })
        }
        OpenSetVariant::Linear { probe } => {
            if q.len() != probe.input_dim() {
                return Err(RetrievalError::DimensionMismatch { expected: probe.input_dim(), found: q.len() });
            }
            check_unit("query", 0, q)?;
            let p = probe.probabilities(&q.to_owned().insert_axis(Axis(0)))?;
            let (best, score) = p
                .row(0)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            Ok(SeenSide { score, taxonomy: probe.classes()[best].clone(), key: None })
        }
    }
}

fn unseen_side(unseen_dna: &KeyIndex, q: ArrayView1<'_, f64>, score: f64) -> Result<OpenSetPrediction, RetrievalError> {
    let hit = unseen_dna.nearest(q)?;
    Ok(OpenSetPrediction {
        taxonomy: unseen_dna.taxonomy(hit.index).clone(),
        branch: Branch::Unseen,
        score,
        key_id: Some(hit.record_id),
        similarity: Some(hit.similarity),
    })
}

fn classify(
    variant: OpenSetVariant<'_>,
    q: ArrayView1<'_, f64>,
    threshold: f64,
    unseen_dna: &KeyIndex,
) -> Result<OpenSetPrediction, RetrievalError> {
    check_threshold(threshold)?;
    let seen = seen_side(variant, q)?;
    if seen.score >= threshold {
        let (key_id, similarity) = seen.key.map_or((None, None), |(id, s)| (Some(id), Some(s)));
        Ok(OpenSetPrediction { taxonomy: seen.taxonomy, branch: Branch::Seen, score: seen.score, key_id, similarity })
    } else {
        unseen_side(unseen_dna, q, seen.score)
    }
}

/// Seen image key if its cosine similarity reaches `t1`, else the nearest
/// unseen DNA key.
pub fn open_set_classify_nn(
    q: ArrayView1<'_, f64>,
    seen_image: &KeyIndex,
    unseen_dna: &KeyIndex,
    t1: f64,
) -> Result<OpenSetPrediction, RetrievalError> {
    classify(OpenSetVariant::Nn { seen_image }, q, t1, unseen_dna)
}

/// Probe argmax if its probability reaches `t2`, else the nearest unseen DNA key.
pub fn open_set_classify_linear(
    q: ArrayView1<'_, f64>,
    probe: &LinearProbe,
    t2: f64,
    unseen_dna: &KeyIndex,
) -> Result<OpenSetPrediction, RetrievalError> {
    classify(OpenSetVariant::Linear { probe }, q, t2, unseen_dna)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub threshold: f64,
    /// Harmonic mean of seen and unseen species accuracy at `threshold`.
    pub hm: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
    pub grid_size: usize,
}

/// Grid search over `grid_size` equally spaced thresholds in [0, 1]
/// maximizing the H.M. of species-level accuracy on gold-seen and
/// gold-unseen queries. Ties go to the smallest threshold.
pub fn tune_threshold(
    queries: &Array2<f64>,
    golds: &[Taxonomy],
    gold_seen: &[bool],
    variant: OpenSetVariant<'_>,
    unseen_dna: &KeyIndex,
    grid_size: usize,
) -> Result<TuneResult, RetrievalError> {
    if grid_size < 2 {
        return Err(RetrievalError::BadGrid(grid_size));
    }
    if golds.len() != queries.nrows() || gold_seen.len() != queries.nrows() {
        return Err(RetrievalError::LabelCount { keys: queries.nrows(), labels: golds.len().min(gold_seen.len()) });
    }
    // (gold seen, score, correct if routed seen, correct if routed unseen)
    let mut cases = Vec::with_capacity(queries.nrows());
    for ((q, gold), &seen_flag) in queries.rows().into_iter().zip(golds).zip(gold_seen) {
        let Some(gold_species) = gold.species() else { continue };
        let seen = seen_side(variant, q)?;
        let unseen = unseen_side(unseen_dna, q, seen.score)?;
        cases.push((
            seen_flag,
            seen.score,
            seen.taxonomy.species() == Some(gold_species),
            unseen.taxonomy.species() == Some(gold_species),
        ));
    }
    let n_seen = cases.iter().filter(|c| c.0).count();
    let n_unseen = cases.len() - n_seen;
    if n_seen == 0 {
        return Err(RetrievalError::HmUndefined("seen"));
    }
    if n_unseen == 0 {
        return Err(RetrievalError::HmUndefined("unseen"));
    }
    let mut best: Option<TuneResult> = None;
    for j in 0..grid_size {
        let t = j as f64 / (grid_size - 1) as f64;
        let (mut seen_ok, mut unseen_ok) = (0usize, 0usize);
        for &(is_seen, score, ok_seen, ok_unseen) in &cases {
            let correct = if score >= t { ok_seen } else { ok_unseen };
            if correct {
                if is_seen {
                    seen_ok += 1;
                } else {
                    unseen_ok += 1;
                }
            }
        }
        let seen_acc = 100.0 * seen_ok as f64 / n_seen as f64;
        let unseen_acc = 100.0 * unseen_ok as f64 / n_unseen as f64;
        let hm = harmonic_mean(seen_acc, unseen_acc);
        if best.is_none_or(|b| hm > b.hm) {
            best = Some(TuneResult { threshold: t, hm, seen_acc, unseen_acc, grid_size });
        }
    }
    Ok(best.expect("grid has at least two points"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{train_linear_probe, ProbeConfig};
    use crate::retrieval::KeyStrategy;
    use ndarray::array;

    fn sp(s: &str) -> Taxonomy {
        Taxonomy::from_labels(["O", "F", "G", s]).unwrap()
    }

    fn idx(rows: Array2<f64>, species: &[&str], strategy: KeyStrategy) -> KeyIndex {
        let ids = species.iter().enumerate().map(|(i, s)| format!("{s}-{i}")).collect();
        KeyIndex::from_parts(rows, ids, species.iter().map(|s| sp(s)).collect(), strategy).unwrap()
    }

    fn unit(v: [f64; 3]) -> [f64; 3] {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    }

    /// Seen keys on the x and y axes; unseen DNA key on z.
    fn toy() -> (KeyIndex, KeyIndex, Array2<f64>, Vec<Taxonomy>, Vec<bool>) {
        let seen = idx(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &["a", "b"], KeyStrategy::Image);
        let unseen = idx(array![[0.0, 0.0, 1.0]], &["u"], KeyStrategy::Dna);
        let rows = [
            unit([0.95, 0.0, 0.31]),
            unit([0.0, 0.95, 0.31]),
            unit([0.3, 0.0, 0.95]),
            unit([0.0, 0.25, 0.97]),
        ];
        let q = Array2::from_shape_fn((4, 3), |(i, j)| rows[i][j]);
        (seen, unseen, q, vec![sp("a"), sp("b"), sp("u"), sp("u")], vec![true, true, false, false])
    }

    #[test]
    fn boundaries_of_t1() {
        let (seen, unseen, q, _, _) = toy();
        for row in q.rows() {
            assert_eq!(open_set_classify_nn(row, &seen, &unseen, 0.0).unwrap().branch, Branch::Seen);
            assert_eq!(open_set_classify_nn(row, &seen, &unseen, 1.0).unwrap().branch, Branch::Unseen);
        }
        assert!(open_set_classify_nn(q.row(0), &seen, &unseen, 1.5).is_err());
    }

    #[test]
    fn separable_toy_branches_correctly() {
        let (seen, unseen, q, golds, flags) = toy();
        for ((row, gold), &f) in q.rows().into_iter().zip(&golds).zip(&flags) {
            let p = open_set_classify_nn(row, &seen, &unseen, 0.6).unwrap();
            assert_eq!(p.branch == Branch::Seen, f);
            assert_eq!(p.taxonomy.species(), gold.species());
        }
    }

    #[test]
    fn raising_t1_never_moves_to_seen() {
        let (seen, unseen, q, _, _) = toy();
        for row in q.rows() {
            let mut was_unseen = false;
            for j in 0..=20 {
                let b = open_set_classify_nn(row, &seen, &unseen, j as f64 / 20.0).unwrap().branch;
                assert!(!(was_unseen && b == Branch::Seen));
                was_unseen |= b == Branch::Unseen;
            }
        }
    }

    #[test]
    fn tuner_finds_separating_threshold() {
        let (seen, unseen, q, golds, flags) = toy();
        let r = tune_threshold(&q, &golds, &flags, OpenSetVariant::Nn { seen_image: &seen }, &unseen, 1000).unwrap();
        assert_eq!(r.hm, 100.0);
        assert!(r.threshold > 0.3 && r.threshold <= 0.95);
        let two = tune_threshold(&q, &golds, &flags, OpenSetVariant::Nn { seen_image: &seen }, &unseen, 2).unwrap();
        assert!(two.threshold == 0.0 || two.threshold == 1.0);
        let err = tune_threshold(&q, &golds, &[true; 4], OpenSetVariant::Nn { seen_image: &seen }, &unseen, 10);
        assert!(err.unwrap_err().to_string().contains("H.M. undefined"));
    }

    #[test]
    fn linear_variant() {
        let (_, unseen, q, _, _) = toy();
        let x = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let probe = train_linear_probe(&x, &[sp("a"), sp("b")], &ProbeConfig::default()).unwrap();
        let p = open_set_classify_linear(q.row(0), &probe, 0.0, &unseen).unwrap();
        assert_eq!((p.branch, p.taxonomy.species()), (Branch::Seen, Some("a")));
        let p = open_set_classify_linear(q.row(0), &probe, 1.0, &unseen).unwrap();
        assert_eq!(p.branch, Branch::Unseen);
        assert!(open_set_classify_linear(array![1.0, 0.0].view(), &probe, 0.5, &unseen).is_err());
    }
}
