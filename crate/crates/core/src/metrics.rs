//! Top-1 accuracy per taxonomic rank, harmonic means, key-count-binned
//! per-species accuracy and binary seen/unseen accuracy.
//!
//! All values are percentages. A prediction lacking the evaluated rank is an
//! abstention and counts as incorrect; a gold lacking the rank is skipped.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Rank, Taxonomy};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no queries with a gold {0} label")]
    EmptyEvaluation(Rank),
    #[error("{preds} predictions for {golds} golds")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("binary accuracy needs both seen and unseen gold queries")]
    OneSided,
}

fn check_lengths(preds: usize, golds: usize) -> Result<(), MetricsError> {
    if preds == golds {
        Ok(())
    } else {
        Err(MetricsError::LengthMismatch { preds, golds })
    }
}

/// `(gold label, correct)` for every query whose gold carries `rank`.
fn evaluated<'a>(preds: &'a [Taxonomy], golds: &'a [Taxonomy], rank: Rank) -> impl Iterator<Item = (&'a str, bool)> + 'a {
    preds.iter().zip(golds).filter_map(move |(p, g)| {
        let gold = g.get(rank)?;
        Some((gold, p.get(rank) == Some(gold)))
    })
}

pub fn micro_accuracy(preds: &[Taxonomy], golds: &[Taxonomy], rank: Rank) -> Result<f64, MetricsError> {
    check_lengths(preds.len(), golds.len())?;
    let (mut correct, mut total) = (0usize, 0usize);
    for (_, ok) in evaluated(preds, golds, rank) {
        total += 1;
        correct += usize::from(ok);
    }
    if total == 0 {
        return Err(MetricsError::EmptyEvaluation(rank));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Unweighted mean of per-class accuracy over the gold classes present.
pub fn macro_accuracy(preds: &[Taxonomy], golds: &[Taxonomy], rank: Rank) -> Result<f64, MetricsError> {
    check_lengths(preds.len(), golds.len())?;
    let mut per_class: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (gold, ok) in evaluated(preds, golds, rank) {
        let e = per_class.entry(gold).or_default();
        e.0 += usize::from(ok);
        e.1 += 1;
    }
    if per_class.is_empty() {
        return Err(MetricsError::EmptyEvaluation(rank));
    }
    let sum: f64 = per_class.values().map(|&(c, n)| c as f64 / n as f64).sum();
    Ok(100.0 * sum / per_class.len() as f64)
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Powers of two up to `max_count`: 1, 2, 4, ...
pub fn default_bin_edges(max_count: usize) -> Vec<usize> {
    let mut edges = vec![1];
    while edges.last().unwrap() * 2 <= max_count {
        edges.push(edges.last().unwrap() * 2);
    }
    edges
}

/// Key-count bin `[lower, upper)`; `upper = None` is unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub lower: usize,
    pub upper: Option<usize>,
    pub species: usize,
    pub mean_accuracy: f64,
}

/// Groups `(accuracy, key_count)` pairs by the bins delimited by sorted
/// `edges`; counts below the first edge form a leading `[0, edges[0])` bin.
/// Empty bins are omitted.
pub fn binned_species_accuracy(per_species: &[(f64, usize)], edges: &[usize]) -> Vec<BinRow> {
    let mut bounds: Vec<usize> = edges.to_vec();
    bounds.sort_unstable();
    bounds.dedup();
    if bounds.first() != Some(&0) {
        bounds.insert(0, 0);
    }
    let mut sums = vec![(0.0, 0usize); bounds.len()];
    for &(acc, count) in per_species {
        let bin = bounds.partition_point(|&b| b <= count) - 1;
        sums[bin].0 += acc;
        sums[bin].1 += 1;
    }
    sums.iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(i, &(sum, n))| BinRow {
            lower: bounds[i],
            upper: bounds.get(i + 1).copied(),
            species: n,
            mean_accuracy: sum / n as f64,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryAccuracy {
    pub seen_acc: f64,
    pub unseen_acc: f64,
    pub hm: f64,
}

/// Accuracy of routing queries to the seen or unseen branch.
pub fn seen_unseen_binary_accuracy(predicted_seen: &[bool], gold_seen: &[bool]) -> Result<BinaryAccuracy, MetricsError> {
    check_lengths(predicted_seen.len(), gold_seen.len())?;
    let (mut s_ok, mut s_n, mut u_ok, mut u_n) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in predicted_seen.iter().zip(gold_seen) {
        if g {
            s_n += 1;
            s_ok += usize::from(p);
        } else {
            u_n += 1;
            u_ok += usize::from(!p);
        }
    }
    if s_n == 0 || u_n == 0 {
        return Err(MetricsError::OneSided);
    }
    let seen_acc = 100.0 * s_ok as f64 / s_n as f64;
    let unseen_acc = 100.0 * u_ok as f64 / u_n as f64;
    Ok(BinaryAccuracy { seen_acc, unseen_acc, hm: harmonic_mean(seen_acc, unseen_acc) })
}

/// One evaluated query.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub record_id: String,
    pub gold: Taxonomy,
    pub predicted: Taxonomy,
    pub gold_seen: bool,
    /// Branch taken by an open-set pipeline, if any.
    pub predicted_seen: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: Rank,
    pub micro_seen: Option<f64>,
    pub micro_unseen: Option<f64>,
    pub macro_seen: Option<f64>,
    pub macro_unseen: Option<f64>,
    pub hm_micro: Option<f64>,
    pub hm_macro: Option<f64>,
    pub evaluated_seen: usize,
    pub evaluated_unseen: usize,
    pub abstentions_seen: usize,
    pub abstentions_unseen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesAccuracy {
    pub species: String,
    pub seen: bool,
    pub queries: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub key_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub ranks: Vec<RankReport>,
    pub species: Vec<SpeciesAccuracy>,
    pub bins: Vec<BinRow>,
    pub binary: Option<BinaryAccuracy>,
}

fn both<T>(a: Option<f64>, b: Option<f64>, f: impl Fn(f64, f64) -> T) -> Option<T> {
    Some(f(a?, b?))
}

/// Full report. `key_counts` maps species to their number of key records;
/// `bin_edges = None` uses [`default_bin_edges`].
pub fn evaluate(queries: &[EvalQuery], key_counts: &BTreeMap<String, usize>, bin_edges: Option<&[usize]>) -> EvalReport {
    let split = |seen: bool| -> (Vec<Taxonomy>, Vec<Taxonomy>) {
        queries.iter().filter(|q| q.gold_seen == seen).map(|q| (q.predicted.clone(), q.gold.clone())).unzip()
    };
    let (seen_p, seen_g) = split(true);
    let (unseen_p, unseen_g) = split(false);
    let abstentions = |p: &[Taxonomy], g: &[Taxonomy], rank| {
        p.iter().zip(g).filter(|(p, g)| g.get(rank).is_some() && p.get(rank).is_none()).count()
    };
    let evaluated_count = |g: &[Taxonomy], rank| g.iter().filter(|g| g.get(rank).is_some()).count();
    let ranks = Rank::ALL
        .iter()
        .map(|&rank| {
            let micro_seen = micro_accuracy(&seen_p, &seen_g, rank).ok();
            let micro_unseen = micro_accuracy(&unseen_p, &unseen_g, rank).ok();
            let macro_seen = macro_accuracy(&seen_p, &seen_g, rank).ok();
            let macro_unseen = macro_accuracy(&unseen_p, &unseen_g, rank).ok();
            RankReport {
                rank,
                micro_seen,
                micro_unseen,
                macro_seen,
                macro_unseen,
                hm_micro: both(micro_seen, micro_unseen, harmonic_mean),
                hm_macro: both(macro_seen, macro_unseen, harmonic_mean),
                evaluated_seen: evaluated_count(&seen_g, rank),
                evaluated_unseen: evaluated_count(&unseen_g, rank),
                abstentions_seen: abstentions(&seen_p, &seen_g, rank),
                abstentions_unseen: abstentions(&unseen_p, &unseen_g, rank),
            }
        })
        .collect();

    let mut per_species: BTreeMap<&str, (bool, usize, usize)> = BTreeMap::new();
    for q in queries {
        if let Some(s) = q.gold.species() {
            let e = per_species.entry(s).or_insert((q.gold_seen, 0, 0));
            e.1 += 1;
            e.2 += usize::from(q.predicted.species() == Some(s));
        }
    }
    let species: Vec<SpeciesAccuracy> = per_species
        .into_iter()
        .map(|(s, (seen, n, c))| SpeciesAccuracy {
            species: s.to_string(),
            seen,
            queries: n,
            correct: c,
            accuracy: 100.0 * c as f64 / n as f64,
            key_count: key_counts.get(s).copied().unwrap_or(0),
        })
        .collect();
    let pairs: Vec<(f64, usize)> = species.iter().map(|s| (s.accuracy, s.key_count)).collect();
    let edges = match bin_edges {
        Some(e) => e.to_vec(),
        None => default_bin_edges(pairs.iter().map(|p| p.1).max().unwrap_or(1)),
    };
    let bins = binned_species_accuracy(&pairs, &edges);

    let binary = if queries.iter().all(|q| q.predicted_seen.is_some()) {
        let p: Vec<bool> = queries.iter().map(|q| q.predicted_seen.unwrap()).collect();
        let g: Vec<bool> = queries.iter().map(|q| q.gold_seen).collect();
        seen_unseen_binary_accuracy(&p, &g).ok()
    } else {
        None
    };
    EvalReport { queries: queries.len(), ranks, species, bins, binary }
}

impl EvalReport {
    pub fn rank(&self, rank: Rank) -> Option<&RankReport> {
        self.ranks.iter().find(|r| r.rank == rank)
    }

    /// Aligned text table: rank x (seen, unseen, H.M.) x (micro, macro),
    /// one decimal.
    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6}", "", "micro", "", "", "macro", "", "");
        let _ = writeln!(out, "{:<8} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6}", "taxon", "seen", "unseen", "H.M.", "seen", "unseen", "H.M.");
        let _ = writeln!(out, "{}", "-".repeat(54));
        for r in &self.ranks {
            let _ = writeln!(
                out,
                "{:<8} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6}",
                r.rank.as_str(),
                cell(r.micro_seen),
                cell(r.micro_unseen),
                cell(r.hm_micro),
                cell(r.macro_seen),
                cell(r.macro_unseen),
                cell(r.hm_macro)
            );
        }
        let abst: usize = self.ranks.iter().map(|r| r.abstentions_seen + r.abstentions_unseen).sum();
        let _ = writeln!(out, "queries: {}  abstentions (all ranks): {abst}", self.queries);
        if let Some(b) = &self.binary {
            let _ = writeln!(out, "seen/unseen branching: seen {:.1}  unseen {:.1}  H.M. {:.1}", b.seen_acc, b.unseen_acc, b.hm);
        }
        if !self.bins.is_empty() {
            let _ = writeln!(out, "species accuracy by key count:");
            for b in &self.bins {
                let range = match b.upper {
                    Some(u) => format!("[{}, {})", b.lower, u),
                    None => format!("[{}, inf)", b.lower),
                };
                let _ = writeln!(out, "  {range:<12} {:>5} species  {:>6.1}", b.species, b.mean_accuracy);
            }
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(s: &str) -> Taxonomy {
        Taxonomy::from_labels(["O", "F", "G", s]).unwrap()
    }

    #[test]
    fn micro_counts() {
        let g = vec![sp("a"), sp("b"), sp("c"), sp("d")];
        assert_eq!(micro_accuracy(&g, &g, Rank::Species).unwrap(), 100.0);
        let p = vec![sp("a"), sp("x"), sp("x"), sp("x")];
        assert_eq!(micro_accuracy(&p, &g, Rank::Species).unwrap(), 25.0);
        assert_eq!(micro_accuracy(&[], &[], Rank::Order), Err(MetricsError::EmptyEvaluation(Rank::Order)));
    }

    #[test]
    fn macro_versus_micro() {
        let mut g = vec![sp("a"); 9];
        g.push(sp("b"));
        let mut p = vec![sp("a"); 9];
        p.push(sp("a"));
        assert_eq!(macro_accuracy(&p, &g, Rank::Species).unwrap(), 50.0);
        assert_eq!(micro_accuracy(&p, &g, Rank::Species).unwrap(), 90.0);
        let single = vec![sp("a"), sp("a"), sp("a")];
        let preds = vec![sp("a"), sp("b"), sp("a")];
        let (ma, mi) =
            (macro_accuracy(&preds, &single, Rank::Species).unwrap(), micro_accuracy(&preds, &single, Rank::Species).unwrap());
        assert!((ma - mi).abs() < 1e-12, "{ma} vs {mi}");
    }

    #[test]
    fn missing_gold_ranks_are_excluded_and_abstentions_wrong() {
        let g = vec![Taxonomy::from_labels(["O"]).unwrap(), sp("a")];
        let p = vec![sp("zzz"), Taxonomy::from_labels(["O", "F", "G"]).unwrap()];
        assert_eq!(micro_accuracy(&p, &g, Rank::Species).unwrap(), 0.0);
        assert_eq!(micro_accuracy(&p, &g, Rank::Genus).unwrap(), 100.0);
    }

    #[test]
    fn harmonic_mean_values() {
        assert!((harmonic_mean(65.4, 77.2) - 70.8).abs() < 0.05);
        assert_eq!(harmonic_mean(42.0, 42.0), 42.0);
        assert_eq!(harmonic_mean(0.0, 90.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn bins() {
        assert_eq!(default_bin_edges(9), vec![1, 2, 4, 8]);
        let rows = binned_species_accuracy(&[(10.0, 1), (20.0, 3), (40.0, 3), (90.0, 20)], &[1, 2, 4, 8]);
        assert_eq!(
            rows,
            vec![
                BinRow { lower: 1, upper: Some(2), species: 1, mean_accuracy: 10.0 },
                BinRow { lower: 2, upper: Some(4), species: 2, mean_accuracy: 30.0 },
                BinRow { lower: 8, upper: None, species: 1, mean_accuracy: 90.0 },
            ]
        );
        let zero = binned_species_accuracy(&[(5.0, 0)], &[1, 2]);
        assert_eq!(zero[0].lower, 0);
    }

    #[test]
    fn binary_accuracy() {
        let gold = [true, true, false, false];
        let perfect = seen_unseen_binary_accuracy(&gold, &gold).unwrap();
        assert_eq!((perfect.seen_acc, perfect.unseen_acc, perfect.hm), (100.0, 100.0, 100.0));
        let always = seen_unseen_binary_accuracy(&[true; 4], &gold).unwrap();
        assert_eq!((always.seen_acc, always.unseen_acc, always.hm), (100.0, 0.0, 0.0));
        assert_eq!(seen_unseen_binary_accuracy(&[true], &[true]), Err(MetricsError::OneSided));
    }

    #[test]
    fn report_identities() {
        let queries: Vec<EvalQuery> = (0..12)
            .map(|i| EvalQuery {
                record_id: format!("q{i}"),
                gold: sp(&format!("s{}", i % 4)),
                predicted: sp(&format!("s{}", if i % 3 == 0 { 9 } else { i % 4 })),
                gold_seen: i % 4 < 2,
                predicted_seen: Some(i % 4 < 2 || i == 3),
            })
            .collect();
        let counts: BTreeMap<String, usize> = (0..4).map(|i| (format!("s{i}"), i + 1)).collect();
        let report = evaluate(&queries, &counts, None);
        for r in &report.ranks {
            let hm = harmonic_mean(r.micro_seen.unwrap(), r.micro_unseen.unwrap());
            assert!((r.hm_micro.unwrap() - hm).abs() < 1e-9);
            let hm = harmonic_mean(r.macro_seen.unwrap(), r.macro_unseen.unwrap());
            assert!((r.hm_macro.unwrap() - hm).abs() < 1e-9);
        }
        assert_eq!(report.rank(Rank::Order).unwrap().micro_seen, Some(100.0));
        assert_eq!(report.species.len(), 4);
        assert!(report.binary.is_some());
        let text = report.to_text();
        assert!(text.contains("species") && text.contains("H.M."));
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), report);
    }
}
