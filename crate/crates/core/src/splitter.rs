//! Seen/unseen species partitioning with query/key sub-partitions.
//!
//! Species-level pass:
//! - records without a species label go to pretraining;
//! - species with a single record are excluded;
//! - species with 2..=8 records are unseen, split 50/50 by species count
//!   between validation and test;
//! - species with >= 9 records are 80% seen / 20% unseen, the unseen part
//!   split evenly between validation and test.
//!
//! Record-level pass: seen species' records go 70/10/10/10 to train / val
//! query / test query / shared keys; unseen species' records go 50/50 to
//! query / key within their evaluation split.
//!
//! All counts use largest-remainder apportionment. Shuffles are seeded
//! Fisher-Yates over species sorted by label (and records sorted by id), so
//! the manifest does not depend on input order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::RecordSet;

/// Smallest record count for a species to be eligible as seen.
pub const MIN_SEEN_RECORDS: usize = 9;
const SEEN_UNSEEN: [f64; 2] = [0.8, 0.2];
const HALVES: [f64; 2] = [0.5, 0.5];
const SEEN_RECORD_RATIOS: [f64; 4] = [0.7, 0.1, 0.1, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Pretrain,
    TrainSeen,
    ValSeenQuery,
    TestSeenQuery,
    KeySeen,
    ValUnseenQuery,
    ValUnseenKey,
    TestUnseenQuery,
    TestUnseenKey,
    Excluded,
}

impl Partition {
    pub const ALL: [Partition; 10] = [
        Partition::Pretrain,
        Partition::TrainSeen,
        Partition::ValSeenQuery,
        Partition::TestSeenQuery,
        Partition::KeySeen,
        Partition::ValUnseenQuery,
        Partition::ValUnseenKey,
        Partition::TestUnseenQuery,
        Partition::TestUnseenKey,
        Partition::Excluded,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Pretrain => "pretrain",
            Partition::TrainSeen => "train_seen",
            Partition::ValSeenQuery => "val_seen_query",
            Partition::TestSeenQuery => "test_seen_query",
            Partition::KeySeen => "key_seen",
            Partition::ValUnseenQuery => "val_unseen_query",
            Partition::ValUnseenKey => "val_unseen_key",
            Partition::TestUnseenQuery => "test_unseen_query",
            Partition::TestUnseenKey => "test_unseen_key",
            Partition::Excluded => "excluded",
        }
    }

    pub fn is_seen(self) -> bool {
        matches!(self, Partition::TrainSeen | Partition::ValSeenQuery | Partition::TestSeenQuery | Partition::KeySeen)
    }

    pub fn is_unseen(self) -> bool {
        matches!(
            self,
            Partition::ValUnseenQuery | Partition::ValUnseenKey | Partition::TestUnseenQuery | Partition::TestUnseenKey
        )
    }

    pub fn is_query(self) -> bool {
        matches!(
            self,
            Partition::ValSeenQuery | Partition::TestSeenQuery | Partition::ValUnseenQuery | Partition::TestUnseenQuery
        )
    }

    pub fn is_key(self) -> bool {
        matches!(self, Partition::KeySeen | Partition::ValUnseenKey | Partition::TestUnseenKey)
    }

    /// Records available for contrastive training.
    pub fn is_training_pool(self) -> bool {
        matches!(self, Partition::Pretrain | Partition::TrainSeen)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Partition::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown partition '{s}'"))
    }
}

/// Evaluation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Val,
    Test,
}

impl EvalSplit {
    pub fn seen_query(self) -> Partition {
        match self {
            EvalSplit::Val => Partition::ValSeenQuery,
            EvalSplit::Test => Partition::TestSeenQuery,
        }
    }

    pub fn unseen_query(self) -> Partition {
        match self {
            EvalSplit::Val => Partition::ValUnseenQuery,
            EvalSplit::Test => Partition::TestUnseenQuery,
        }
    }

    pub fn unseen_key(self) -> Partition {
        match self {
            EvalSplit::Val => Partition::ValUnseenKey,
            EvalSplit::Test => Partition::TestUnseenKey,
        }
    }
}

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {msg}")]
    Format { line: usize, msg: String },
}

/// Total assignment of record ids to partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub seed: u64,
    assignment: BTreeMap<String, Partition>,
}

impl SplitManifest {
    pub fn new(seed: u64, assignment: BTreeMap<String, Partition>) -> Self {
        Self { seed, assignment }
    }

    pub fn get(&self, record_id: &str) -> Option<Partition> {
        self.assignment.get(record_id).copied()
    }

    pub fn assignment(&self) -> &BTreeMap<String, Partition> {
        &self.assignment
    }

    pub fn set(&mut self, record_id: &str, partition: Partition) {
        self.assignment.insert(record_id.to_string(), partition);
    }

    pub fn counts(&self) -> BTreeMap<Partition, usize> {
        let mut counts: BTreeMap<Partition, usize> = Partition::ALL.iter().map(|&p| (p, 0)).collect();
        for p in self.assignment.values() {
            *counts.get_mut(p).unwrap() += 1;
        }
        counts
    }

    /// Record ids in `partitions`, in record-id order.
    pub fn ids_in(&self, partitions: &[Partition]) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, p)| partitions.contains(p))
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn write_tsv<W: Write>(&self, mut sink: W) -> Result<(), SplitError> {
        writeln!(sink, "# seed={}\ttool=tmal {}", self.seed, env!("CARGO_PKG_VERSION"))?;
        for (id, p) in &self.assignment {
            writeln!(sink, "{id}\t{p}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(source: R) -> Result<Self, SplitError> {
        let mut seed = None;
        let mut assignment = BTreeMap::new();
        for (i, line) in source.lines().enumerate() {
            let line = line?;
            let line_no = i + 1;
            if let Some(comment) = line.strip_prefix('#') {
                for field in comment.split(['\t', ' ']) {
                    if let Some(v) = field.strip_prefix("seed=") {
                        seed = Some(v.parse().map_err(|_| SplitError::Format { line: line_no, msg: format!("bad seed {v:?}") })?);
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (id, part) = line
                .split_once('\t')
                .ok_or_else(|| SplitError::Format { line: line_no, msg: "expected record_id<TAB>partition".into() })?;
            let part: Partition = part.parse().map_err(|msg| SplitError::Format { line: line_no, msg })?;
            if assignment.insert(id.to_string(), part).is_some() {
                return Err(SplitError::Format { line: line_no, msg: format!("duplicate record_id '{id}'") });
            }
        }
        Ok(Self { seed: seed.unwrap_or(0), assignment })
    }
}

/// Largest-remainder apportionment of `total` items over `weights`
/// (which sum to 1). Ties in the remainder go to the lower index.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Seen record split for one species: train / val query / test query / key,
/// with at least one key whenever any query exists.
pub fn seen_record_counts(n: usize) -> [usize; 4] {
    let c = apportion(n, &SEEN_RECORD_RATIOS);
    let mut out = [c[0], c[1], c[2], c[3]];
    if out[3] == 0 && out[1] + out[2] > 0 {
        let donor = (0..3).max_by_key(|&i| (out[i], std::cmp::Reverse(i))).unwrap();
        out[donor] -= 1;
        out[3] = 1;
    }
    out
}

/// Query / key split for an unseen species.
pub fn unseen_record_counts(n: usize) -> [usize; 2] {
    let c = apportion(n, &HALVES);
    [c[0], c[1]]
}

pub fn partition(corpus: &RecordSet, seed: u64) -> SplitManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    let mut by_species: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in corpus.iter() {
        match r.taxonomy.species() {
            Some(s) => by_species.entry(s).or_default().push(&r.record_id),
            None => {
                assignment.insert(r.record_id.clone(), Partition::Pretrain);
            }
        }
    }
    for ids in by_species.values_mut() {
        ids.sort_unstable();
    }

    let mut large = Vec::new();
    let mut small = Vec::new();
    for (&species, ids) in &by_species {
        match ids.len() {
            1 => {
                assignment.insert(ids[0].to_string(), Partition::Excluded);
            }
            2..MIN_SEEN_RECORDS => small.push(species),
            _ => large.push(species),
        }
    }

    large.shuffle(&mut rng);
    let [n_seen, n_unseen_large] = apportion(large.len(), &SEEN_UNSEEN)[..] else { unreachable!() };
    let (seen, unseen_large) = large.split_at(n_seen);
    let [n_val_large, _] = apportion(n_unseen_large, &HALVES)[..] else { unreachable!() };
    small.shuffle(&mut rng);
    let [n_val_small, _] = apportion(small.len(), &HALVES)[..] else { unreachable!() };

    let mut seen_species = seen.to_vec();
    seen_species.sort_unstable();
    let mut unseen: Vec<(&str, EvalSplit)> = unseen_large
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, if i < n_val_large { EvalSplit::Val } else { EvalSplit::Test }))
        .chain(small.iter().enumerate().map(|(i, &s)| (s, if i < n_val_small { EvalSplit::Val } else { EvalSplit::Test })))
        .collect();
    unseen.sort_unstable();

    for species in seen_species {
        let mut ids = by_species[species].clone();
        ids.shuffle(&mut rng);
        let counts = seen_record_counts(ids.len());
        let parts = [Partition::TrainSeen, Partition::ValSeenQuery, Partition::TestSeenQuery, Partition::KeySeen];
        assign_runs(&mut assignment, &ids, &counts, &parts);
    }
    for (species, split) in unseen {
        let mut ids = by_species[species].clone();
        ids.shuffle(&mut rng);
        let counts = unseen_record_counts(ids.len());
        assign_runs(&mut assignment, &ids, &counts, &[split.unseen_query(), split.unseen_key()]);
    }
    SplitManifest { seed, assignment }
}

fn assign_runs(assignment: &mut BTreeMap<String, Partition>, ids: &[&str], counts: &[usize], parts: &[Partition]) {
    let mut it = ids.iter();
    for (&n, &p) in counts.iter().zip(parts) {
        for id in it.by_ref().take(n) {
            assignment.insert(id.to_string(), p);
        }
    }
}

/// One failed validator clause.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Violation {
    /// Manifest does not cover exactly the corpus records.
    NotTotal { record_id: String },
    /// Clause 1: unseen species present in both validation and test.
    UnseenValTestOverlap { species: String },
    /// Clause 2: species with both seen and unseen records.
    SeenUnseenOverlap { species: String },
    /// Clause 3: unseen species without a query or a key in its split.
    UnseenMissingQueryOrKey { species: String },
    /// Clause 4: seen species whose record split deviates from 70/10/10/10.
    SeenRatio { species: String, counts: [usize; 4] },
    /// Clause 5: single-record species not excluded.
    SingletonNotExcluded { species: String },
    /// Clause 6: record without a species label outside pretraining.
    UnlabeledNotPretrain { record_id: String },
}

impl Violation {
    pub fn clause(&self) -> u8 {
        match self {
            Violation::NotTotal { .. } => 0,
            Violation::UnseenValTestOverlap { .. } => 1,
            Violation::SeenUnseenOverlap { .. } => 2,
            Violation::UnseenMissingQueryOrKey { .. } => 3,
            Violation::SeenRatio { .. } => 4,
            Violation::SingletonNotExcluded { .. } => 5,
            Violation::UnlabeledNotPretrain { .. } => 6,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotTotal { record_id } => write!(f, "record '{record_id}' not assigned exactly once"),
            Violation::UnseenValTestOverlap { species } => {
                write!(f, "[1] unseen species '{species}' appears in both validation and test")
            }
            Violation::SeenUnseenOverlap { species } => write!(f, "[2] species '{species}' is both seen and unseen"),
            Violation::UnseenMissingQueryOrKey { species } => {
                write!(f, "[3] unseen species '{species}' lacks a query or a key")
            }
            Violation::SeenRatio { species, counts } => {
                write!(f, "[4] seen species '{species}' split {counts:?} deviates from 70/10/10/10")
            }
            Violation::SingletonNotExcluded { species } => {
                write!(f, "[5] single-record species '{species}' is not excluded")
            }
            Violation::UnlabeledNotPretrain { record_id } => {
                write!(f, "[6] unlabeled record '{record_id}' is not in pretrain")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// Whether the numbered clause (1-6) holds.
    pub fn clause_passed(&self, clause: u8) -> bool {
        self.violations.iter().all(|v| v.clause() != clause)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for clause in 1..=6 {
            writeln!(f, "clause {clause}: {}", if self.clause_passed(clause) { "ok" } else { "FAILED" })?;
        }
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

/// Checks every split invariant; never fails, reports violations instead.
pub fn validate_manifest(corpus: &RecordSet, manifest: &SplitManifest) -> ValidationReport {
    let mut violations = Vec::new();
    let mut species_parts: BTreeMap<&str, Vec<Partition>> = BTreeMap::new();
    let corpus_ids: BTreeSet<&str> = corpus.iter().map(|r| r.record_id.as_str()).collect();
    for id in manifest.assignment.keys() {
        if !corpus_ids.contains(id.as_str()) {
            violations.push(Violation::NotTotal { record_id: id.clone() });
        }
    }
    for r in corpus.iter() {
        let Some(p) = manifest.get(&r.record_id) else {
            violations.push(Violation::NotTotal { record_id: r.record_id.clone() });
            continue;
        };
        match r.taxonomy.species() {
            Some(s) => species_parts.entry(s).or_default().push(p),
            None if p != Partition::Pretrain => {
                violations.push(Violation::UnlabeledNotPretrain { record_id: r.record_id.clone() })
            }
            None => {}
        }
    }

    for (&species, parts) in &species_parts {
        let name = || species.to_string();
        if parts.len() == 1 && parts[0] != Partition::Excluded {
            violations.push(Violation::SingletonNotExcluded { species: name() });
        }
        let seen = parts.iter().any(|p| p.is_seen());
        let unseen = parts.iter().any(|p| p.is_unseen());
        if seen && unseen {
            violations.push(Violation::SeenUnseenOverlap { species: name() });
        }
        let in_val = parts.iter().any(|p| matches!(p, Partition::ValUnseenQuery | Partition::ValUnseenKey));
        let in_test = parts.iter().any(|p| matches!(p, Partition::TestUnseenQuery | Partition::TestUnseenKey));
        if in_val && in_test {
            violations.push(Violation::UnseenValTestOverlap { species: name() });
        }
        if unseen {
            let has = |p: Partition| parts.contains(&p);
            let ok = [EvalSplit::Val, EvalSplit::Test]
                .iter()
                .filter(|s| has(s.unseen_query()) || has(s.unseen_key()))
                .all(|s| has(s.unseen_query()) && has(s.unseen_key()));
            if !ok {
                violations.push(Violation::UnseenMissingQueryOrKey { species: name() });
            }
        }
        if seen {
            let count = |p: Partition| parts.iter().filter(|&&q| q == p).count();
            let counts = [
                count(Partition::TrainSeen),
                count(Partition::ValSeenQuery),
                count(Partition::TestSeenQuery),
                count(Partition::KeySeen),
            ];
            let n = parts.len();
            let within = counts.iter().zip(SEEN_RECORD_RATIOS).all(|(&c, w)| {
                let quota = w * n as f64;
                c as f64 >= quota.floor() - 1.0 && c as f64 <= quota.ceil() + 1.0
            });
            let exact_sum = counts.iter().sum::<usize>() == n;
            if !within || !exact_sum || counts[3] == 0 {
                violations.push(Violation::SeenRatio { species: name(), counts });
            }
        }
    }
    ValidationReport { violations }
}

/// Number of key records per species over the given key partitions.
pub fn key_counts(corpus: &RecordSet, manifest: &SplitManifest, partitions: &[Partition]) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for r in corpus.iter() {
        if let (Some(s), Some(p)) = (r.taxonomy.species(), manifest.get(&r.record_id)) {
            if partitions.contains(&p) {
                *counts.entry(s.to_string()).or_insert(0) += 1;
            }
        }
    }
    counts
}
