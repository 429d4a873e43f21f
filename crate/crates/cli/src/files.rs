//! Reading and writing the pipeline's artifacts.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use tmal_core::corpus::{parse_records, FeatureMatrix, RecordSet, Taxonomy};
use tmal_core::retrieval::{read_store, write_store, StoredEmbeddings};
use tmal_core::splitter::SplitManifest;

use crate::CorpusPaths;

pub fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Writes through `f` and flushes, attaching the path to any error.
pub fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let mut w = create(path)?;
    f(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush().with_context(|| format!("writing {}", path.display()))
}

pub fn load_corpus(paths: &CorpusPaths) -> Result<RecordSet> {
    let features = FeatureMatrix::read_from(open(&paths.features)?)
        .with_context(|| format!("reading {}", paths.features.display()))?;
    parse_records(open(&paths.records)?, &features).with_context(|| format!("reading {}", paths.records.display()))
}

pub fn load_manifest(path: &Path) -> Result<SplitManifest> {
    SplitManifest::read_tsv(open(path)?).with_context(|| format!("reading {}", path.display()))
}

pub fn sidecar_path(store: &Path) -> PathBuf {
    let mut s = store.as_os_str().to_owned();
    s.push(".tsv");
    PathBuf::from(s)
}

pub fn save_store(path: &Path, store: &StoredEmbeddings) -> Result<()> {
    let mut matrix = create(path)?;
    let sidecar = sidecar_path(path);
    let mut tsv = create(&sidecar)?;
    write_store(store, &mut matrix, &mut tsv).with_context(|| format!("writing store {}", path.display()))?;
    matrix.flush()?;
    tsv.flush()?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<StoredEmbeddings> {
    read_store(open(path)?, open(&sidecar_path(path))?).with_context(|| format!("reading store {}", path.display()))
}

pub const PREDICTIONS_HEADER: &str =
    "record_id\tpredicted_species\tbranch\tpredicted_order\tpredicted_family\tpredicted_genus\tkey_id\tsimilarity\tneighbors";

/// One predictions TSV row. Empty labels are written as empty fields; `-`
/// marks a missing branch, key or similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub record_id: String,
    pub predicted: Taxonomy,
    pub branch: Option<String>,
    pub key_id: Option<String>,
    pub similarity: Option<f64>,
    pub neighbors: Vec<String>,
}

pub fn write_predictions<W: Write>(mut w: W, rows: &[PredictionRow]) -> Result<()> {
    use tmal_core::corpus::Rank;
    writeln!(w, "{PREDICTIONS_HEADER}")?;
    for r in rows {
        let label = |rank| r.predicted.get(rank).unwrap_or("");
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.record_id,
            label(Rank::Species),
            r.branch.as_deref().unwrap_or("-"),
            label(Rank::Order),
            label(Rank::Family),
            label(Rank::Genus),
            r.key_id.as_deref().unwrap_or("-"),
            r.similarity.map_or_else(|| "-".to_string(), |s| s.to_string()),
            if r.neighbors.is_empty() { "-".to_string() } else { r.neighbors.join(",") },
        )?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(source: R) -> Result<Vec<PredictionRow>> {
    let mut lines = source.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != PREDICTIONS_HEADER {
        bail!("predictions header {header:?}, expected {PREDICTIONS_HEADER:?}");
    }
    let dash = |s: &str| (s != "-").then(|| s.to_string());
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            bail!("predictions line {}: expected 9 fields, found {}", i + 2, f.len());
        }
        let labels = [f[3], f[4], f[5], f[1]];
        let depth = labels.iter().take_while(|l| !l.is_empty()).count();
        let predicted = Taxonomy::from_labels(labels[..depth].iter().copied())
            .with_context(|| format!("predictions line {}", i + 2))?;
        let similarity = match f[7] {
            "-" => None,
            s => Some(s.parse().with_context(|| format!("predictions line {}: bad similarity {s:?}", i + 2))?),
        };
        rows.push(PredictionRow {
            record_id: f[0].to_string(),
            predicted,
            branch: dash(f[2]),
            key_id: dash(f[6]),
            similarity,
            neighbors: dash(f[8]).map(|n| n.split(',').map(str::to_owned).collect()).unwrap_or_default(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predictions_round_trip() {
        let rows = vec![
            PredictionRow {
                record_id: "q1".into(),
                predicted: Taxonomy::from_labels(["O", "F", "G", "G sp"]).unwrap(),
                branch: Some("seen".into()),
                key_id: Some("k9".into()),
                similarity: Some(0.8125),
                neighbors: vec!["k9".into(), "k3".into()],
            },
            PredictionRow {
                record_id: "q2".into(),
                predicted: Taxonomy::from_labels(["O", "F"]).unwrap(),
                branch: None,
                key_id: None,
                similarity: None,
                neighbors: vec![],
            },
        ];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &rows).unwrap();
        assert_eq!(read_predictions(buf.as_slice()).unwrap(), rows);
    }
}
