use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Axis;
use serde_json::json;

use tmal_core::alignment::{train_linear_probe, AlignedModel, LinearProbe, ProbeConfig, Reduction, TrainerConfig};
use tmal_core::corpus::{generate_with_counts, write_records, FeatureMatrix, RecordSet, FEATURE_MAGIC};
use tmal_core::metrics::{evaluate, EvalQuery};
use tmal_core::nn::checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
use tmal_core::retrieval::{
    make_avg_index, open_set_classify_linear, open_set_classify_nn, tune_threshold, Branch, KeyIndex, KeyStrategy,
    OpenSetVariant, StoredEmbeddings,
};
use tmal_core::splitter::{partition, validate_manifest, Partition, SplitManifest};
use tmal_core::Modality;

use crate::files::{self, PredictionRow};
use crate::{
    log_config, resolve_seed, ClassifyArgs, DumpArgs, EmbedArgs, EvalArgs, IndexArgs, ProbeArgs, SplitArgs, SynthArgs,
    TrainArgs, TuneArgs, UsageError,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    log_config("synth", &json!({ "args": &a, "seed": seed }));
    if a.species == 0 || a.records_per_species == 0 || a.barcode_len == 0 || a.d_img == 0 {
        return Err(usage("--species, --records-per-species, --d-img and --barcode-len must be >= 1"));
    }
    if !(a.noise.is_finite() && a.noise >= 0.0) {
        return Err(usage("--noise must be finite and >= 0"));
    }
    let set = generate_with_counts(&vec![a.records_per_species; a.species], a.d_img, a.noise, a.barcode_len, seed);
    let mut features = None;
    files::write_with(&a.out_records, |w| {
        features = Some(write_records(&set, w)?);
        Ok(())
    })?;
    let features = features.expect("records written");
    files::write_with(&a.out_features, |w| Ok(features.write_to(w)?))?;
    eprintln!("wrote {} records of {} species", set.len(), a.species);
    Ok(())
}

pub fn split(a: SplitArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    log_config("split", &json!({ "args": &a, "seed": seed }));
    let corpus = files::load_corpus(&a.corpus)?;
    if corpus.is_empty() {
        bail!("corpus {} is empty", a.corpus.records.display());
    }
    let manifest = partition(&corpus, seed);
    let report = validate_manifest(&corpus, &manifest);
    if !report.passed() {
        eprint!("{report}");
        bail!("split failed validation");
    }
    let counts = manifest.counts();
    if counts[&Partition::Excluded] == corpus.len() {
        eprintln!("warning: every record was excluded (all species are singletons)");
    }
    files::write_with(&a.out, |w| Ok(manifest.write_tsv(w)?))?;
    for (p, n) in counts {
        eprintln!("  {p:<18} {n}");
    }
    Ok(())
}

fn parse_modality(s: &str) -> Result<Modality> {
    s.parse::<Modality>().map_err(|e| usage(e.to_string()))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (mut config, seed_in_file) = match &a.config {
        Some(path) => {
            let mut text = String::new();
            files::open(path)?.read_to_string(&mut text)?;
            let value: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let has_seed = value.get("seed").is_some();
            let cfg: TrainerConfig = serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?;
            (cfg, has_seed)
        }
        None => (TrainerConfig::default(), false),
    };
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.lr {
        config.lr = v;
    }
    if let Some(v) = a.temperature {
        config.temperature = v;
    }
    if let Some(m) = &a.modalities {
        config.modalities = m.iter().map(|s| parse_modality(s)).collect::<Result<_>>()?;
    }
    if let Some(r) = &a.reduction {
        config.reduction = match r.as_str() {
            "sum" => Reduction::Sum,
            "mean" => Reduction::Mean,
            other => return Err(usage(format!("unknown reduction '{other}' (expected sum or mean)"))),
        };
    }
    if a.seed.is_some() || !seed_in_file {
        config.seed = resolve_seed(a.seed)?;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    log_config("train", &json!({ "args": &a, "resolved": &config }));

    let corpus = files::load_corpus(&a.corpus)?;
    let manifest = files::load_manifest(&a.manifest)?;
    let (model, log) = tmal_core::alignment::train(&corpus, &manifest, &config)?;
    files::write_with(&a.out, |w| Ok(model.save(w)?))?;
    if let Some(path) = &a.log {
        files::write_with(path, |w| Ok(log.write_jsonl(w)?))?;
    }
    for e in &log.epochs {
        eprintln!("epoch {:>3}  mean loss {:.4}  ({} ms)", e.epoch, e.mean_loss, e.wall_ms);
    }
    eprintln!("probe batch loss {:.4} -> {:.4} over {} steps", log.initial_probe_loss, log.final_probe_loss, log.steps);
    Ok(())
}

fn parse_partitions(list: &[String]) -> Result<Vec<Partition>> {
    list.iter().map(|s| s.parse::<Partition>().map_err(usage)).collect()
}

pub fn embed(a: EmbedArgs) -> Result<()> {
    log_config("embed", &a);
    let modality = parse_modality(&a.modality)?;
    let filter = match (&a.manifest, &a.partitions) {
        (Some(m), Some(p)) => Some((files::load_manifest(m)?, parse_partitions(p)?)),
        (None, None) => None,
        _ => return Err(usage("--manifest and --partitions must be given together")),
    };
    let model = AlignedModel::load(files::open(&a.checkpoint)?)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let corpus = files::load_corpus(&a.corpus)?;
    let records: Vec<_> = corpus
        .iter()
        .filter(|r| match &filter {
            Some((m, parts)) => m.get(&r.record_id).is_some_and(|p| parts.contains(&p)),
            None => true,
        })
        .collect();
    if records.is_empty() {
        bail!("no records selected for embedding");
    }
    let batch = model.embed(&records, modality)?;
    files::save_store(&a.out, &StoredEmbeddings::from(&batch))?;
    eprintln!("embedded {} records ({modality})", records.len());
    Ok(())
}

pub fn index(a: IndexArgs) -> Result<()> {
    log_config("index", &a);
    let image = files::load_store(&a.image_store)?;
    let dna = files::load_store(&a.dna_store)?;
    if image.kind != KeyStrategy::Image || dna.kind != KeyStrategy::Dna {
        bail!("expected an image store and a dna store, got {} and {}", image.kind, dna.kind);
    }
    let unlabeled = |s: StoredEmbeddings| {
        let n = s.len();
        KeyIndex::from_parts(s.matrix, s.record_ids, vec![Default::default(); n], s.kind)
    };
    let avg = make_avg_index(&unlabeled(image)?, &unlabeled(dna)?)?;
    let store = StoredEmbeddings { matrix: avg.matrix().clone(), record_ids: avg.ids().to_vec(), kind: KeyStrategy::Avg };
    files::save_store(&a.out, &store)?;
    eprintln!("wrote {} averaged keys", store.len());
    Ok(())
}

fn labeled_index(path: &Path, corpus: &RecordSet) -> Result<KeyIndex> {
    let s = files::load_store(path)?;
    let taxonomies = s
        .record_ids
        .iter()
        .map(|id| corpus.get(id).map(|r| r.taxonomy.clone()).with_context(|| format!("key '{id}' is not in the corpus")))
        .collect::<Result<Vec<_>>>()?;
    Ok(KeyIndex::from_parts(s.matrix, s.record_ids, taxonomies, s.kind)?)
}

fn check_k(k: usize, indexes: &[&KeyIndex]) -> Result<()> {
    for idx in indexes {
        if k == 0 || k > idx.len() {
            bail!("--k {k} out of range: key store has {} keys", idx.len());
        }
    }
    Ok(())
}

fn neighbor_ids(index: &KeyIndex, q: ndarray::ArrayView1<'_, f64>, k: usize) -> Result<Vec<String>> {
    Ok(index.query_topk(q, k)?.into_iter().map(|h| h.record_id).collect())
}

pub fn classify(a: ClassifyArgs) -> Result<()> {
    log_config("classify", &a);
    let corpus = files::load_corpus(&a.corpus)?;
    let queries = files::load_store(&a.queries)?;
    let mut rows = Vec::with_capacity(queries.len());
    match a.strategy.as_str() {
        "nn" => {
            if a.unseen_keys.is_some() || a.t1.is_some() || a.probe.is_some() || a.t2.is_some() {
                return Err(usage("--unseen-keys, --t1, --probe and --t2 apply to --strategy is+du only"));
            }
            let keys = a.keys.as_deref().ok_or_else(|| usage("--strategy nn needs --keys"))?;
            let index = labeled_index(keys, &corpus)?;
            check_k(a.k, &[&index])?;
            for (q, id) in queries.matrix.rows().into_iter().zip(&queries.record_ids) {
                let hits = index.query_topk(q, a.k)?;
                rows.push(PredictionRow {
                    record_id: id.clone(),
                    predicted: index.taxonomy(hits[0].index).clone(),
                    branch: None,
                    key_id: Some(hits[0].record_id.clone()),
                    similarity: Some(hits[0].similarity),
                    neighbors: hits.into_iter().map(|h| h.record_id).collect(),
                });
            }
        }
        "is+du" => {
            let unseen_path = a.unseen_keys.as_deref().ok_or_else(|| usage("--strategy is+du needs --unseen-keys"))?;
            let unseen = labeled_index(unseen_path, &corpus)?;
            match (&a.keys, &a.probe) {
                (Some(keys), None) => {
                    let t1 = a.t1.ok_or_else(|| usage("--strategy is+du with --keys needs --t1"))?;
                    let seen = labeled_index(keys, &corpus)?;
                    check_k(a.k, &[&seen, &unseen])?;
                    for (q, id) in queries.matrix.rows().into_iter().zip(&queries.record_ids) {
                        let p = open_set_classify_nn(q, &seen, &unseen, t1)?;
                        let used = if p.branch == Branch::Seen { &seen } else { &unseen };
                        rows.push(PredictionRow {
                            record_id: id.clone(),
                            predicted: p.taxonomy,
                            branch: Some(p.branch.to_string()),
                            key_id: p.key_id,
                            similarity: p.similarity,
                            neighbors: neighbor_ids(used, q, a.k)?,
                        });
                    }
                }
                (None, Some(probe_path)) => {
                    let t2 = a.t2.ok_or_else(|| usage("--strategy is+du with --probe needs --t2"))?;
                    let probe = LinearProbe::load(files::open(probe_path)?)
                        .with_context(|| format!("loading probe {}", probe_path.display()))?;
                    check_k(a.k, &[&unseen])?;
                    for (q, id) in queries.matrix.rows().into_iter().zip(&queries.record_ids) {
                        let p = open_set_classify_linear(q, &probe, t2, &unseen)?;
                        let neighbors = match p.branch {
                            Branch::Seen => Vec::new(),
                            Branch::Unseen => neighbor_ids(&unseen, q, a.k)?,
                        };
                        rows.push(PredictionRow {
                            record_id: id.clone(),
                            predicted: p.taxonomy,
                            branch: Some(p.branch.to_string()),
                            key_id: p.key_id,
                            similarity: p.similarity,
                            neighbors,
                        });
                    }
                }
                _ => return Err(usage("--strategy is+du needs exactly one of --keys or --probe")),
            }
        }
        other => return Err(usage(format!("unknown strategy '{other}' (expected nn or is+du)"))),
    }
    files::write_with(&a.out, |w| files::write_predictions(w, &rows))?;
    eprintln!("classified {} queries", rows.len());
    Ok(())
}

pub fn probe(a: ProbeArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    log_config("probe", &json!({ "args": &a, "seed": seed }));
    let corpus = files::load_corpus(&a.corpus)?;
    let manifest = files::load_manifest(&a.manifest)?;
    let store = files::load_store(&a.store)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, id) in store.record_ids.iter().enumerate() {
        if manifest.get(id) == Some(Partition::TrainSeen) {
            let r = corpus.get(id).with_context(|| format!("record '{id}' is not in the corpus"))?;
            rows.push(i);
            labels.push(r.taxonomy.clone());
        }
    }
    if rows.is_empty() {
        bail!("store {} holds no train_seen records", a.store.display());
    }
    let x = store.matrix.select(Axis(0), &rows);
    let probe = train_linear_probe(&x, &labels, &ProbeConfig { epochs: a.epochs, lr: a.lr, seed })?;
    files::write_with(&a.out, |w| Ok(probe.save(w)?))?;
    eprintln!("probe over {} seen species from {} records", probe.num_classes(), rows.len());
    Ok(())
}

fn gold_seen(manifest: &SplitManifest, id: &str) -> Result<bool> {
    match manifest.get(id) {
        Some(p) if p.is_seen() => Ok(true),
        Some(p) if p.is_unseen() => Ok(false),
        Some(p) => bail!("record '{id}' is in partition {p}, not a seen or unseen split"),
        None => bail!("record '{id}' is not in the manifest"),
    }
}

pub fn tune(a: TuneArgs) -> Result<()> {
    log_config("tune", &a);
    let corpus = files::load_corpus(&a.corpus)?;
    let manifest = files::load_manifest(&a.manifest)?;
    let queries = files::load_store(&a.queries)?;
    let unseen = labeled_index(&a.unseen_keys, &corpus)?;
    let mut golds = Vec::with_capacity(queries.len());
    let mut flags = Vec::with_capacity(queries.len());
    for id in &queries.record_ids {
        golds.push(corpus.get(id).with_context(|| format!("query '{id}' is not in the corpus"))?.taxonomy.clone());
        flags.push(gold_seen(&manifest, id)?);
    }
    let result = match (&a.keys, &a.probe) {
        (Some(keys), None) => {
            let seen = labeled_index(keys, &corpus)?;
            tune_threshold(&queries.matrix, &golds, &flags, OpenSetVariant::Nn { seen_image: &seen }, &unseen, a.grid_size)?
        }
        (None, Some(path)) => {
            let probe = LinearProbe::load(files::open(path)?).with_context(|| format!("loading probe {}", path.display()))?;
            tune_threshold(&queries.matrix, &golds, &flags, OpenSetVariant::Linear { probe: &probe }, &unseen, a.grid_size)?
        }
        _ => return Err(usage("tune needs exactly one of --keys or --probe")),
    };
    let text = serde_json::to_string_pretty(&result)?;
    println!("{text}");
    if let Some(out) = &a.out {
        files::write_with(out, |w| Ok(writeln!(w, "{text}")?))?;
    }
    Ok(())
}

use std::io::Write as _;

pub fn eval(a: EvalArgs) -> Result<()> {
    log_config("eval", &a);
    let corpus = files::load_corpus(&a.corpus)?;
    let manifest = files::load_manifest(&a.manifest)?;
    let rows = files::read_predictions(files::open(&a.predictions)?)
        .with_context(|| format!("reading {}", a.predictions.display()))?;
    let mut queries = Vec::with_capacity(rows.len());
    for row in rows {
        let gold = corpus
            .get(&row.record_id)
            .with_context(|| format!("prediction for unknown record '{}'", row.record_id))?
            .taxonomy
            .clone();
        let predicted_seen = match row.branch.as_deref() {
            None => None,
            Some(b) => Some(b.parse::<Branch>().map_err(anyhow::Error::msg)? == Branch::Seen),
        };
        queries.push(EvalQuery {
            gold_seen: gold_seen(&manifest, &row.record_id)?,
            record_id: row.record_id,
            gold,
            predicted: row.predicted,
            predicted_seen,
        });
    }
    let mut key_counts = std::collections::BTreeMap::new();
    for r in corpus.iter() {
        if let (Some(s), Some(p)) = (r.taxonomy.species(), manifest.get(&r.record_id)) {
            if p.is_key() {
                *key_counts.entry(s.to_string()).or_insert(0) += 1;
            }
        }
    }
    let report = evaluate(&queries, &key_counts, a.bins.as_deref());
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&report)?;
        files::write_with(out, |w| Ok(writeln!(w, "{text}")?))?;
    }
    Ok(())
}

pub fn dump(a: DumpArgs) -> Result<()> {
    let mut bytes = Vec::new();
    files::open(&a.path)?.read_to_end(&mut bytes)?;
    let magic = bytes.get(..4).unwrap_or(&[]);
    if magic == CHECKPOINT_MAGIC {
        let ck = Checkpoint::read_from(bytes.as_slice()).with_context(|| format!("reading {}", a.path.display()))?;
        println!("checkpoint {} ({} tensors)", a.path.display(), ck.tensors.len());
        for t in &ck.tensors {
            println!("  {:<40} {:?}", t.name, t.shape);
        }
        match serde_json::from_str::<serde_json::Value>(&ck.config) {
            Ok(v) => println!("config: {}", serde_json::to_string_pretty(&v)?),
            Err(_) => println!("config: {}", ck.config),
        }
    } else if magic == FEATURE_MAGIC {
        let m = FeatureMatrix::read_from(bytes.as_slice()).with_context(|| format!("reading {}", a.path.display()))?;
        println!("matrix {} ({} x {})", a.path.display(), m.rows(), m.cols());
        let sidecar = files::sidecar_path(&a.path);
        let ids: Option<Vec<String>> = if sidecar.exists() {
            let s = files::load_store(&a.path)?;
            println!("store of {} embeddings", s.kind);
            Some(s.record_ids)
        } else {
            None
        };
        for i in 0..a.rows.min(m.rows()) {
            let label = ids.as_ref().map_or_else(|| format!("row {i}"), |ids| ids[i].clone());
            let values: Vec<String> = m.row(i).iter().map(|v| format!("{v:.4}")).collect();
            println!("  {label}: [{}]", values.join(", "));
        }
    } else {
        bail!(
            "{}: unrecognized file magic {:?} (expected \"TMCK\" checkpoint or \"TMAF\" matrix)",
            a.path.display(),
            String::from_utf8_lossy(magic)
        );
    }
    Ok(())
}
