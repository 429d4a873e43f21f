//! Deterministic synthetic corpora.
//!
//! Species sit in a fixed hierarchy (3 species per genus, 3 genera per family,
//! 4 families per order). Both the latent image vector and the DNA template of
//! a species are derived from its ancestors, so related species are closer in
//! both modalities. Per-record image noise is Gaussian with standard deviation
//! `noise`; per-record barcode substitutions occur at rate `0.1 * noise`.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Record, RecordSet, Taxonomy};

const SPECIES_PER_GENUS: usize = 3;
const GENERA_PER_FAMILY: usize = 3;
const FAMILIES_PER_ORDER: usize = 4;

const NUCLEOTIDES: [u8; 4] = *b"ACGT";

/// Parameters for [`generate_synthetic_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_species: usize,
    pub records_per_species: usize,
    pub d_img: usize,
    pub noise: f64,
    pub seed: u64,
    pub barcode_len: usize,
}

impl SyntheticConfig {
    pub fn new(n_species: usize, records_per_species: usize, d_img: usize, noise: f64, seed: u64) -> Self {
        Self { n_species, records_per_species, d_img, noise, seed, barcode_len: 60 }
    }
}

/// Uniform corpus: every species gets `records_per_species` records.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> RecordSet {
    assert!(cfg.n_species >= 1 && cfg.records_per_species >= 1, "empty synthetic corpus");
    let counts = vec![cfg.records_per_species; cfg.n_species];
    generate_with_counts(&counts, cfg.d_img, cfg.noise, cfg.barcode_len, cfg.seed)
}

/// Corpus with an explicit record count per species (heavy tails, singletons).
/// Species with a zero count are skipped but still occupy their place in the
/// hierarchy.
pub fn generate_with_counts(counts: &[usize], d_img: usize, noise: f64, barcode_len: usize, seed: u64) -> RecordSet {
    assert!(noise >= 0.0 && noise.is_finite(), "noise must be finite and >= 0");
    assert!(barcode_len >= 1, "barcode_len must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_species = counts.len();
    let n_genera = n_species.div_ceil(SPECIES_PER_GENUS);
    let n_families = n_genera.div_ceil(GENERA_PER_FAMILY);
    let n_orders = n_families.div_ceil(FAMILIES_PER_ORDER);

    let orders: Vec<(Vec<f64>, Vec<u8>)> = (0..n_orders)
        .map(|_| {
            let v = gaussian(&mut rng, d_img, 1.0);
            let dna = (0..barcode_len).map(|_| *NUCLEOTIDES.choose(&mut rng).unwrap()).collect();
            (v, dna)
        })
        .collect();
    let families = derive_level(&orders, n_families, FAMILIES_PER_ORDER, 0.8, 0.15, &mut rng);
    let genera = derive_level(&families, n_genera, GENERA_PER_FAMILY, 0.6, 0.10, &mut rng);
    let species = derive_level(&genera, n_species, SPECIES_PER_GENUS, 0.6, 0.06, &mut rng);

    let record_rate = 0.1 * noise;
    let mut records = Vec::with_capacity(counts.iter().sum());
    for (s, &count) in counts.iter().enumerate() {
        let g = s / SPECIES_PER_GENUS;
        let f = g / GENERA_PER_FAMILY;
        let o = f / FAMILIES_PER_ORDER;
        let genus = format!("Gen{g:04}");
        let taxonomy = Taxonomy::from_labels([
            format!("Ord{o:03}"),
            format!("Fam{f:04}"),
            genus.clone(),
            format!("{genus} sp{s:05}"),
        ])
        .expect("generated labels are valid");
        let (latent, template) = &species[s];
        for _ in 0..count {
            let image_feature = latent
                .iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (x + noise * z) as f32
                })
                .collect();
            let barcode = mutate(template, record_rate, &mut rng);
            records.push(Record {
                record_id: format!("r{:07}", records.len()),
                image_feature,
                dna_barcode: String::from_utf8(barcode).expect("ACGT"),
                taxonomy: taxonomy.clone(),
            });
        }
    }
    RecordSet::new(records, d_img).expect("generated records are valid")
}

fn derive_level(
    parents: &[(Vec<f64>, Vec<u8>)],
    n: usize,
    fanout: usize,
    scale: f64,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(Vec<f64>, Vec<u8>)> {
    (0..n)
        .map(|i| {
            let (pv, pdna) = &parents[i / fanout];
            let offset = gaussian(rng, pv.len(), scale);
            let v = pv.iter().zip(offset).map(|(a, b)| a + b).collect();
            (v, mutate(pdna, rate, rng))
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Point substitutions, each site independently with probability `rate`.
fn mutate(template: &[u8], rate: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    template
        .iter()
        .map(|&b| {
            if rate > 0.0 && rng.random::<f64>() < rate {
                let others: Vec<u8> = NUCLEOTIDES.iter().copied().filter(|&n| n != b).collect();
                *others.choose(rng).unwrap()
            } else {
                b
            }
        })
        .collect()
}
