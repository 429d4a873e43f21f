//! Linear softmax probe over seen species, trained on frozen embeddings.

use std::io::{Read, Write};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AlignError;
use crate::corpus::Taxonomy;
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{Adam, AdamConfig, LinearLayer, NnError, Param, Parameterized};

const PROBE_FORMAT: &str = "tmal-linear-probe";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 300, lr: 1e-2, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProbeMeta {
    format: String,
    input_dim: usize,
    classes: Vec<Taxonomy>,
}

/// `softmax(x W + b)` over one class per seen species.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    layer: LinearLayer,
    classes: Vec<Taxonomy>,
}

impl LinearProbe {
    pub fn classes(&self) -> &[Taxonomy] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer.input_dim()
    }

    pub fn logits(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        self.layer.forward(x)
    }

    /// Row-wise class probabilities.
    pub fn probabilities(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    pub fn save<W: Write>(&self, sink: W) -> Result<(), AlignError> {
        let meta = ProbeMeta { format: PROBE_FORMAT.into(), input_dim: self.input_dim(), classes: self.classes.clone() };
        let ck = Checkpoint::from_params(self, serde_json::to_string(&meta).expect("meta serializes"));
        Ok(ck.write_to(sink)?)
    }

    pub fn load<R: Read>(source: R) -> Result<Self, AlignError> {
        let ck = Checkpoint::read_from(source)?;
        let meta: ProbeMeta = serde_json::from_str(&ck.config)
            .map_err(|e| AlignError::Config(format!("checkpoint config is not a probe description: {e}")))?;
        if meta.format != PROBE_FORMAT {
            return Err(AlignError::Config(format!("checkpoint format '{}', expected '{PROBE_FORMAT}'", meta.format)));
        }
        let n = meta.classes.len();
        let layer = LinearLayer::from_parts("probe", Array2::zeros((meta.input_dim, n)), Array2::zeros((1, n)), true);
        let mut probe = Self { layer, classes: meta.classes };
        ck.load_into(&mut probe)?;
        Ok(probe)
    }
}

impl Parameterized for LinearProbe {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.layer.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layer.visit_mut(f)
    }
}

pub(crate) fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Full-batch softmax cross-entropy with Adam. Classes are the distinct
/// species of `labels`, in sorted order.
pub fn train_linear_probe(
    embeddings: &Array2<f64>,
    labels: &[Taxonomy],
    config: &ProbeConfig,
) -> Result<LinearProbe, AlignError> {
    if embeddings.nrows() == 0 {
        return Err(AlignError::EmptyBatch);
    }
    if embeddings.nrows() != labels.len() {
        return Err(AlignError::Shape(format!("{} embeddings but {} labels", embeddings.nrows(), labels.len())));
    }
    let mut classes: Vec<Taxonomy> = Vec::new();
    for t in labels {
        let species = t.species().ok_or_else(|| AlignError::MissingSpecies(t.serialize()))?;
        if !classes.iter().any(|c| c.species() == Some(species)) {
            classes.push(t.clone());
        }
    }
    classes.sort_by(|a, b| a.species().cmp(&b.species()));
    let targets: Vec<usize> = labels
        .iter()
        .map(|t| classes.iter().position(|c| c.species() == t.species()).expect("class collected"))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layer = LinearLayer::new("probe", embeddings.ncols(), classes.len(), &mut rng);
    let mut probe = LinearProbe { layer, classes };
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let n = embeddings.nrows() as f64;
    for _ in 0..config.epochs {
        let mut d = probe.probabilities(embeddings)?;
        for (mut row, &t) in d.axis_iter_mut(Axis(0)).zip(&targets) {
            row[t] -= 1.0;
        }
        d /= n;
        probe.zero_grad();
        probe.layer.backward(embeddings, &d);
        adam.step(&mut [&mut probe])?;
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tax(s: &str) -> Taxonomy {
        Taxonomy::from_labels(["O", "F", "G", s]).unwrap()
    }

    #[test]
    fn learns_separable_classes() {
        let x = array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]];
        let labels = [tax("G a"), tax("G a"), tax("G b"), tax("G b")];
        let probe = train_linear_probe(&x, &labels, &ProbeConfig::default()).unwrap();
        assert_eq!(probe.num_classes(), 2);
        let p = probe.probabilities(&x).unwrap();
        for (i, row) in p.rows().into_iter().enumerate() {
            let argmax = if row[0] > row[1] { 0 } else { 1 };
            assert_eq!(argmax, i / 2);
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let probe = train_linear_probe(&x, &[tax("G a"), tax("G b")], &ProbeConfig { epochs: 5, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        probe.save(&mut buf).unwrap();
        let back = LinearProbe::load(buf.as_slice()).unwrap();
        assert_eq!(back.classes(), probe.classes());
        let (a, b) = (probe.probabilities(&x).unwrap(), back.probabilities(&x).unwrap());
        assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-5));
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let p = softmax_rows(&Array2::zeros((1, 10)));
        assert!(p.iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }
}
