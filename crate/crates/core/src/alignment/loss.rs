use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{AlignError, EmbeddingBatch};
use crate::Modality;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    /// Sum divided by the batch size.
    #[default]
    Mean,
}

#[derive(Debug, Clone)]
pub struct PairLoss {
    pub loss: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct TrimodalLoss {
    pub loss: f64,
    /// Loss of every unordered pair, in input order.
    pub pairs: Vec<(Modality, Modality, f64)>,
    /// Gradient for each input batch, in input order.
    pub grads: Vec<Array2<f64>>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// NT-Xent on raw matrices without the unit-norm check; the gradient treats
/// every entry as a free variable.
///
/// With `S = A B^T / tau`, the loss is the sum over rows of the row-wise and
/// column-wise cross-entropies against the diagonal, and
/// `dS = (softmax_rows(S) - I) + (softmax_cols(S) - I)`.
pub fn ntxent_loss_matrices(
    a: &Array2<f64>,
    b: &Array2<f64>,
    tau: f64,
    reduction: Reduction,
) -> Result<PairLoss, AlignError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(AlignError::BadTemperature(tau));
    }
    let n = a.nrows();
    if n == 0 {
        return Err(AlignError::EmptyBatch);
    }
    if a.dim() != b.dim() {
        return Err(AlignError::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    // explicit row dots keep S(A, B) bitwise equal to S(B, A)^T
    let mut s = Array2::zeros((n, n));
    for i in 0..n {
        for k in 0..n {
            s[[i, k]] = a.row(i).dot(&b.row(k)) / tau;
        }
    }
    let row_lse: Array1<f64> = (0..n).map(|i| log_sum_exp(s.row(i).into_iter().copied())).collect();
    let col_lse: Array1<f64> = (0..n).map(|k| log_sum_exp(s.column(k).into_iter().copied())).collect();
    let a_to_b: f64 = (0..n).map(|i| row_lse[i] - s[[i, i]]).sum();
    let b_to_a: f64 = (0..n).map(|i| col_lse[i] - s[[i, i]]).sum();
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n as f64,
    };
    let loss = (a_to_b + b_to_a) * scale;

    let mut ds = Array2::zeros((n, n));
    for i in 0..n {
        for k in 0..n {
            let diag = if i == k { 2.0 } else { 0.0 };
            ds[[i, k]] = ((s[[i, k]] - row_lse[i]).exp() + (s[[i, k]] - col_lse[k]).exp() - diag) * scale / tau;
        }
    }
    let grad_a = ds.dot(b);
    let grad_b = ds.t().dot(a);
    Ok(PairLoss { loss, grad_a, grad_b })
}

/// Symmetric NT-Xent between two aligned batches.
pub fn ntxent_pair_loss(
    a: &EmbeddingBatch,
    b: &EmbeddingBatch,
    tau: f64,
    reduction: Reduction,
) -> Result<PairLoss, AlignError> {
    check_aligned(a, b)?;
    ntxent_loss_matrices(&a.matrix, &b.matrix, tau, reduction)
}

fn check_aligned(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<(), AlignError> {
    if a.is_empty() || b.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    if a.len() != b.len() {
        return Err(AlignError::Shape(format!("batch sizes {} vs {}", a.len(), b.len())));
    }
    if let Some(row) = (0..a.len()).find(|&i| a.record_ids[i] != b.record_ids[i]) {
        return Err(AlignError::IdMismatch {
            row,
            left: a.record_ids[row].clone(),
            right: b.record_ids[row].clone(),
        });
    }
    Ok(())
}

/// Sum of [`ntxent_pair_loss`] over all unordered pairs of the given batches.
pub fn trimodal_loss(batches: &[&EmbeddingBatch], tau: f64, reduction: Reduction) -> Result<TrimodalLoss, AlignError> {
    if batches.len() < 2 {
        return Err(AlignError::TooFewModalities(batches.len()));
    }
    for (i, x) in batches.iter().enumerate() {
        if batches[..i].iter().any(|y| y.modality == x.modality) {
            return Err(AlignError::DuplicateModality(x.modality));
        }
    }
    let mut grads: Vec<Array2<f64>> = batches.iter().map(|b| Array2::zeros(b.matrix.raw_dim())).collect();
    let mut pairs = Vec::new();
    let mut loss = 0.0;
    for i in 0..batches.len() {
        for j in i + 1..batches.len() {
            let p = ntxent_pair_loss(batches[i], batches[j], tau, reduction)?;
            loss += p.loss;
            grads[i] += &p.grad_a;
            grads[j] += &p.grad_b;
            pairs.push((batches[i].modality, batches[j].modality, p.loss));
        }
    }
    Ok(TrimodalLoss { loss, pairs, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gaussian_matrix, l2_normalize_rows};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        l2_normalize_rows(&gaussian_matrix(rng, n, d, 1.0)).unwrap().0
    }

    fn batch(m: Array2<f64>, modality: Modality) -> EmbeddingBatch {
        let ids = (0..m.nrows()).map(|i| format!("r{i}")).collect();
        EmbeddingBatch::new(m, modality, ids).unwrap()
    }

    /// Explicit softmax probabilities, then cross-entropy against the diagonal.
    fn brute_force(a: &Array2<f64>, b: &Array2<f64>, tau: f64) -> f64 {
        let n = a.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|k| (a.row(i).dot(&b.row(k)) / tau).exp()).collect();
            total -= (row[i] / row.iter().sum::<f64>()).ln();
            let col: Vec<f64> = (0..n).map(|k| (b.row(i).dot(&a.row(k)) / tau).exp()).collect();
            total -= (col[i] / col.iter().sum::<f64>()).ln();
        }
        total
    }

    #[test]
    fn single_pair_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = unit(&mut rng, 1, 8);
        let b = unit(&mut rng, 1, 8);
        let p = ntxent_loss_matrices(&a, &b, 0.07, Reduction::Sum).unwrap();
        assert_eq!(p.loss, 0.0);
    }

    #[test]
    fn identical_rows_give_8_ln_4() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let row = unit(&mut rng, 1, 8);
        let m = Array2::from_shape_fn((4, 8), |(_, j)| row[[0, j]]);
        let p = ntxent_loss_matrices(&m, &m, 0.07, Reduction::Sum).unwrap();
        assert!((p.loss - 8.0 * 4f64.ln()).abs() < 1e-12);
        let mean = ntxent_loss_matrices(&m, &m, 0.07, Reduction::Mean).unwrap();
        assert!((mean.loss - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = unit(&mut rng, 8, 16);
            let b = unit(&mut rng, 8, 16);
            let p = ntxent_loss_matrices(&a, &b, 0.07, Reduction::Sum).unwrap();
            assert!((p.loss - brute_force(&a, &b, 0.07)).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let a = unit(&mut rng, 8, 16);
            let b = unit(&mut rng, 8, 16);
            let p = ntxent_loss_matrices(&a, &b, 0.07, reduction).unwrap();
            for (which, analytic) in [(0, &p.grad_a), (1, &p.grad_b)] {
                let mut diff2 = 0.0;
                let mut norm2 = 0.0;
                for idx in 0..a.len() {
                    let (i, j) = (idx / 16, idx % 16);
                    let eval = |delta: f64| {
                        let (mut a2, mut b2) = (a.clone(), b.clone());
                        if which == 0 { a2[[i, j]] += delta } else { b2[[i, j]] += delta }
                        ntxent_loss_matrices(&a2, &b2, 0.07, reduction).unwrap().loss
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    diff2 += (analytic[[i, j]] - numeric).powi(2);
                    norm2 += numeric * numeric;
                }
                assert!(diff2.sqrt() / norm2.sqrt() < 1e-4);
            }
        }
    }

    #[test]
    fn symmetric_and_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = unit(&mut rng, 6, 5);
        let b = unit(&mut rng, 6, 5);
        let ab = ntxent_loss_matrices(&a, &b, 0.07, Reduction::Sum).unwrap();
        let ba = ntxent_loss_matrices(&b, &a, 0.07, Reduction::Sum).unwrap();
        assert_eq!(ab.loss, ba.loss);
        let perm = [3, 0, 5, 1, 4, 2];
        let pa = a.select(ndarray::Axis(0), &perm);
        let pb = b.select(ndarray::Axis(0), &perm);
        let p = ntxent_loss_matrices(&pa, &pb, 0.07, Reduction::Sum).unwrap();
        assert!((p.loss - ab.loss).abs() < 1e-12);
        assert!(ab.loss >= 0.0);
    }

    #[test]
    fn pair_loss_validates_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = batch(unit(&mut rng, 3, 4), Modality::Image);
        let mut b = batch(unit(&mut rng, 3, 4), Modality::Dna);
        b.record_ids[1] = "other".into();
        assert!(matches!(ntxent_pair_loss(&a, &b, 0.07, Reduction::Sum), Err(AlignError::IdMismatch { row: 1, .. })));
        let empty = batch(Array2::zeros((0, 4)), Modality::Dna);
        assert!(matches!(ntxent_pair_loss(&empty, &empty, 0.07, Reduction::Sum), Err(AlignError::EmptyBatch)));
        assert!(EmbeddingBatch::new(Array2::ones((1, 4)), Modality::Image, vec!["x".into()]).is_err());
    }

    #[test]
    fn trimodal_is_sum_of_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = batch(unit(&mut rng, 5, 6), Modality::Image);
        let d = batch(unit(&mut rng, 5, 6), Modality::Dna);
        let t = batch(unit(&mut rng, 5, 6), Modality::Text);
        let tri = trimodal_loss(&[&x, &d, &t], 0.07, Reduction::Sum).unwrap();
        let sum: f64 = [(&x, &d), (&d, &t), (&x, &t)]
            .iter()
            .map(|(p, q)| ntxent_pair_loss(p, q, 0.07, Reduction::Sum).unwrap().loss)
            .sum();
        assert!((tri.loss - sum).abs() < 1e-12);

        let two = trimodal_loss(&[&x, &d], 0.07, Reduction::Sum).unwrap();
        assert_eq!(two.loss, ntxent_pair_loss(&x, &d, 0.07, Reduction::Sum).unwrap().loss);
        assert!(matches!(trimodal_loss(&[&x], 0.07, Reduction::Sum), Err(AlignError::TooFewModalities(1))));

        let same = [x.clone(), EmbeddingBatch { modality: Modality::Dna, ..x.clone() }, EmbeddingBatch { modality: Modality::Text, ..x.clone() }];
        let tri = trimodal_loss(&[&same[0], &same[1], &same[2]], 0.07, Reduction::Sum).unwrap();
        let one = ntxent_pair_loss(&same[0], &same[1], 0.07, Reduction::Sum).unwrap().loss;
        assert!((tri.loss - 3.0 * one).abs() < 1e-12);
    }
}
