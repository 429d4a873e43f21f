use ndarray::{Array1, Array2, Axis, Zip};

use super::NnError;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Mean of the rows where `mask` is true.
pub fn masked_mean_pool(h: &Array2<f64>, mask: &[bool]) -> Result<Array1<f64>, NnError> {
    if mask.len() != h.nrows() {
        return Err(super::shape_err("masked_mean_pool", h.nrows(), mask.len()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(NnError::EmptyMask);
    }
    let mut sum = Array1::zeros(h.ncols());
    for (row, _) in h.axis_iter(Axis(0)).zip(mask).filter(|(_, &m)| m) {
        sum += &row;
    }
    Ok(sum / count as f64)
}

/// Row-wise unit normalization. Returns the normalized rows and the norms.
pub fn l2_normalize_rows(z: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>), NnError> {
    let norms = z.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    if let Some(row) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(if norms[row] == 0.0 {
            NnError::DegenerateEmbedding { row }
        } else {
            NnError::NonFinite(format!("embedding row {row}"))
        });
    }
    let y = z / &norms.view().insert_axis(Axis(1));
    Ok((y, norms))
}

/// Backward of [`l2_normalize_rows`]: `dz = (dy - y (y . dy)) / |z|`.
pub fn l2_normalize_rows_backward(y: &Array2<f64>, norms: &Array1<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dz = dy.clone();
    Zip::from(dz.rows_mut())
        .and(y.rows())
        .and(norms)
        .for_each(|mut dz_row, y_row, &n| {
            let proj = y_row.dot(&dz_row);
            dz_row.scaled_add(-proj, &y_row);
            dz_row /= n;
        });
    dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian_matrix;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pool_cases() {
        let h = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(masked_mean_pool(&h, &[true, false]).unwrap(), array![1.0, 2.0]);
        let sym = array![[1.0, -2.0], [-1.0, 2.0]];
        assert_eq!(masked_mean_pool(&sym, &[true, true]).unwrap(), array![0.0, 0.0]);
        assert!(matches!(masked_mean_pool(&h, &[false, false]), Err(NnError::EmptyMask)));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = gaussian_matrix(&mut rng, 6, 4, 1.0);
        let mask = [true, true, true, false, false, false];
        let got = masked_mean_pool(&r, &mask).unwrap();
        for c in 0..4 {
            let expected = (r[[0, c]] + r[[1, c]] + r[[2, c]]) / 3.0;
            assert!((got[c] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let h = 1e-6;
            let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((numeric - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn normalization_and_its_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = gaussian_matrix(&mut rng, 3, 5, 2.0);
        let probe = gaussian_matrix(&mut rng, 3, 5, 1.0);
        let (y, norms) = l2_normalize_rows(&z).unwrap();
        for row in y.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
        let dz = l2_normalize_rows_backward(&y, &norms, &probe);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..5 {
                let mut zp = z.clone();
                zp[[i, j]] += h;
                let mut zm = z.clone();
                zm[[i, j]] -= h;
                let f = |m: &Array2<f64>| (l2_normalize_rows(m).unwrap().0 * &probe).sum();
                let numeric = (f(&zp) - f(&zm)) / (2.0 * h);
                assert!((numeric - dz[[i, j]]).abs() < 1e-8);
            }
        }
        assert!(matches!(
            l2_normalize_rows(&Array2::zeros((2, 3))),
            Err(NnError::DegenerateEmbedding { row: 0 })
        ));
    }
}
