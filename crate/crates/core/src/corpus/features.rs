//! Dense row-major `f32` matrices and their binary file format.
//!
//! Layout: `TMAF`, version byte `0x01`, rows and cols as little-endian `u64`,
//! then `rows * cols` little-endian IEEE-754 `f32` values, row-major.

use std::io::{Read, Write};

use ndarray::Array2;

use super::CorpusError;

pub const FEATURE_MAGIC: &[u8; 4] = b"TMAF";
pub const FEATURE_VERSION: u8 = 0x01;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self, CorpusError> {
        if rows.checked_mul(cols) != Some(values.len()) {
            return Err(CorpusError::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows.saturating_mul(cols),
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    /// Narrows an `f64` matrix to `f32` storage.
    pub fn from_array(a: &Array2<f64>) -> Self {
        let (rows, cols) = a.dim();
        Self { rows, cols, values: a.iter().map(|&v| v as f32).collect() }
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_vec(
            (self.rows, self.cols),
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("shape checked at construction")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<(), CorpusError> {
        let mut buf = Vec::with_capacity(21 + self.values.len() * 4);
        buf.extend_from_slice(FEATURE_MAGIC);
        buf.push(FEATURE_VERSION);
        buf.extend_from_slice(&(self.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut source: R) -> Result<Self, CorpusError> {
        let mut header = [0u8; 21];
        source
            .read_exact(&mut header)
            .map_err(|_| CorpusError::Truncated("feature matrix header".into()))?;
        if &header[..4] != FEATURE_MAGIC {
            return Err(CorpusError::BadMagic {
                expected: "TMAF",
                found: String::from_utf8_lossy(&header[..4]).into_owned(),
            });
        }
        if header[4] != FEATURE_VERSION {
            return Err(CorpusError::BadVersion {
                magic: "TMAF",
                expected: FEATURE_VERSION,
                found: header[4],
            });
        }
        let rows = u64::from_le_bytes(header[5..13].try_into().unwrap());
        let cols = u64::from_le_bytes(header[13..21].try_into().unwrap());
        let count = rows
            .checked_mul(cols)
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| CorpusError::Shape(format!("{rows}x{cols} is too large")))?;
        let mut payload = Vec::new();
        source.read_to_end(&mut payload)?;
        if payload.len() < count * 4 {
            return Err(CorpusError::Truncated(format!(
                "expected {} payload bytes, found {}",
                count * 4,
                payload.len()
            )));
        }
        if payload.len() > count * 4 {
            return Err(CorpusError::Shape(format!(
                "{} trailing bytes after payload",
                payload.len() - count * 4
            )));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(CorpusError::NonFinite(format!(
                "non-finite value at row {}, col {}",
                pos / cols as usize,
                pos % cols as usize
            )));
        }
        Ok(Self { rows: rows as usize, cols: cols as usize, values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_round_trip_has_expected_size() {
        let m = FeatureMatrix::zeros(2, 3);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 21 + 24);
        assert_eq!(FeatureMatrix::read_from(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn nan_is_written_but_rejected_on_read() {
        let m = FeatureMatrix::new(1, 2, vec![1.0, f32::NAN]).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let err = FeatureMatrix::read_from(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("non-finite value"), "{err}");
    }

    #[test]
    fn random_matrix_round_trips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f32> = (0..100 * 64).map(|_| rng.random_range(-1e3f32..1e3)).collect();
        let m = FeatureMatrix::new(100, 64, values.clone()).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        // independent decode of the payload bytes
        let decoded: Vec<u32> = buf[21..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let expected: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(decoded, expected);
        let back = FeatureMatrix::read_from(buf.as_slice()).unwrap();
        let back_bits: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(back_bits, expected);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut buf = Vec::new();
        FeatureMatrix::zeros(2, 2).write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            FeatureMatrix::read_from(bad.as_slice()),
            Err(CorpusError::BadMagic { .. })
        ));
        buf.truncate(buf.len() - 1);
        assert!(matches!(
            FeatureMatrix::read_from(buf.as_slice()),
            Err(CorpusError::Truncated(_))
        ));
        assert!(FeatureMatrix::new(2, 2, vec![0.0; 3]).is_err());
    }
}
