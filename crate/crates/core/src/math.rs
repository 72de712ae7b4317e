//! Deterministic vector/matrix primitives shared by every other module.
//!
//! All reductions run in f64 with a fixed sequential order so that results
//! are bit-identical across runs.

use crate::error::{Error, Result};

/// Dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::EmptyInput("matrix with zero rows"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(n * cols);
        for r in &rows {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "ragged rows: expected {cols} columns, got {}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: n,
            cols,
            data,
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// A batch of unit-norm descriptor vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    mat: Matrix,
}

impl EmbeddingBatch {
    /// Normalize every row of `mat` to unit L2 norm.
    pub fn from_matrix_normalized(mut mat: Matrix) -> Result<Self> {
        for i in 0..mat.rows {
            let row = mat.row_mut(i);
            let normed = l2_normalize(row)?;
            row.copy_from_slice(&normed);
        }
        Ok(EmbeddingBatch { mat })
    }

    /// Wrap a matrix whose rows are already unit-norm (within 1e-6).
    pub fn from_unit_rows(mat: Matrix) -> Result<Self> {
        for i in 0..mat.rows {
            let n = l2_norm(mat.row(i));
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!(
                    "row {i} has norm {n}, expected unit norm"
                )));
            }
        }
        Ok(EmbeddingBatch { mat })
    }

    pub fn rows(&self) -> usize {
        self.mat.rows
    }

    pub fn dim(&self) -> usize {
        self.mat.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.mat.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.mat
    }
}

/// Pairwise L2 distances between two batches.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

#[inline]
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L2 distance between two unit-norm vectors via the expanded form
/// sqrt(2 - 2*dot), clamped at 0 before the square root.
#[inline]
pub fn unit_distance(a: &[f64], b: &[f64]) -> f64 {
    (2.0 - 2.0 * dot(a, b)).max(0.0).sqrt()
}

/// Scale a vector to unit L2 norm, preserving direction.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("l2_normalize on empty vector"));
    }
    let n = l2_norm(v);
    if n < 1e-12 {
        return Err(Error::DegenerateVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Pairwise L2 distances between rows of `a` and rows of `b`.
///
/// When `a` and `b` are the same batch object, the diagonal is
/// short-circuited to exactly zero and the matrix is mirrored so it is
/// exactly symmetric.
pub fn pairwise_distances(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<DistanceMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "pairwise_distances: dim {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (rows, cols) = (a.rows(), b.rows());
    let mut data = vec![0.0; rows * cols];
    if std::ptr::eq(a, b) {
        for i in 0..rows {
            for j in (i + 1)..cols {
                let d = unit_distance(a.row(i), b.row(j));
                data[i * cols + j] = d;
                data[j * cols + i] = d;
            }
        }
    } else {
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = unit_distance(a.row(i), b.row(j));
            }
        }
    }
    Ok(DistanceMatrix { rows, cols, data })
}

/// Median of a list of reals. Even lengths take the mean of the two middle
/// order statistics.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("median of empty list"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingBatch {
        let data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        EmbeddingBatch::from_matrix_normalized(Matrix {
            rows,
            cols: dim,
            data,
        })
        .unwrap()
    }

    #[test]
    fn normalize_three_four() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15);
        assert!((v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_already_unit() {
        let v = l2_normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_zero_is_degenerate() {
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn self_distance_zero_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_batch(&mut rng, 6, 4);
        let d = pairwise_distances(&b, &b).unwrap();
        for i in 0..6 {
            assert_eq!(d.entry(i, i), 0.0);
            for j in 0..6 {
                assert_eq!(d.entry(i, j), d.entry(j, i));
            }
        }
    }

    #[test]
    fn orthogonal_unit_vectors() {
        let a = EmbeddingBatch::from_unit_rows(
            Matrix::from_rows(vec![vec![1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let b = EmbeddingBatch::from_unit_rows(
            Matrix::from_rows(vec![vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let d = pairwise_distances(&a, &b).unwrap();
        assert!((d.entry(0, 0) - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn distances_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_batch(&mut rng, 5, 3);
        let b = random_batch(&mut rng, 4, 3);
        let d = pairwise_distances(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                // independent oracle: element-by-element difference loop
                let mut s = 0.0;
                for k in 0..3 {
                    let diff = a.row(i)[k] - b.row(j)[k];
                    s += diff * diff;
                }
                assert!((d.entry(i, j) - s.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_batch(&mut rng, 2, 3);
        let b = random_batch(&mut rng, 2, 4);
        assert!(matches!(pairwise_distances(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn median_odd_even_empty() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert!(matches!(median(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn median_matches_sort_oracle_on_1001_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let vals: Vec<f64> = (0..1001).map(|_| rng.gen::<f64>()).collect();
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(median(&vals).unwrap(), sorted[500]);
    }

    #[test]
    fn triangle_inequality_within_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_batch(&mut rng, 8, 5);
        let d = pairwise_distances(&b, &b).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    assert!(d.entry(i, k) <= d.entry(i, j) + d.entry(j, k) + 1e-9);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn median_permutation_invariant(mut vals in proptest::collection::vec(-1e3f64..1e3, 1..64), seed in 0u64..1000) {
            let m1 = median(&vals).unwrap();
            // deterministic shuffle
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            vals.shuffle(&mut rng);
            let m2 = median(&vals).unwrap();
            prop_assert_eq!(m1, m2);
        }

        #[test]
        fn unit_distances_in_range(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_batch(&mut rng, 4, 6);
            let d = pairwise_distances(&b, &b).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    prop_assert!(d.entry(i, j) >= 0.0 && d.entry(i, j) <= 2.0 + 1e-12);
                }
            }
        }
    }
}
