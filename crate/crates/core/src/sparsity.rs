//! Importance scoring, mask construction at a target sparsity level, and
//! sparsity accounting.
//!
//! Two scoring functions are provided: plain weight magnitude and the
//! activation-aware score `|w| * ||x_col||_2` computed from a calibration
//! sample. Masks are built by pruning the lowest-scoring entries per
//! comparison group; ties break toward the lowest row-major index so the
//! result is deterministic. Pre-existing exact zeros score 0 under both
//! functions and are therefore pruned first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Nonnegative importance scores, same shape as the scored weight.
#[derive(Debug, Clone)]
pub struct ScoreMatrix(Matrix);

impl ScoreMatrix {
    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Target sparsity `s` in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityLevel(f64);

impl SparsityLevel {
    pub fn new(s: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&s) {
            return Err(Error::Config(format!("sparsity level {s} not in [0, 1)")));
        }
        Ok(Self(s))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Comparison group for ranking scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// One group per output row (per output neuron).
    #[default]
    PerRow,
    /// A single group over the whole matrix.
    PerMatrix,
}

/// Binary mask over a weight matrix; 1 = kept, 0 = pruned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl SparsityMask {
    pub fn all_ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![1; rows * cols],
        }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Shape("mask bits length mismatch".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Data("mask bits must be 0 or 1".into()));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn is_kept(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j] == 1
    }

    /// Fraction of kept entries.
    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().filter(|&&b| b == 1).count() as f64 / self.bits.len() as f64
    }

    /// Fraction of pruned entries.
    pub fn zero_fraction(&self) -> f64 {
        1.0 - self.density()
    }

    /// The mask as a 0/1 matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::new(
            self.rows,
            self.cols,
            self.bits.iter().map(|&b| b as f64).collect(),
        )
        .expect("mask bits are finite")
    }
}

/// Baseline magnitude score: entrywise absolute value.
pub fn score_magnitude(w: &Matrix) -> ScoreMatrix {
    let data = w.data().iter().map(|v| v.abs()).collect();
    ScoreMatrix(Matrix::new(w.rows(), w.cols(), data).expect("abs of finite is finite"))
}

/// Activation-aware score: `score[i][j] = |w[i][j]| * ||calib column j||_2`.
///
/// Calibration samples are rows of `calib_x`; feature `j` of the calibration
/// set aligns with column `j` of `w`.
pub fn score_wanda(w: &Matrix, calib_x: &Matrix) -> Result<ScoreMatrix> {
    if calib_x.cols() != w.cols() {
        return Err(Error::Shape(format!(
            "calibration has {} features, weight has {} columns",
            calib_x.cols(),
            w.cols()
        )));
    }
    let norms = calib_x.col_l2_norms()?;
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            out.set(i, j, w.get(i, j).abs() * norms[j]);
        }
    }
    Ok(ScoreMatrix(out))
}

/// Build a mask pruning exactly `floor(s * group_size)` lowest-scoring entries
/// in each comparison group. Ties break toward the lowest row-major index.
pub fn build_mask(scores: &ScoreMatrix, level: SparsityLevel, group: Group) -> SparsityMask {
    let m = scores.as_matrix();
    let (rows, cols) = m.shape();
    let mut bits = vec![1u8; rows * cols];
    let groups: Vec<Vec<usize>> = match group {
        Group::PerRow => (0..rows)
            .map(|i| (i * cols..(i + 1) * cols).collect())
            .collect(),
        Group::PerMatrix => vec![(0..rows * cols).collect()],
    };
    for indices in groups {
        let prune_count = (level.value() * indices.len() as f64).floor() as usize;
        let mut order = indices;
        // Stable ordering by (score, index): lowest index pruned first on ties.
        order.sort_by(|&a, &b| {
            m.data()[a]
                .partial_cmp(&m.data()[b])
                .expect("scores are finite")
                .then(a.cmp(&b))
        });
        for &idx in order.iter().take(prune_count) {
            bits[idx] = 0;
        }
    }
    SparsityMask { rows, cols, bits }
}

/// `W ⊙ M`: zero the pruned positions.
pub fn apply_mask(w: &Matrix, m: &SparsityMask) -> Result<Matrix> {
    if w.shape() != m.shape() {
        return Err(Error::Shape(format!(
            "apply_mask weight {:?} vs mask {:?}",
            w.shape(),
            m.shape()
        )));
    }
    w.hadamard(&m.to_matrix())
}

/// Fraction of exactly-zero entries.
pub fn measure_sparsity(w: &Matrix) -> f64 {
    if w.data().is_empty() {
        return 0.0;
    }
    w.data().iter().filter(|&&v| v == 0.0).count() as f64 / w.data().len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn magnitude_score_cases() {
        let w = Matrix::from_rows(&[vec![-2.0, 1.0]]).unwrap();
        assert_eq!(score_magnitude(&w).as_matrix().data(), &[2.0, 1.0]);
        let z = Matrix::zeros(2, 2);
        assert_eq!(score_magnitude(&z).as_matrix(), &z);
        // Sign-flip invariance.
        let mut rng = Rng::new(9);
        let r = rng.uniform_matrix(5, 5, -1.0, 1.0);
        let neg = r.scale(-1.0).unwrap();
        assert_eq!(score_magnitude(&r).as_matrix(), score_magnitude(&neg).as_matrix());
    }

    #[test]
    fn wanda_score_hand_computed() {
        let w = Matrix::from_rows(&[vec![1.0, -4.0], vec![3.0, 2.0]]).unwrap();
        // Calibration rows chosen so column norms are [2, 1].
        let x = Matrix::from_rows(&[vec![2.0, 1.0]]).unwrap();
        let s = score_wanda(&w, &x).unwrap();
        assert_eq!(s.as_matrix().data(), &[2.0, 4.0, 6.0, 2.0]);
    }

    #[test]
    fn wanda_all_ones_calibration() {
        let w = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let k = 9;
        let calib = Matrix::new(k, 2, vec![1.0; k * 2]).unwrap();
        let s = score_wanda(&w, &calib).unwrap();
        let sqrt_k = (k as f64).sqrt();
        for (got, w_v) in s.as_matrix().data().iter().zip(w.data()) {
            assert!((got - w_v.abs() * sqrt_k).abs() < 1e-12);
        }
    }

    #[test]
    fn wanda_zero_calibration_column() {
        let w = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let calib = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let s = score_wanda(&w, &calib).unwrap();
        assert_eq!(s.as_matrix().get(0, 1), 0.0);
    }

    #[test]
    fn wanda_shape_error() {
        let w = Matrix::zeros(2, 3);
        let calib = Matrix::zeros(4, 2);
        assert!(matches!(score_wanda(&w, &calib), Err(Error::Shape(_))));
    }

    #[test]
    fn build_mask_per_row() {
        let scores = score_magnitude(
            &Matrix::from_rows(&[vec![2.0, 4.0], vec![6.0, 2.0]]).unwrap(),
        );
        let mask = build_mask(&scores, SparsityLevel::new(0.5).unwrap(), Group::PerRow);
        assert_eq!(mask.bits(), &[0, 1, 1, 0]);
    }

    #[test]
    fn build_mask_zero_level_keeps_all() {
        let scores = score_magnitude(&Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let mask = build_mask(&scores, SparsityLevel::new(0.0).unwrap(), Group::PerRow);
        assert_eq!(mask, SparsityMask::all_ones(2, 2));
    }

    #[test]
    fn build_mask_per_matrix() {
        let scores = score_magnitude(&Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let mask = build_mask(&scores, SparsityLevel::new(0.5).unwrap(), Group::PerMatrix);
        assert_eq!(mask.bits(), &[0, 0, 1, 1]);
    }

    #[test]
    fn build_mask_prunes_exact_count() {
        let mut rng = Rng::new(21);
        for cols in [4usize, 5, 7] {
            let scores = score_magnitude(&rng.uniform_matrix(6, cols, -1.0, 1.0));
            for s in [0.3, 0.5, 0.7] {
                let mask = build_mask(&scores, SparsityLevel::new(s).unwrap(), Group::PerRow);
                let per_row = (s * cols as f64).floor() as usize;
                for i in 0..6 {
                    let pruned = (0..cols).filter(|&j| !mask.is_kept(i, j)).count();
                    assert_eq!(pruned, per_row);
                }
            }
        }
    }

    #[test]
    fn wanda_scale_equivariance_of_mask() {
        let mut rng = Rng::new(17);
        let w = rng.uniform_matrix(6, 8, -1.0, 1.0);
        let calib = rng.normal_matrix(16, 8);
        let scaled = calib.scale(3.5).unwrap();
        let level = SparsityLevel::new(0.5).unwrap();
        let m1 = build_mask(&score_wanda(&w, &calib).unwrap(), level, Group::PerRow);
        let m2 = build_mask(&score_wanda(&w, &scaled).unwrap(), level, Group::PerRow);
        assert_eq!(m1, m2);
    }

    #[test]
    fn pruning_monotonicity() {
        let mut rng = Rng::new(19);
        let scores = score_magnitude(&rng.uniform_matrix(5, 8, -1.0, 1.0));
        let lo = build_mask(&scores, SparsityLevel::new(0.25).unwrap(), Group::PerRow);
        let hi = build_mask(&scores, SparsityLevel::new(0.75).unwrap(), Group::PerRow);
        for (b_hi, b_lo) in hi.bits().iter().zip(lo.bits()) {
            // Everything kept at the higher level is kept at the lower one.
            assert!(*b_hi == 0 || *b_lo == 1);
        }
    }

    #[test]
    fn apply_mask_cases() {
        let w = Matrix::from_rows(&[vec![1.0, -4.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(apply_mask(&w, &SparsityMask::all_ones(2, 2)).unwrap(), w);
        let m = SparsityMask::from_bits(2, 2, vec![0, 1, 1, 0]).unwrap();
        let wp = apply_mask(&w, &m).unwrap();
        assert_eq!(wp.data(), &[0.0, -4.0, 3.0, 0.0]);
        // Idempotent.
        assert_eq!(apply_mask(&wp, &m).unwrap(), wp);
    }

    #[test]
    fn measured_sparsity_matches_mask_fraction() {
        let mut rng = Rng::new(23);
        // Uniform over [0.1, 1.1): no pre-existing zeros, distinct scores a.s.
        let w = rng.uniform_matrix(8, 8, 0.1, 1.1);
        let mask = build_mask(
            &score_magnitude(&w),
            SparsityLevel::new(0.5).unwrap(),
            Group::PerRow,
        );
        let wp = apply_mask(&w, &mask).unwrap();
        assert_eq!(measure_sparsity(&wp), mask.zero_fraction());
        assert_eq!(measure_sparsity(&wp), 0.5);
    }

    #[test]
    fn measure_sparsity_cases() {
        assert_eq!(measure_sparsity(&Matrix::zeros(3, 3)), 1.0);
        assert_eq!(measure_sparsity(&Matrix::identity(4)), 0.75);
    }

    #[test]
    fn invalid_level_rejected() {
        assert!(SparsityLevel::new(1.0).is_err());
        assert!(SparsityLevel::new(-0.1).is_err());
    }
}
