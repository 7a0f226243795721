//! Minimal dense numerics shared by every other module: row-major `f64`
//! matrices, the handful of reductions the pipeline needs, and a seeded
//! splitmix64 generator so every run is reproducible across platforms.
//!
//! Matrices are immutable by convention once handed out by a public
//! operation; every public operation checks that its output is finite.

use crate::error::{Error, Result};

/// Dense 2-D tensor, row-major, working precision `f64`.
///
/// Checkpoints store weights as `f32`; the in-memory carrier stays at 64 bits
/// so finite-difference gradient checks have enough headroom.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build from row-major data. Fails on length mismatch or non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        let m = Self { rows, cols, data };
        m.check_finite("new")?;
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn check_finite(&self, op: &str) -> Result<()> {
        if let Some(idx) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "{op}: non-finite entry at ({}, {})",
                idx / self.cols.max(1),
                idx % self.cols.max(1)
            )));
        }
        Ok(())
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} . {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let lhs = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(lhs) {
                    *d += a * b;
                }
            }
        }
        out.check_finite("matmul")?;
        Ok(out)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op} {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let out = Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        };
        out.check_finite(op)?;
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Result<Matrix> {
        let out = Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * c).collect(),
        };
        out.check_finite("scale")?;
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Per-column Euclidean norms: entry `j` is `sqrt(sum_i x[i][j]^2)`.
    pub fn col_l2_norms(&self) -> Result<Vec<f64>> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Shape("col_l2_norms on empty matrix".into()));
        }
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                let v = self.get(i, j);
                sums[j] += v * v;
            }
        }
        Ok(sums.into_iter().map(f64::sqrt).collect())
    }

    /// Sum of squared entries (squared Frobenius norm).
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Largest absolute elementwise difference; both shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape("max_abs_diff shape mismatch".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// New matrix made of the given columns, in order.
    pub fn select_cols(&self, indices: &[usize]) -> Result<Matrix> {
        if indices.iter().any(|&j| j >= self.cols) {
            return Err(Error::Shape("column index out of range".into()));
        }
        let mut out = Matrix::zeros(self.rows, indices.len());
        for i in 0..self.rows {
            for (k, &j) in indices.iter().enumerate() {
                out.data[i * indices.len() + k] = self.data[i * self.cols + j];
            }
        }
        Ok(out)
    }

    /// Leading sub-block `self[..rows][..cols]`.
    pub fn sub_block(&self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows > self.rows || cols > self.cols {
            return Err(Error::Shape(format!(
                "sub_block {}x{} out of {}x{}",
                rows, cols, self.rows, self.cols
            )));
        }
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            out.data[i * cols..(i + 1) * cols].copy_from_slice(&self.data[i * self.cols..i * self.cols + cols]);
        }
        Ok(out)
    }
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded splitmix64 generator. Identical seeds produce identical draw
/// sequences on every platform; independent streams are derived by mixing
/// a stream label into the seed.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derive an independent stream from the same master seed; distinct
    /// labels give decorrelated streams.
    pub fn derive(&self, label: &str) -> Rng {
        // FNV-1a over the label bytes, then one splitmix finalizer.
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for &b in label.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        Rng::new(splitmix_mix(
            self.state ^ h.wrapping_mul(GOLDEN_GAMMA).wrapping_add(1),
        ))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        splitmix_mix(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// Matrix with iid uniform entries in `[lo, hi)`.
    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| self.uniform(lo, hi)).collect();
        Matrix {
            rows,
            cols,
            data,
        }
    }

    /// Matrix with iid standard normal entries.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| self.normal()).collect();
        Matrix {
            rows,
            cols,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        rng.uniform_matrix(rows, cols, -1.0, 1.0)
    }

    // Independent triple-loop oracle for matmul.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_case() {
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let i = Matrix::identity(2);
        assert_eq!(i.matmul(&b).unwrap(), b);
        assert_eq!(b.matmul(&i).unwrap(), b);
    }

    #[test]
    fn matmul_hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(7);
        let a = random_matrix(&mut rng, 7, 5);
        let b = random_matrix(&mut rng, 5, 3);
        let got = a.matmul(&b).unwrap();
        let want = matmul_oracle(&a, &b);
        // Inner loops accumulate in the same left-to-right order, so the
        // result is entry-exact.
        assert_eq!(got, want);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn hadamard_cases() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let ones = Matrix::new(2, 2, vec![1.0; 4]).unwrap();
        let zeros = Matrix::zeros(2, 2);
        assert_eq!(a.hadamard(&ones).unwrap(), a);
        assert_eq!(a.hadamard(&zeros).unwrap(), zeros);
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(
            a.hadamard(&m).unwrap().data(),
            &[0.0, 2.0, 3.0, 0.0]
        );
    }

    #[test]
    fn hadamard_commutes() {
        let mut rng = Rng::new(3);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 5, 4);
        assert_eq!(a.hadamard(&b).unwrap(), b.hadamard(&a).unwrap());
    }

    #[test]
    fn col_norms_cases() {
        let m = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(m.col_l2_norms().unwrap(), vec![5.0]);
        assert_eq!(Matrix::identity(2).col_l2_norms().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn col_norms_matches_loop_oracle() {
        let mut rng = Rng::new(11);
        let m = random_matrix(&mut rng, 6, 4);
        let got = m.col_l2_norms().unwrap();
        for j in 0..4 {
            let mut s = 0.0;
            for i in 0..6 {
                s += m.get(i, j) * m.get(i, j);
            }
            let want = s.sqrt();
            assert!((got[j] - want).abs() <= 1e-12 * want.abs());
        }
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(Matrix::zeros(3, 3).frobenius_sq(), 0.0);
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(m.frobenius_sq(), 9.0);
        let mut rng = Rng::new(13);
        let r = random_matrix(&mut rng, 8, 8);
        let want: f64 = (0..8)
            .flat_map(|i| (0..8).map(move |j| (i, j)))
            .map(|(i, j)| r.get(i, j) * r.get(i, j))
            .sum();
        assert!((r.frobenius_sq() - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Data(_))
        ));
        let big = Matrix::new(1, 1, vec![f64::MAX]).unwrap();
        assert!(matches!(big.scale(2.0), Err(Error::Data(_))));
    }

    #[test]
    fn rng_reproducible_streams() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(42).derive("other-stream");
        assert_ne!(c.next_u64(), Rng::new(42).next_u64());
    }

    #[test]
    fn rng_uniform_in_range() {
        let mut rng = Rng::new(5);
        for _ in 0..1000 {
            let v = rng.uniform(-0.25, 0.25);
            assert!((-0.25..0.25).contains(&v));
        }
    }
}
