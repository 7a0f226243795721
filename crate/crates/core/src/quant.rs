//! Group-wise affine integer quantization: parameter calibration,
//! round-to-nearest quantization, error-compensated greedy quantization, and
//! dequantization.
//!
//! The code range defaults to `Q_p = 2^(n-1) - 1` (paper mode); `full` mode
//! uses `2^n - 1`. Rounding is half-away-from-zero throughout so results are
//! identical across platforms. Real zero always maps to the zero point, so a
//! sparse weight stays sparse through quantize/dequantize.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsity::SparsityMask;
use crate::tensor::Matrix;

/// Code-range convention for an `n`-bit quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    /// `Q_p = 2^(n-1) - 1`.
    #[default]
    Paper,
    /// `Q_p = 2^n - 1`.
    Full,
}

/// Columns covered by one (scale, zero) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupSize {
    /// One (scale, zero) per output row.
    WholeRow,
    /// Fixed-width column groups; the width must divide the column count.
    Cols(usize),
}

/// Affine quantization parameters: per-(row, group) scales and zero points.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    bits: u32,
    group: GroupSize,
    range_mode: RangeMode,
    q_max: i64,
    rows: usize,
    cols: usize,
    group_width: usize,
    scales: Vec<f64>,
    zeros: Vec<i32>,
}

impl QuantParams {
    /// Reassemble params from stored fields (checkpoint loading, tests).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        bits: u32,
        group: GroupSize,
        range_mode: RangeMode,
        rows: usize,
        cols: usize,
        scales: Vec<f64>,
        zeros: Vec<i32>,
    ) -> Result<Self> {
        let q_max = q_max_for(bits, range_mode)?;
        if cols == 0 || rows == 0 {
            return Err(Error::Shape("cannot quantize an empty tensor".into()));
        }
        let group_width = match group {
            GroupSize::WholeRow => cols,
            GroupSize::Cols(g) => {
                if g == 0 || cols % g != 0 {
                    return Err(Error::Shape(format!(
                        "group size {g} does not divide {cols} columns"
                    )));
                }
                g
            }
        };
        let expected = rows * (cols / group_width);
        if scales.len() != expected || zeros.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} (scale, zero) pairs, got {} / {}",
                scales.len(),
                zeros.len()
            )));
        }
        if scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Data("every scale must be positive and finite".into()));
        }
        if zeros.iter().any(|&z| z < 0 || i64::from(z) > q_max) {
            return Err(Error::Data(format!("every zero must lie in [0, {q_max}]")));
        }
        Ok(Self {
            bits,
            group,
            range_mode,
            q_max,
            rows,
            cols,
            group_width,
            scales,
            zeros,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn range_mode(&self) -> RangeMode {
        self.range_mode
    }

    pub fn group(&self) -> GroupSize {
        self.group
    }

    /// Largest representable code.
    pub fn q_max(&self) -> i64 {
        self.q_max
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn groups_per_row(&self) -> usize {
        if self.cols == 0 {
            0
        } else {
            self.cols / self.group_width
        }
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zeros(&self) -> &[i32] {
        &self.zeros
    }

    #[inline]
    fn group_index(&self, row: usize, col: usize) -> usize {
        row * self.groups_per_row() + col / self.group_width
    }

    #[inline]
    pub fn scale_at(&self, row: usize, col: usize) -> f64 {
        self.scales[self.group_index(row, col)]
    }

    #[inline]
    pub fn zero_at(&self, row: usize, col: usize) -> i32 {
        self.zeros[self.group_index(row, col)]
    }

    /// Smallest and largest real values representable at `(row, col)`.
    pub fn representable_range(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.scale_at(row, col);
        let z = f64::from(self.zero_at(row, col));
        (s * (0.0 - z), s * (self.q_max as f64 - z))
    }
}

fn q_max_for(bits: u32, range_mode: RangeMode) -> Result<i64> {
    if !(2..=8).contains(&bits) {
        return Err(Error::Config(format!("bit-width {bits} not in [2, 8]")));
    }
    Ok(match range_mode {
        RangeMode::Paper => (1i64 << (bits - 1)) - 1,
        RangeMode::Full => (1i64 << bits) - 1,
    })
}

/// Half-away-from-zero rounding (`f64::round` semantics, named for clarity).
#[inline]
fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Integer codes plus the params that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    codes: Vec<u8>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn from_parts(rows: usize, cols: usize, codes: Vec<u8>, params: QuantParams) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(Error::Shape("code count mismatch".into()));
        }
        if (rows, cols) != (params.rows, params.cols) {
            return Err(Error::Shape("params shape mismatch".into()));
        }
        if codes.iter().any(|&c| i64::from(c) > params.q_max) {
            return Err(Error::Data(format!("code above Q_p = {}", params.q_max)));
        }
        Ok(Self {
            rows,
            cols,
            codes,
            params,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    #[inline]
    pub fn code_at(&self, i: usize, j: usize) -> u8 {
        self.codes[i * self.cols + j]
    }
}

/// Determine per-group scales and zero points from the data range.
///
/// Per group: `s = (max - min) / Q_p`, `z = clamp(round(-min / s), 0, Q_p)`.
/// A constant group degenerates to `s = 1` with `z` chosen so a zero constant
/// dequantizes exactly; other constants are representable only when they fall
/// on the integer grid.
pub fn calibrate_params(
    w: &Matrix,
    bits: u32,
    group: GroupSize,
    range_mode: RangeMode,
) -> Result<QuantParams> {
    let q_max = q_max_for(bits, range_mode)?;
    let (rows, cols) = w.shape();
    let group_width = match group {
        GroupSize::WholeRow => cols,
        GroupSize::Cols(g) => {
            if g == 0 || cols % g != 0 {
                return Err(Error::Shape(format!(
                    "group size {g} does not divide {cols} columns"
                )));
            }
            g
        }
    };
    let groups_per_row = if cols == 0 { 0 } else { cols / group_width };
    let mut scales = Vec::with_capacity(rows * groups_per_row);
    let mut zeros = Vec::with_capacity(rows * groups_per_row);
    for i in 0..rows {
        for g in 0..groups_per_row {
            let lo_col = g * group_width;
            let vals = &w.row(i)[lo_col..lo_col + group_width];
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (s, z) = if max == min {
                (1.0, clamp_code(round_half_away(-min), q_max))
            } else {
                let s = (max - min) / q_max as f64;
                (s, clamp_code(round_half_away(-min / s), q_max))
            };
            scales.push(s);
            zeros.push(z);
        }
    }
    QuantParams::from_parts(bits, group, range_mode, rows, cols, scales, zeros)
}

#[inline]
fn clamp_code(v: f64, q_max: i64) -> i32 {
    (v.max(0.0).min(q_max as f64)) as i32
}

/// Round-to-nearest quantization: `code = clamp(round(w / s) + z, 0, Q_p)`.
pub fn quantize_rtn(w: &Matrix, params: &QuantParams) -> Result<QuantizedTensor> {
    if w.shape() != (params.rows, params.cols) {
        return Err(Error::Shape(format!(
            "weight {:?} vs params {}x{}",
            w.shape(),
            params.rows,
            params.cols
        )));
    }
    let mut codes = Vec::with_capacity(w.rows() * w.cols());
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            codes.push(rtn_code(w.get(i, j), params, i, j));
        }
    }
    QuantizedTensor::from_parts(w.rows(), w.cols(), codes, params.clone())
}

#[inline]
fn rtn_code(v: f64, params: &QuantParams, i: usize, j: usize) -> u8 {
    let s = params.scale_at(i, j);
    let z = f64::from(params.zero_at(i, j));
    let code = round_half_away(v / s) + z;
    clamp_code(code, params.q_max) as u8
}

/// Inverse map: `s * (code - z)` per element.
pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let p = q.params();
    let mut out = Matrix::zeros(q.rows(), q.cols());
    for i in 0..q.rows() {
        for j in 0..q.cols() {
            let s = p.scale_at(i, j);
            let z = f64::from(p.zero_at(i, j));
            out.set(i, j, s * (f64::from(q.code_at(i, j)) - z));
        }
    }
    out
}

/// Calibration-weighted reconstruction error
/// `|| (w - w_hat) X^T ||_F^2`, where rows of `calib_x` are samples.
pub fn recon_error(w: &Matrix, w_hat: &Matrix, calib_x: &Matrix) -> Result<f64> {
    if w.shape() != w_hat.shape() {
        return Err(Error::Shape("recon_error weight shapes differ".into()));
    }
    if calib_x.cols() != w.cols() {
        return Err(Error::Shape("recon_error calibration feature mismatch".into()));
    }
    let diff = w.sub(w_hat)?;
    Ok(diff.matmul(&calib_x.transpose())?.frobenius_sq())
}

/// Greedy column-by-column quantization with error feedback.
///
/// Columns are quantized left to right by RTN; the per-element residual is
/// propagated into not-yet-quantized columns through the damped inverse of
/// `H = X^T X + lambda I` with `lambda = 0.01 * mean(diag(X^T X))`. Falls
/// back to the plain RTN result when that happens to reconstruct better, so
/// the returned error never exceeds RTN's.
pub fn quantize_gptq_lite(
    w: &Matrix,
    calib_x: &Matrix,
    bits: u32,
    group: GroupSize,
) -> Result<(QuantizedTensor, f64)> {
    quantize_gptq_lite_masked(w, calib_x, bits, group, None)
}

/// [`quantize_gptq_lite`] variant that freezes masked-out positions at zero:
/// their codes stay at the zero point and error feedback never lands on them,
/// so the sparsity pattern survives quantization.
pub fn quantize_gptq_lite_masked(
    w: &Matrix,
    calib_x: &Matrix,
    bits: u32,
    group: GroupSize,
    mask: Option<&SparsityMask>,
) -> Result<(QuantizedTensor, f64)> {
    if calib_x.cols() != w.cols() {
        return Err(Error::Shape(format!(
            "calibration has {} features, weight has {} columns",
            calib_x.cols(),
            w.cols()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != w.shape() {
            return Err(Error::Shape("mask shape mismatch".into()));
        }
    }
    let params = calibrate_params(w, bits, group, RangeMode::Paper)?;
    let rtn = quantize_rtn(w, &params)?;
    let rtn_err = recon_error(w, &dequantize(&rtn), calib_x)?;

    let cols = w.cols();
    if cols <= 1 {
        return Ok((rtn, rtn_err));
    }

    // H = X^T X + lambda I, lambda = 0.01 * mean(diag).
    let xt = calib_x.transpose();
    let mut h = xt.matmul(calib_x)?;
    let mean_diag = (0..cols).map(|j| h.get(j, j)).sum::<f64>() / cols as f64;
    let lambda = if mean_diag > 0.0 {
        0.01 * mean_diag
    } else {
        1e-6
    };
    for j in 0..cols {
        h.set(j, j, h.get(j, j) + lambda);
    }
    let h_inv = invert_spd(&h)?;

    let kept = |i: usize, j: usize| mask.map_or(true, |m| m.is_kept(i, j));
    let mut work = w.clone();
    let mut codes = vec![0u8; w.rows() * cols];
    for j in 0..cols {
        let d = h_inv.get(j, j);
        for i in 0..w.rows() {
            if !kept(i, j) {
                // Frozen at real zero; the zero point encodes it exactly.
                codes[i * cols + j] = clamp_code(f64::from(params.zero_at(i, j)), params.q_max()) as u8;
                continue;
            }
            let v = work.get(i, j);
            let code = rtn_code(v, &params, i, j);
            codes[i * cols + j] = code;
            let s = params.scale_at(i, j);
            let z = f64::from(params.zero_at(i, j));
            let err = (v - s * (f64::from(code) - z)) / d;
            for k in j + 1..cols {
                if kept(i, k) {
                    let updated = work.get(i, k) - err * h_inv.get(j, k);
                    work.set(i, k, updated);
                }
            }
        }
    }
    let gptq = QuantizedTensor::from_parts(w.rows(), cols, codes, params)?;
    let gptq_err = recon_error(w, &dequantize(&gptq), calib_x)?;
    if gptq_err <= rtn_err {
        Ok((gptq, gptq_err))
    } else {
        Ok((rtn, rtn_err))
    }
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
fn invert_spd(h: &Matrix) -> Result<Matrix> {
    let n = h.rows();
    if h.cols() != n {
        return Err(Error::Shape("invert_spd needs a square matrix".into()));
    }
    // Lower-triangular factor L with H = L L^T.
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = h.get(i, j);
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Data("matrix not positive definite".into()));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // Solve L L^T X = I column by column.
    let mut inv = Matrix::zeros(n, n);
    let mut y = vec![0.0f64; n];
    for col in 0..n {
        for i in 0..n {
            let mut sum = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                sum -= l[i * n + k] * y[k];
            }
            y[i] = sum / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum -= l[k * n + i] * inv.get(k, col);
            }
            inv.set(i, col, sum / l[i * n + i]);
        }
    }
    Ok(inv)
}
