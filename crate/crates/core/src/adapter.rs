//! Elastic low-rank adapters, masked-adapter fine-tuning, the
//! quantization-aware forward, and both merge operations.
//!
//! An elastic adapter holds one `(B, A)` pair at the maximum rank of its
//! discrete rank space; activating a smaller rank slices the leading block
//! and rescales by `alpha / rank`. The masked variant multiplies the adapter
//! product by the base weight's sparsity mask, which is what makes the later
//! merge sparsity-preserving.
//!
//! Forward passes use the column-sample convention `Y = W X` (each column of
//! `X` is one sample). Merged and unmerged forwards are computed through the
//! same expression `(W^p + L^p) X`, so their equality is exact, not a
//! tolerance.

use crate::error::{Error, Result};
use crate::quant::{dequantize, quantize_rtn, QuantParams, QuantizedTensor};
use crate::sparsity::SparsityMask;
use crate::tensor::{Matrix, Rng};

/// Discrete, strictly decreasing space of adapter ranks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankSpace {
    values: Vec<usize>,
}

impl RankSpace {
    pub fn new(values: Vec<usize>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("rank space must be nonempty".into()));
        }
        if values.iter().any(|&v| v == 0) {
            return Err(Error::Config("ranks must be positive".into()));
        }
        if values.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!(
                "rank space {values:?} must be strictly decreasing"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn max_rank(&self) -> usize {
        self.values[0]
    }

    pub fn contains(&self, c: usize) -> bool {
        self.values.contains(&c)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Median rank; for an even-length space, the lower of the two middle
    /// values (the space is stored in decreasing order).
    pub fn median(&self) -> usize {
        self.values[self.values.len() / 2]
    }

    /// Clip every rank to `limit`, deduplicating while keeping the space
    /// strictly decreasing. Lets one configured space serve layers whose
    /// dimensions cannot hold the full ranks.
    pub fn clipped(&self, limit: usize) -> Result<Self> {
        let limit = limit.max(1);
        let mut clipped: Vec<usize> = self.values.iter().map(|&v| v.min(limit)).collect();
        clipped.dedup();
        Self::new(clipped)
    }
}

/// How the sub-adapter delta is rescaled when a smaller rank is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScalingMode {
    /// `alpha / active_rank`; keeps delta magnitude comparable across ranks.
    #[default]
    ByActiveRank,
    /// `alpha / max_rank`; ablation alternative.
    ByMaxRank,
}

/// Low-rank pair `(B, A)` with an elastic rank.
///
/// `A` is `max_rank x in_dim`, `B` is `out_dim x max_rank`. `B` starts at
/// zero so the adapter delta is zero before any training.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticAdapter {
    a: Matrix,
    b: Matrix,
    rank_space: RankSpace,
    active_rank: usize,
    alpha: f64,
    scaling: ScalingMode,
}

impl ElasticAdapter {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        rank_space: RankSpace,
        alpha: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if rank_space.max_rank() > in_dim.min(out_dim) {
            return Err(Error::Config(format!(
                "max rank {} exceeds min(in_dim, out_dim) = {}",
                rank_space.max_rank(),
                in_dim.min(out_dim)
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let a = rng.uniform_matrix(rank_space.max_rank(), in_dim, -bound, bound);
        let b = Matrix::zeros(out_dim, rank_space.max_rank());
        let active_rank = rank_space.max_rank();
        Ok(Self {
            a,
            b,
            rank_space,
            active_rank,
            alpha,
            scaling: ScalingMode::default(),
        })
    }

    pub fn with_scaling(mut self, scaling: ScalingMode) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank_space(&self) -> &RankSpace {
        &self.rank_space
    }

    pub fn active_rank(&self) -> usize {
        self.active_rank
    }

    pub fn scaling(&self) -> ScalingMode {
        self.scaling
    }

    /// Replace `A` and `B` (training updates, checkpoint loading).
    pub fn set_weights(&mut self, a: Matrix, b: Matrix) -> Result<()> {
        if a.shape() != self.a.shape() || b.shape() != self.b.shape() {
            return Err(Error::Shape("adapter weight shapes must match".into()));
        }
        self.a = a;
        self.b = b;
        Ok(())
    }

    pub fn set_active_rank(&mut self, c: usize) -> Result<()> {
        if !self.rank_space.contains(c) {
            return Err(Error::Config(format!(
                "rank {c} not in rank space {:?}",
                self.rank_space.values()
            )));
        }
        self.active_rank = c;
        Ok(())
    }

    /// Scale factor applied to the active sub-adapter product.
    pub fn delta_scale(&self) -> f64 {
        match self.scaling {
            ScalingMode::ByActiveRank => self.alpha / self.active_rank as f64,
            ScalingMode::ByMaxRank => self.alpha / self.rank_space.max_rank() as f64,
        }
    }

    /// `(alpha / c) * B[:, :c] * A[:c, :]` for the active rank `c`.
    pub fn active_delta(&self) -> Result<Matrix> {
        let c = self.active_rank;
        let b_c = self.b.sub_block(self.out_dim(), c)?;
        let a_c = self.a.sub_block(c, self.in_dim())?;
        b_c.matmul(&a_c)?.scale(self.delta_scale())
    }

    /// Masked adapter delta `L^p = active_delta ⊙ M`.
    pub fn sparse_delta(&self, mask: &SparsityMask) -> Result<Matrix> {
        if mask.shape() != (self.out_dim(), self.in_dim()) {
            return Err(Error::Shape(format!(
                "mask {:?} vs adapter {}x{}",
                mask.shape(),
                self.out_dim(),
                self.in_dim()
            )));
        }
        self.active_delta()?.hadamard(&mask.to_matrix())
    }
}

/// Frozen base weight of an adapterized layer.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseWeight {
    Dense(Matrix),
    Sparse {
        weight: Matrix,
        mask: SparsityMask,
    },
    /// Sparse weight plus its quantization; `quant` holds the shared
    /// scales/zeros the adapter reuses in quantization-aware mode.
    Quantized {
        weight: Matrix,
        mask: SparsityMask,
        quant: QuantizedTensor,
    },
}

impl BaseWeight {
    pub fn out_dim(&self) -> usize {
        match self {
            BaseWeight::Dense(w) => w.rows(),
            BaseWeight::Sparse { weight, .. } | BaseWeight::Quantized { weight, .. } => {
                weight.rows()
            }
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            BaseWeight::Dense(w) => w.cols(),
            BaseWeight::Sparse { weight, .. } | BaseWeight::Quantized { weight, .. } => {
                weight.cols()
            }
        }
    }

    pub fn mask(&self) -> Option<&SparsityMask> {
        match self {
            BaseWeight::Dense(_) => None,
            BaseWeight::Sparse { mask, .. } | BaseWeight::Quantized { mask, .. } => Some(mask),
        }
    }

    pub fn quant_params(&self) -> Option<&QuantParams> {
        match self {
            BaseWeight::Quantized { quant, .. } => Some(quant.params()),
            _ => None,
        }
    }

    /// The weight actually multiplied against activations when no adapter is
    /// involved: dense and sparse bases as stored, quantized bases
    /// dequantized.
    pub fn effective(&self) -> Matrix {
        match self {
            BaseWeight::Dense(w) | BaseWeight::Sparse { weight: w, .. } => w.clone(),
            BaseWeight::Quantized { quant, .. } => dequantize(quant),
        }
    }

    /// The full-precision sparse weight, pre-quantization.
    pub fn raw_weight(&self) -> &Matrix {
        match self {
            BaseWeight::Dense(w)
            | BaseWeight::Sparse { weight: w, .. }
            | BaseWeight::Quantized { weight: w, .. } => w,
        }
    }
}

/// Fine-tuning mode of an adapterized layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// `Y = base X + delta X` with a dense adapter.
    VanillaLora,
    /// Masked adapter: `Y = (W^p + L^p) X`.
    SparsePeft,
    /// Masked adapter pushed through the base's quantizer each forward:
    /// `Y = deq(quant(W^p + L^p)) X`. Training forward equals post-merge
    /// forward by construction.
    QaSparsePeft,
}

/// A frozen base weight paired with one elastic adapter.
#[derive(Debug, Clone)]
pub struct AdapterizedLayer {
    pub base: BaseWeight,
    pub adapter: ElasticAdapter,
    pub mode: Mode,
}

impl AdapterizedLayer {
    pub fn new(base: BaseWeight, adapter: ElasticAdapter, mode: Mode) -> Result<Self> {
        if adapter.out_dim() != base.out_dim() || adapter.in_dim() != base.in_dim() {
            return Err(Error::Shape(format!(
                "adapter {}x{} vs base {}x{}",
                adapter.out_dim(),
                adapter.in_dim(),
                base.out_dim(),
                base.in_dim()
            )));
        }
        match mode {
            Mode::VanillaLora => {}
            Mode::SparsePeft => {
                if base.mask().is_none() {
                    return Err(Error::Config(
                        "sparse mode requires a base with a sparsity mask".into(),
                    ));
                }
            }
            Mode::QaSparsePeft => {
                if !matches!(base, BaseWeight::Quantized { .. }) {
                    return Err(Error::Config(
                        "quantization-aware mode requires a quantized base".into(),
                    ));
                }
            }
        }
        Ok(Self {
            base,
            adapter,
            mode,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.base.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.base.out_dim()
    }

    /// The weight this layer multiplies against activations, adapter folded
    /// in according to the mode.
    pub fn effective_weight(&self) -> Result<Matrix> {
        match self.mode {
            Mode::VanillaLora => self.base.effective().add(&self.adapter.active_delta()?),
            Mode::SparsePeft => {
                let mask = self.base.mask().expect("checked at construction");
                self.base.raw_weight().add(&self.adapter.sparse_delta(mask)?)
            }
            Mode::QaSparsePeft => {
                let merged = self.merged_unquantized()?;
                let params = self.base.quant_params().expect("checked at construction");
                Ok(dequantize(&quantize_rtn(&merged, params)?))
            }
        }
    }

    /// `W^p + L^p` before requantization (quantization-aware mode only).
    pub fn merged_unquantized(&self) -> Result<Matrix> {
        let mask = self
            .base
            .mask()
            .ok_or_else(|| Error::Config("no mask on base".into()))?;
        self.base.raw_weight().add(&self.adapter.sparse_delta(mask)?)
    }

    /// `Y = W_eff X`, columns of `x` are samples.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.in_dim() {
            return Err(Error::Shape(format!(
                "input has {} rows, layer expects {}",
                x.rows(),
                self.in_dim()
            )));
        }
        self.effective_weight()?.matmul(x)
    }

    /// Straight-through surrogate of the quantization-aware effective weight:
    /// the merged weight clamped elementwise to the representable range, with
    /// the round dropped. Its exact gradient is the straight-through
    /// estimator (identity inside the clamp, zero outside).
    pub fn qa_surrogate_weight(&self) -> Result<Matrix> {
        let merged = self.merged_unquantized()?;
        let params = self
            .base
            .quant_params()
            .ok_or_else(|| Error::Config("no quant params on base".into()))?;
        let mut out = merged.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let (lo, hi) = params.representable_range(i, j);
                out.set(i, j, out.get(i, j).clamp(lo, hi));
            }
        }
        Ok(out)
    }

    /// 1.0 where the merged weight falls inside the representable range
    /// (straight-through gradient passes), 0.0 where it saturates.
    pub fn qa_in_range_mask(&self) -> Result<Matrix> {
        let merged = self.merged_unquantized()?;
        let params = self
            .base
            .quant_params()
            .ok_or_else(|| Error::Config("no quant params on base".into()))?;
        let mut out = Matrix::zeros(merged.rows(), merged.cols());
        for i in 0..merged.rows() {
            for j in 0..merged.cols() {
                let (lo, hi) = params.representable_range(i, j);
                let v = merged.get(i, j);
                if v >= lo && v <= hi {
                    out.set(i, j, 1.0);
                }
            }
        }
        Ok(out)
    }
}

/// Fold a masked adapter delta into the sparse base: `W^p + L^p`.
///
/// Refuses to merge if `l_p` is nonzero anywhere the mask prunes — a merge
/// there would densify the base.
pub fn merge_sparse_peft(w_p: &Matrix, l_p: &Matrix, mask: &SparsityMask) -> Result<Matrix> {
    if w_p.shape() != l_p.shape() || w_p.shape() != mask.shape() {
        return Err(Error::Shape("merge operands must share one shape".into()));
    }
    for i in 0..l_p.rows() {
        for j in 0..l_p.cols() {
            if !mask.is_kept(i, j) && l_p.get(i, j) != 0.0 {
                return Err(Error::Invariant(format!(
                    "adapter delta is nonzero at pruned position ({i}, {j}); merging would lose sparsity"
                )));
            }
        }
    }
    w_p.add(l_p)
}

/// Quantize the merged weight with the base's shared scales and zeros:
/// `clamp(round((W^p + L^p) / s) + z, 0, Q_p)`.
///
/// The result is a single integer tensor; dequantizing it reproduces the
/// quantization-aware training forward bit-exactly.
pub fn merge_qa(w_p: &Matrix, l_p: &Matrix, params: &QuantParams) -> Result<QuantizedTensor> {
    if w_p.shape() != l_p.shape() {
        return Err(Error::Shape("merge operands must share one shape".into()));
    }
    quantize_rtn(&w_p.add(l_p)?, params)
}
