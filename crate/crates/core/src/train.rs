//! Reverse-mode gradients and a fine-tuning loop for adapterized
//! multilayer perceptrons. Base weights stay frozen; only the adapter pairs
//! `(A, B)` receive gradients.
//!
//! Gradients are exact for the vanilla and masked-adapter modes. In
//! quantization-aware mode the round/clamp is differentiated with the
//! straight-through estimator: identity inside the clamp range, zero outside.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterizedLayer, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Parameter update rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Sample the active rank uniformly from each layer's rank space at every
    /// step (supernet-style weight sharing). Off = plain fixed-rank training.
    #[serde(default)]
    pub sample_ranks: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Column-sample dataset: `x` is `in_dim x n`; `targets` is `out_dim x n` for
/// regression or `1 x n` of class indices for classification.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Matrix,
    pub targets: Matrix,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Matrix, Matrix)> {
        Ok((self.x.select_cols(indices)?, self.targets.select_cols(indices)?))
    }
}

/// Adapterized layers alternating with ReLU; no activation after the last.
#[derive(Debug, Clone)]
pub struct MlpModel {
    layers: Vec<AdapterizedLayer>,
}

impl MlpModel {
    pub fn new(layers: Vec<AdapterizedLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer output dim {} does not chain into input dim {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        let mode = layers[0].mode;
        if layers.iter().any(|l| l.mode != mode) {
            return Err(Error::Config("all layers must share one mode".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[AdapterizedLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AdapterizedLayer] {
        &mut self.layers
    }

    pub fn mode(&self) -> Mode {
        self.layers[0].mode
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    /// Active rank per layer.
    pub fn active_ranks(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.adapter.active_rank()).collect()
    }

    pub fn set_active_ranks(&mut self, ranks: &[usize]) -> Result<()> {
        if ranks.len() != self.layers.len() {
            return Err(Error::Config("one rank per layer required".into()));
        }
        for (layer, &c) in self.layers.iter_mut().zip(ranks) {
            layer.adapter.set_active_rank(c)?;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_impl(x, false).map(|(out, _)| out)
    }

    /// Forward pass caching every layer input; `surrogate` swaps the
    /// quantization-aware weight for its straight-through clamp surrogate.
    fn forward_impl(&self, x: &Matrix, surrogate: bool) -> Result<(Matrix, Vec<Matrix>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            let w = forward_weight(layer, surrogate)?;
            h = w.matmul(&h)?;
            if idx + 1 < self.layers.len() {
                h = relu(&h);
            }
        }
        Ok((h, inputs))
    }
}

fn forward_weight(layer: &AdapterizedLayer, surrogate: bool) -> Result<Matrix> {
    if surrogate && layer.mode == Mode::QaSparsePeft {
        layer.qa_surrogate_weight()
    } else {
        layer.effective_weight()
    }
}

fn relu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            if out.get(i, j) < 0.0 {
                out.set(i, j, 0.0);
            }
        }
    }
    out
}

/// Mean-reduced loss over the batch.
pub fn loss(model: &MlpModel, batch_x: &Matrix, batch_y: &Matrix, kind: LossKind) -> Result<f64> {
    let pred = model.forward(batch_x)?;
    loss_of_pred(&pred, batch_y, kind)
}

fn loss_of_pred(pred: &Matrix, y: &Matrix, kind: LossKind) -> Result<f64> {
    let batch = pred.cols();
    if batch == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    match kind {
        LossKind::Mse => {
            if pred.shape() != y.shape() {
                return Err(Error::Shape("prediction/target shape mismatch".into()));
            }
            Ok(pred.sub(y)?.frobenius_sq() / batch as f64)
        }
        LossKind::CrossEntropy => {
            if y.rows() != 1 || y.cols() != batch {
                return Err(Error::Shape("labels must be 1 x batch".into()));
            }
            let mut total = 0.0;
            for col in 0..batch {
                let label = y.get(0, col) as usize;
                if label >= pred.rows() {
                    return Err(Error::Shape(format!("label {label} out of range")));
                }
                let max = (0..pred.rows())
                    .map(|i| pred.get(i, col))
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..pred.rows())
                    .map(|i| (pred.get(i, col) - max).exp())
                    .sum::<f64>()
                    .ln()
                    + max;
                total += lse - pred.get(label, col);
            }
            Ok(total / batch as f64)
        }
    }
}

/// Per-layer adapter gradients, full `A`/`B` shape (zeros outside the active
/// slice).
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub a: Matrix,
    pub b: Matrix,
}

/// Forward + reverse pass; returns the batch loss and gradients for every
/// adapter pair.
pub fn backward(
    model: &MlpModel,
    batch_x: &Matrix,
    batch_y: &Matrix,
    kind: LossKind,
) -> Result<(f64, Vec<LayerGrads>)> {
    backward_impl(model, batch_x, batch_y, kind, false)
}

fn backward_impl(
    model: &MlpModel,
    batch_x: &Matrix,
    batch_y: &Matrix,
    kind: LossKind,
    surrogate: bool,
) -> Result<(f64, Vec<LayerGrads>)> {
    let (pred, inputs) = model.forward_impl(batch_x, surrogate)?;
    let loss_val = loss_of_pred(&pred, batch_y, kind)?;
    let batch = pred.cols() as f64;

    // dL/dZ for the last layer's output.
    let mut d_out = match kind {
        LossKind::Mse => pred.sub(batch_y)?.scale(2.0 / batch)?,
        LossKind::CrossEntropy => {
            let mut g = Matrix::zeros(pred.rows(), pred.cols());
            for col in 0..pred.cols() {
                let label = batch_y.get(0, col) as usize;
                let max = (0..pred.rows())
                    .map(|i| pred.get(i, col))
                    .fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = (0..pred.rows()).map(|i| (pred.get(i, col) - max).exp()).sum();
                for i in 0..pred.rows() {
                    let p = (pred.get(i, col) - max).exp() / denom;
                    let onehot = if i == label { 1.0 } else { 0.0 };
                    g.set(i, col, (p - onehot) / batch);
                }
            }
            g
        }
    };

    let mut grads = vec![None; model.layers.len()];
    for idx in (0..model.layers.len()).rev() {
        let layer = &model.layers[idx];
        let x_in = &inputs[idx];

        // Gradient wrt the effective weight.
        let d_w = d_out.matmul(&x_in.transpose())?;

        // Route through the mode-specific structure onto (A, B).
        let mut d_delta = d_w.clone();
        if layer.mode == Mode::QaSparsePeft {
            d_delta = d_delta.hadamard(&layer.qa_in_range_mask()?)?;
        }
        if matches!(layer.mode, Mode::SparsePeft | Mode::QaSparsePeft) {
            let mask = layer.base.mask().expect("masked modes carry a mask");
            d_delta = d_delta.hadamard(&mask.to_matrix())?;
        }
        let c = layer.adapter.active_rank();
        let k = layer.adapter.delta_scale();
        let a_c = layer.adapter.a().sub_block(c, layer.in_dim())?;
        let b_c = layer.adapter.b().sub_block(layer.out_dim(), c)?;
        let d_b_c = d_delta.matmul(&a_c.transpose())?.scale(k)?;
        let d_a_c = b_c.transpose().matmul(&d_delta)?.scale(k)?;

        let max_rank = layer.adapter.rank_space().max_rank();
        let mut d_a = Matrix::zeros(max_rank, layer.in_dim());
        let mut d_b = Matrix::zeros(layer.out_dim(), max_rank);
        for r in 0..c {
            for j in 0..layer.in_dim() {
                d_a.set(r, j, d_a_c.get(r, j));
            }
            for i in 0..layer.out_dim() {
                d_b.set(i, r, d_b_c.get(i, r));
            }
        }
        grads[idx] = Some(LayerGrads { a: d_a, b: d_b });

        // Propagate to the layer input (through the ReLU below, if any).
        if idx > 0 {
            let w = forward_weight(layer, surrogate)?;
            let mut d_in = w.transpose().matmul(&d_out)?;
            // x_in is the post-ReLU activation of the previous layer; its
            // derivative is 1 exactly where the activation is positive.
            for i in 0..d_in.rows() {
                for j in 0..d_in.cols() {
                    if x_in.get(i, j) <= 0.0 {
                        d_in.set(i, j, 0.0);
                    }
                }
            }
            d_out = d_in;
        }
    }
    Ok((
        loss_val,
        grads.into_iter().map(|g| g.expect("all layers visited")).collect(),
    ))
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
}

struct AdamState {
    m: Matrix,
    v: Matrix,
}

impl AdamState {
    fn like(m: &Matrix) -> Self {
        Self {
            m: Matrix::zeros(m.rows(), m.cols()),
            v: Matrix::zeros(m.rows(), m.cols()),
        }
    }
}

/// Fine-tune the adapters; base weights are never touched. Deterministic
/// given `(seed, config, data)`.
pub fn finetune(model: &mut MlpModel, data: &Dataset, cfg: &TrainConfig, kind: LossKind) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut history = TrainHistory::default();
    let n_layers = model.layers.len();

    let mut adam_a: Vec<AdamState> = model
        .layers
        .iter()
        .map(|l| AdamState::like(l.adapter.a()))
        .collect();
    let mut adam_b: Vec<AdamState> = model
        .layers
        .iter()
        .map(|l| AdamState::like(l.adapter.b()))
        .collect();
    let mut step_count = 0u64;

    let saved_ranks = model.active_ranks();
    let mut indices: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut indices);
        let mut epoch_total = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            if cfg.sample_ranks {
                for layer in model.layers.iter_mut() {
                    let space = layer.adapter.rank_space().values().to_vec();
                    let pick = space[rng.index(space.len())];
                    layer.adapter.set_active_rank(pick)?;
                }
            }
            let (bx, by) = data.batch(chunk)?;
            let (batch_loss, grads) = backward(model, &bx, &by, kind)?;
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}; history so far: {:?}",
                    history.epoch_loss
                )));
            }
            step_count += 1;
            for l in 0..n_layers {
                let adapter = &mut model.layers[l].adapter;
                let new_a = apply_update(
                    adapter.a(),
                    &grads[l].a,
                    &mut adam_a[l],
                    cfg,
                    step_count,
                )?;
                let new_b = apply_update(
                    adapter.b(),
                    &grads[l].b,
                    &mut adam_b[l],
                    cfg,
                    step_count,
                )?;
                adapter.set_weights(new_a, new_b)?;
            }
            epoch_total += batch_loss;
            batches += 1;
        }
        history.epoch_loss.push(epoch_total / batches as f64);
    }
    model.set_active_ranks(&saved_ranks)?;
    Ok(history)
}

fn apply_update(
    param: &Matrix,
    grad: &Matrix,
    state: &mut AdamState,
    cfg: &TrainConfig,
    step: u64,
) -> Result<Matrix> {
    let lr = cfg.learning_rate;
    match cfg.optimizer {
        OptimizerKind::Sgd => param.sub(&grad.scale(lr)?),
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let mut out = param.clone();
            let bias1 = 1.0 - beta1.powi(step as i32);
            let bias2 = 1.0 - beta2.powi(step as i32);
            for i in 0..param.rows() {
                for j in 0..param.cols() {
                    let g = grad.get(i, j);
                    let m = beta1 * state.m.get(i, j) + (1.0 - beta1) * g;
                    let v = beta2 * state.v.get(i, j) + (1.0 - beta2) * g * g;
                    state.m.set(i, j, m);
                    state.v.set(i, j, v);
                    let update = lr * (m / bias1) / ((v / bias2).sqrt() + eps);
                    out.set(i, j, param.get(i, j) - update);
                }
            }
            Ok(out)
        }
    }
}

/// Compare [`backward`] against central finite differences parameter by
/// parameter; returns the maximum relative error.
///
/// In quantization-aware mode the check differences the straight-through
/// surrogate forward (the true quantized forward is piecewise constant, so
/// its finite differences are zero inside a cell); parameters whose
/// perturbation crosses a clamp boundary are skipped.
pub fn finite_diff_check(
    model: &mut MlpModel,
    batch_x: &Matrix,
    batch_y: &Matrix,
    kind: LossKind,
    h: f64,
) -> Result<f64> {
    let surrogate = model.mode() == Mode::QaSparsePeft;
    let (_, grads) = backward_impl(model, batch_x, batch_y, kind, surrogate)?;
    let mut max_rel = 0.0f64;

    for l in 0..model.layers.len() {
        for which in [ParamId::A, ParamId::B] {
            let (rows, cols) = match which {
                ParamId::A => model.layers[l].adapter.a().shape(),
                ParamId::B => model.layers[l].adapter.b().shape(),
            };
            for i in 0..rows {
                for j in 0..cols {
                    let analytic = match which {
                        ParamId::A => grads[l].a.get(i, j),
                        ParamId::B => grads[l].b.get(i, j),
                    };
                    let plus = perturbed_loss(model, l, which, i, j, h, batch_x, batch_y, kind, surrogate)?;
                    let minus =
                        perturbed_loss(model, l, which, i, j, -h, batch_x, batch_y, kind, surrogate)?;
                    let (Some(loss_p), Some(loss_m)) = (plus, minus) else {
                        // Clamp-boundary crossing in quantization-aware mode.
                        continue;
                    };
                    let fd = (loss_p - loss_m) / (2.0 * h);
                    if analytic.abs() < 1e-9 && fd.abs() < 1e-9 {
                        continue;
                    }
                    let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
                    max_rel = max_rel.max(rel);
                }
            }
        }
    }
    Ok(max_rel)
}

#[derive(Clone, Copy)]
enum ParamId {
    A,
    B,
}

#[allow(clippy::too_many_arguments)]
fn perturbed_loss(
    model: &mut MlpModel,
    layer: usize,
    which: ParamId,
    i: usize,
    j: usize,
    h: f64,
    batch_x: &Matrix,
    batch_y: &Matrix,
    kind: LossKind,
    surrogate: bool,
) -> Result<Option<f64>> {
    let (orig_a, orig_b) = {
        let ad = &model.layers[layer].adapter;
        (ad.a().clone(), ad.b().clone())
    };
    let baseline_range = if surrogate {
        Some(model.layers[layer].qa_in_range_mask()?)
    } else {
        None
    };
    let mut a = orig_a.clone();
    let mut b = orig_b.clone();
    match which {
        ParamId::A => a.set(i, j, a.get(i, j) + h),
        ParamId::B => b.set(i, j, b.get(i, j) + h),
    }
    model.layers[layer].adapter.set_weights(a, b)?;
    let result = (|| -> Result<Option<f64>> {
        if let Some(base_mask) = &baseline_range {
            let now = model.layers[layer].qa_in_range_mask()?;
            if &now != base_mask {
                return Ok(None);
            }
        }
        let (pred, _) = model.forward_impl(batch_x, surrogate)?;
        Ok(Some(loss_of_pred(&pred, batch_y, kind)?))
    })();
    model.layers[layer].adapter.set_weights(orig_a, orig_b)?;
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{BaseWeight, ElasticAdapter, RankSpace};
    use crate::quant::{calibrate_params, quantize_rtn, GroupSize, RangeMode};
    use crate::sparsity::{apply_mask, build_mask, score_magnitude, Group, SparsityLevel, SparsityMask};

    fn build_model(dims: &[usize], ranks: &[usize], mode: Mode, s: f64, seed: u64) -> MlpModel {
        let mut rng = Rng::new(seed);
        let mut layers = Vec::new();
        for pair in dims.windows(2) {
            let (in_dim, out_dim) = (pair[0], pair[1]);
            let w = rng.uniform_matrix(out_dim, in_dim, -0.5, 0.5);
            let mask = if s > 0.0 {
                build_mask(
                    &score_magnitude(&w),
                    SparsityLevel::new(s).unwrap(),
                    Group::PerRow,
                )
            } else {
                SparsityMask::all_ones(out_dim, in_dim)
            };
            let wp = apply_mask(&w, &mask).unwrap();
            let space = RankSpace::new(ranks.to_vec())
                .unwrap()
                .clipped(in_dim.min(out_dim))
                .unwrap();
            let mut adapter = ElasticAdapter::new(in_dim, out_dim, space, 16.0, &mut rng).unwrap();
            // Give B nonzero content so gradients flow into A too.
            let b = rng.uniform_matrix(out_dim, adapter.rank_space().max_rank(), -0.2, 0.2);
            let a = adapter.a().clone();
            adapter.set_weights(a, b).unwrap();
            let base = match mode {
                Mode::VanillaLora => BaseWeight::Dense(wp),
                Mode::SparsePeft => BaseWeight::Sparse { weight: wp, mask },
                Mode::QaSparsePeft => {
                    let params =
                        calibrate_params(&wp, 4, GroupSize::WholeRow, RangeMode::Paper).unwrap();
                    let quant = quantize_rtn(&wp, &params).unwrap();
                    BaseWeight::Quantized {
                        weight: wp,
                        mask,
                        quant,
                    }
                }
            };
            layers.push(AdapterizedLayer::new(base, adapter, mode).unwrap());
        }
        MlpModel::new(layers).unwrap()
    }

    fn batch_for(model: &MlpModel, kind: LossKind, n: usize, seed: u64) -> (Matrix, Matrix) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_matrix(model.in_dim(), n);
        let y = match kind {
            LossKind::Mse => rng.normal_matrix(model.out_dim(), n),
            LossKind::CrossEntropy => {
                let labels: Vec<f64> = (0..n).map(|_| rng.index(model.out_dim()) as f64).collect();
                Matrix::new(1, n, labels).unwrap()
            }
        };
        (x, y)
    }

    #[test]
    fn mse_perfect_prediction_is_zero() {
        let model = build_model(&[6, 4], &[2], Mode::VanillaLora, 0.0, 1);
        let (x, _) = batch_for(&model, LossKind::Mse, 5, 2);
        let y = model.forward(&x).unwrap();
        assert_eq!(loss(&model, &x, &y, LossKind::Mse).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        // A model with zero effective weight emits uniform (all-zero) logits.
        let mut rng = Rng::new(3);
        let adapter = ElasticAdapter::new(4, 8, RankSpace::new(vec![2]).unwrap(), 16.0, &mut rng).unwrap();
        let layer = AdapterizedLayer::new(
            BaseWeight::Dense(Matrix::zeros(8, 4)),
            adapter,
            Mode::VanillaLora,
        )
        .unwrap();
        let model = MlpModel::new(vec![layer]).unwrap();
        let (x, y) = batch_for(&model, LossKind::CrossEntropy, 6, 4);
        let got = loss(&model, &x, &y, LossKind::CrossEntropy).unwrap();
        assert!((got - (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mse_matches_loop_oracle() {
        let model = build_model(&[5, 3], &[2], Mode::VanillaLora, 0.0, 5);
        let (x, y) = batch_for(&model, LossKind::Mse, 7, 6);
        let got = loss(&model, &x, &y, LossKind::Mse).unwrap();
        let pred = model.forward(&x).unwrap();
        let mut want = 0.0;
        for i in 0..3 {
            for c in 0..7 {
                let d = pred.get(i, c) - y.get(i, c);
                want += d * d;
            }
        }
        want /= 7.0;
        assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn single_linear_layer_gradient_hand_check() {
        // One linear layer, fresh adapter (B = 0), MSE:
        // dL/dB_c = (2/batch) * k * (pred - y) X^T A_c^T.
        let mut rng = Rng::new(7);
        let w = rng.uniform_matrix(3, 4, -0.5, 0.5);
        let adapter =
            ElasticAdapter::new(4, 3, RankSpace::new(vec![2]).unwrap(), 16.0, &mut rng).unwrap();
        let layer =
            AdapterizedLayer::new(BaseWeight::Dense(w.clone()), adapter, Mode::VanillaLora).unwrap();
        let model = MlpModel::new(vec![layer]).unwrap();
        let (x, y) = batch_for(&model, LossKind::Mse, 5, 8);
        let (_, grads) = backward(&model, &x, &y, LossKind::Mse).unwrap();

        let pred = w.matmul(&x).unwrap(); // B = 0 so delta = 0
        let k = 16.0 / 2.0;
        let residual = pred.sub(&y).unwrap().scale(2.0 / 5.0).unwrap();
        let a_c = model.layers()[0].adapter.a().clone();
        let want_b = residual
            .matmul(&x.transpose())
            .unwrap()
            .matmul(&a_c.transpose())
            .unwrap()
            .scale(k)
            .unwrap();
        assert!(grads[0].b.max_abs_diff(&want_b).unwrap() < 1e-12);
        // B = 0 means no gradient reaches A.
        assert_eq!(grads[0].a, Matrix::zeros(2, 4));
    }

    #[test]
    fn all_zero_mask_kills_adapter_gradients() {
        let mut rng = Rng::new(9);
        let w = Matrix::zeros(4, 4);
        let mask = SparsityMask::from_bits(4, 4, vec![0; 16]).unwrap();
        let mut adapter =
            ElasticAdapter::new(4, 4, RankSpace::new(vec![2]).unwrap(), 16.0, &mut rng).unwrap();
        let b = rng.uniform_matrix(4, 2, -0.3, 0.3);
        let a = adapter.a().clone();
        adapter.set_weights(a, b).unwrap();
        let layer = AdapterizedLayer::new(
            BaseWeight::Sparse { weight: w, mask },
            adapter,
            Mode::SparsePeft,
        )
        .unwrap();
        let model = MlpModel::new(vec![layer]).unwrap();
        let (x, y) = batch_for(&model, LossKind::Mse, 4, 10);
        let (_, grads) = backward(&model, &x, &y, LossKind::Mse).unwrap();
        assert_eq!(grads[0].a, Matrix::zeros(2, 4));
        assert_eq!(grads[0].b, Matrix::zeros(4, 2));
    }

    #[test]
    fn finite_diff_linear_mse() {
        let mut model = build_model(&[6, 4], &[3, 2], Mode::VanillaLora, 0.0, 11);
        let (x, y) = batch_for(&model, LossKind::Mse, 8, 12);
        let err = finite_diff_check(&mut model, &x, &y, LossKind::Mse, 1e-5).unwrap();
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn finite_diff_two_layer_modes() {
        for (mode, tol) in [
            (Mode::VanillaLora, 1e-4),
            (Mode::SparsePeft, 1e-4),
        ] {
            let mut model = build_model(&[8, 6, 4], &[3, 2], mode, 0.5, 13);
            let (x, y) = batch_for(&model, LossKind::Mse, 8, 14);
            let err = finite_diff_check(&mut model, &x, &y, LossKind::Mse, 1e-5).unwrap();
            assert!(err <= tol, "{mode:?} rel err {err}");
        }
    }

    #[test]
    fn finite_diff_qa_inside_cells() {
        let mut model = build_model(&[8, 6, 4], &[3, 2], Mode::QaSparsePeft, 0.5, 15);
        let (x, y) = batch_for(&model, LossKind::Mse, 8, 16);
        let err = finite_diff_check(&mut model, &x, &y, LossKind::Mse, 1e-5).unwrap();
        assert!(err <= 1e-4, "qa rel err {err}");
    }

    #[test]
    fn finite_diff_cross_entropy() {
        let mut model = build_model(&[6, 5, 4], &[2], Mode::VanillaLora, 0.0, 17);
        let (x, y) = batch_for(&model, LossKind::CrossEntropy, 8, 18);
        let err = finite_diff_check(&mut model, &x, &y, LossKind::CrossEntropy, 1e-5).unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    fn small_dataset(model: &MlpModel, kind: LossKind, n: usize, seed: u64) -> Dataset {
        let (x, targets) = batch_for(model, kind, n, seed);
        Dataset { x, targets }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut model = build_model(&[6, 4], &[2], Mode::SparsePeft, 0.5, 19);
        let before: Vec<Matrix> = model
            .layers()
            .iter()
            .flat_map(|l| [l.adapter.a().clone(), l.adapter.b().clone()])
            .collect();
        let data = small_dataset(&model, LossKind::Mse, 32, 20);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.0,
            optimizer: OptimizerKind::default(),
            seed: 1,
            sample_ranks: false,
        };
        finetune(&mut model, &data, &cfg, LossKind::Mse).unwrap();
        let after: Vec<Matrix> = model
            .layers()
            .iter()
            .flat_map(|l| [l.adapter.a().clone(), l.adapter.b().clone()])
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn finetune_reduces_loss_and_freezes_base() {
        let mut model = build_model(&[8, 8, 4], &[4, 2], Mode::SparsePeft, 0.5, 21);
        let data = small_dataset(&model, LossKind::Mse, 128, 22);
        let base_before: Vec<Matrix> = model.layers().iter().map(|l| l.base.raw_weight().clone()).collect();
        let loss_before = loss(&model, &data.x, &data.targets, LossKind::Mse).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::default(),
            seed: 2,
            sample_ranks: true,
        };
        let history = finetune(&mut model, &data, &cfg, LossKind::Mse).unwrap();
        assert_eq!(history.epoch_loss.len(), 20);
        let loss_after = loss(&model, &data.x, &data.targets, LossKind::Mse).unwrap();
        assert!(loss_after < loss_before);
        // Frozen base: bit-identical before and after.
        for (before, layer) in base_before.iter().zip(model.layers()) {
            assert_eq!(before, layer.base.raw_weight());
        }
    }

    #[test]
    fn finetune_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::default(),
            seed: 3,
            sample_ranks: true,
        };
        let mut h = Vec::new();
        for _ in 0..2 {
            let mut model = build_model(&[8, 6, 4], &[3, 2], Mode::SparsePeft, 0.5, 23);
            let data = small_dataset(&model, LossKind::Mse, 64, 24);
            let hist = finetune(&mut model, &data, &cfg, LossKind::Mse).unwrap();
            h.push(hist.epoch_loss);
        }
        assert_eq!(h[0], h[1]);
    }

    #[test]
    fn mask_respected_after_training() {
        let mut model = build_model(&[8, 6, 4], &[3, 2], Mode::SparsePeft, 0.5, 25);
        let data = small_dataset(&model, LossKind::Mse, 64, 26);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::default(),
            seed: 4,
            sample_ranks: false,
        };
        finetune(&mut model, &data, &cfg, LossKind::Mse).unwrap();
        for layer in model.layers() {
            let mask = layer.base.mask().unwrap();
            let lp = layer.adapter.sparse_delta(mask).unwrap();
            for i in 0..lp.rows() {
                for j in 0..lp.cols() {
                    if !mask.is_kept(i, j) {
                        assert_eq!(lp.get(i, j), 0.0);
                    }
                }
            }
        }
    }
}
