//! End-to-end orchestration: prune a frozen teacher, optionally quantize,
//! attach elastic adapters, fine-tune, then merge or emit base+adapter pairs.
//! Also owns checkpoint I/O, the synthetic task harness, evaluation, and the
//! cost report.
//!
//! The "mergeable" verdict is never declared; it is computed by actually
//! performing the mode's merge and checking that sparsity and numerics
//! survive.

pub mod checkpoint;
pub mod task;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{
    merge_qa, merge_sparse_peft, AdapterizedLayer, BaseWeight, ElasticAdapter, Mode, RankSpace,
};
use crate::error::{Error, Result};
use crate::quant::{
    calibrate_params, dequantize, quantize_gptq_lite_masked, quantize_rtn, GroupSize, RangeMode,
};
use crate::search::{accuracy, heuristic_config};
use crate::sparsity::{
    apply_mask, build_mask, measure_sparsity, score_magnitude, score_wanda, Group, SparsityLevel,
    SparsityMask,
};
use crate::tensor::{Matrix, Rng};
use crate::train::{finetune, loss, LossKind, MlpModel, TrainConfig, TrainHistory};

use checkpoint::{save_checkpoint, Container, NamedTensor};
use task::{make_task, SplitSizes, Task, TaskKind};

/// The five pipeline variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Sparse base, dense adapter at one fixed rank. Not mergeable.
    Lora,
    /// Sparse base, dense elastic adapter. Not mergeable.
    Nls,
    /// Quantized base, dense elastic adapter. Not mergeable.
    Sqft,
    /// Sparse base, masked elastic adapter; merges into one sparse tensor.
    #[serde(rename = "sqft_sparsepeft")]
    SqftSparsePeft,
    /// Quantized base, quantization-aware masked adapter; merges into one
    /// integer tensor.
    #[serde(rename = "sqft_qa_sparsepeft")]
    SqftQaSparsePeft,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::Nls => "nls",
            Method::Sqft => "sqft",
            Method::SqftSparsePeft => "sqft_sparsepeft",
            Method::SqftQaSparsePeft => "sqft_qa_sparsepeft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Method::Lora),
            "nls" => Ok(Method::Nls),
            "sqft" => Ok(Method::Sqft),
            "sqft_sparsepeft" => Ok(Method::SqftSparsePeft),
            "sqft_qa_sparsepeft" => Ok(Method::SqftQaSparsePeft),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }

    /// Does the base weight get quantized?
    pub fn quantized_base(self) -> bool {
        matches!(self, Method::Sqft | Method::SqftQaSparsePeft)
    }

    /// Does fine-tuning end in a merge (single output checkpoint)?
    pub fn merged_output(self) -> bool {
        matches!(self, Method::SqftSparsePeft | Method::SqftQaSparsePeft)
    }

    fn mode(self) -> Mode {
        match self {
            Method::Lora | Method::Nls | Method::Sqft => Mode::VanillaLora,
            Method::SqftSparsePeft => Mode::SparsePeft,
            Method::SqftQaSparsePeft => Mode::QaSparsePeft,
        }
    }

    /// The four methods compared in the cost report, in the paper's
    /// row order: 1=lora, 2=qa-merged's fp sibling... kept here simply as the
    /// storage-ordering chain largest to smallest.
    pub fn canonical_four() -> [Method; 4] {
        [
            Method::Lora,
            Method::SqftSparsePeft,
            Method::Sqft,
            Method::SqftQaSparsePeft,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMethod {
    Off,
    Rtn,
    GptqLite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Magnitude,
    Wanda,
}

/// Quantization stage settings. `group_size = 0` means one group per row.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuantSpec {
    #[serde(default = "default_quant_method")]
    pub method: QuantMethod,
    #[serde(default = "default_bits")]
    pub bits: u32,
    #[serde(default)]
    pub group_size: usize,
    #[serde(default)]
    pub range_mode: RangeMode,
}

fn default_quant_method() -> QuantMethod {
    QuantMethod::Off
}

fn default_bits() -> u32 {
    4
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            method: QuantMethod::Off,
            bits: 4,
            group_size: 0,
            range_mode: RangeMode::default(),
        }
    }
}

impl QuantSpec {
    pub fn group(&self) -> GroupSize {
        if self.group_size == 0 {
            GroupSize::WholeRow
        } else {
            GroupSize::Cols(self.group_size)
        }
    }
}

/// Full configuration of one pipeline run. Loadable from TOML; every field
/// except `method` and `seed` has a documented default.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub method: Method,
    pub seed: u64,
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    #[serde(default = "default_task_kind")]
    pub task: TaskKind,
    #[serde(default = "default_sparsity")]
    pub sparsity: f64,
    #[serde(default = "default_score")]
    pub score: ScoreKind,
    #[serde(default)]
    pub group: Group,
    #[serde(default)]
    pub quant: QuantSpec,
    #[serde(default = "default_ranks")]
    pub ranks: Vec<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub samples: SplitSizes,
    #[serde(default = "default_calib_samples")]
    pub calib_samples: usize,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
}

fn default_dims() -> Vec<usize> {
    vec![64, 64, 64, 64, 64, 8]
}

fn default_task_kind() -> TaskKind {
    TaskKind::Classification
}

fn default_sparsity() -> f64 {
    0.5
}

fn default_score() -> ScoreKind {
    ScoreKind::Wanda
}

fn default_ranks() -> Vec<usize> {
    vec![16, 12, 8]
}

fn default_alpha() -> f64 {
    64.0
}

fn default_train() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 32,
        learning_rate: 1e-2,
        optimizer: Default::default(),
        seed: 0,
        sample_ranks: true,
    }
}

fn default_calib_samples() -> usize {
    128
}

fn default_noise_sigma() -> f64 {
    0.01
}

impl PipelineSpec {
    /// Ready-to-run configuration for one method; quantization is switched
    /// on exactly for the quantized-base methods.
    pub fn default_for(method: Method, seed: u64) -> Self {
        let mut spec = Self {
            method,
            seed,
            dims: default_dims(),
            task: default_task_kind(),
            sparsity: default_sparsity(),
            score: default_score(),
            group: Group::default(),
            quant: QuantSpec::default(),
            ranks: default_ranks(),
            alpha: default_alpha(),
            train: default_train(),
            samples: SplitSizes::default(),
            calib_samples: default_calib_samples(),
            noise_sigma: default_noise_sigma(),
        };
        if method.quantized_base() {
            spec.quant.method = QuantMethod::GptqLite;
        }
        spec
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: PipelineSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "dims {:?} need at least two positive entries",
                self.dims
            )));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!(
                "sparsity {} out of [0, 1)",
                self.sparsity
            )));
        }
        RankSpace::new(self.ranks.clone())?;
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        self.train.validate()?;
        if self.calib_samples == 0 {
            return Err(Error::Config("calib_samples must be positive".into()));
        }
        let quant_on = self.quant.method != QuantMethod::Off;
        if self.method.quantized_base() && !quant_on {
            return Err(Error::Config(format!(
                "method {} requires quantization on",
                self.method.label()
            )));
        }
        if !self.method.quantized_base() && quant_on {
            return Err(Error::Config(format!(
                "method {} has a full-precision base; turn quantization off",
                self.method.label()
            )));
        }
        if matches!(
            self.method,
            Method::SqftSparsePeft | Method::SqftQaSparsePeft
        ) && self.sparsity == 0.0
        {
            return Err(Error::Config(
                "sparsity-preserving methods need sparsity > 0".into(),
            ));
        }
        if self.task == TaskKind::Classification && *self.dims.last().expect("nonempty") < 2 {
            return Err(Error::Config(
                "classification needs at least two output classes".into(),
            ));
        }
        Ok(())
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.task {
            TaskKind::Regression => LossKind::Mse,
            TaskKind::Classification => LossKind::CrossEntropy,
        }
    }

    /// Rank space actually used: fixed-rank methods collapse to the median of
    /// the configured space so they match the elastic heuristic's budget.
    fn rank_space(&self) -> Result<RankSpace> {
        let full = RankSpace::new(self.ranks.clone())?;
        match self.method {
            Method::Lora => RankSpace::new(vec![full.median()]),
            _ => Ok(full),
        }
    }
}

/// Evaluation of one model state on one dataset.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
    /// Exact-zero fraction of each layer's effective weight.
    pub layer_sparsity: Vec<f64>,
    pub total_params: usize,
    pub mergeable: bool,
}

/// Loss, accuracy (classification), per-layer sparsity, and the computed
/// mergeable verdict.
pub fn evaluate(model: &MlpModel, data: &crate::train::Dataset, kind: LossKind) -> Result<Metrics> {
    let loss_val = loss(model, &data.x, &data.targets, kind)?;
    let acc = match kind {
        LossKind::CrossEntropy => Some(accuracy(model, data)?),
        LossKind::Mse => None,
    };
    let mut layer_sparsity = Vec::new();
    let mut total_params = 0usize;
    let mut mergeable = true;
    for layer in model.layers() {
        layer_sparsity.push(measure_sparsity(&layer.effective_weight()?));
        total_params += layer.in_dim() * layer.out_dim();
        let ad = &layer.adapter;
        total_params += ad.a().rows() * ad.a().cols() + ad.b().rows() * ad.b().cols();
        mergeable &= layer_mergeable(layer)?;
    }
    Ok(Metrics {
        loss: loss_val,
        accuracy: acc,
        layer_sparsity,
        total_params,
        mergeable,
    })
}

/// Execute the layer's merge and verify nothing is lost: sparsity for masked
/// bases, exact representability for quantized bases.
fn layer_mergeable(layer: &AdapterizedLayer) -> Result<bool> {
    match layer.mode {
        Mode::SparsePeft => {
            let mask = layer.base.mask().expect("mode invariant");
            let lp = layer.adapter.sparse_delta(mask)?;
            Ok(merge_sparse_peft(layer.base.raw_weight(), &lp, mask).is_ok())
        }
        Mode::QaSparsePeft => {
            let mask = layer.base.mask().expect("mode invariant");
            let params = layer.base.quant_params().expect("mode invariant");
            let lp = layer.adapter.sparse_delta(mask)?;
            let merged = merge_qa(layer.base.raw_weight(), &lp, params)?;
            // Merge equals the training-time forward weight bit for bit.
            Ok(dequantize(&merged) == layer.effective_weight()?)
        }
        Mode::VanillaLora => {
            let delta = layer.adapter.active_delta()?;
            if let Some(mask) = layer.base.mask() {
                for i in 0..delta.rows() {
                    for j in 0..delta.cols() {
                        if !mask.is_kept(i, j) && delta.get(i, j) != 0.0 {
                            return Ok(false);
                        }
                    }
                }
            }
            if let Some(params) = layer.base.quant_params() {
                let merged = layer.base.effective().add(&delta)?;
                if dequantize(&quantize_rtn(&merged, params)?) != merged {
                    return Ok(false);
                }
            }
            Ok(true)
        }
    }
}

/// The base weights folded with the current adapter deltas regardless of
/// mergeability: the densification counter-example generator.
pub fn force_merge_weights(model: &MlpModel) -> Result<Vec<Matrix>> {
    model
        .layers()
        .iter()
        .map(|l| l.base.effective().add(&l.adapter.active_delta()?))
        .collect()
}

/// Output of one pipeline run.
#[derive(Debug)]
pub struct RunResult {
    pub method: Method,
    /// Held-out metrics of the pruned/quantized model before fine-tuning.
    pub pruned_metrics: Metrics,
    /// Held-out metrics after fine-tuning (elastic methods at the heuristic
    /// rank configuration).
    pub metrics: Metrics,
    pub history: TrainHistory,
    /// Checkpoint files written: (path, size in bytes). Merged methods write
    /// one file, pair methods a base file then an adapter file.
    pub files: Vec<(PathBuf, u64)>,
    pub train_seconds: f64,
    pub steps_per_sec: f64,
}

/// Build the pruned (and possibly quantized) student with fresh adapters.
/// Calibration activations are propagated sequentially through the already
/// compressed layers, matching how the model will actually run.
pub fn build_student(spec: &PipelineSpec, task: &Task) -> Result<MlpModel> {
    let rng = Rng::new(spec.seed);
    let m = spec.calib_samples.min(task.train.len());
    let calib_cols: Vec<usize> = (0..m).collect();
    let mut h = task.train.x.select_cols(&calib_cols)?;

    let level = SparsityLevel::new(spec.sparsity)?;
    let mut layers = Vec::new();
    let n_layers = task.teacher.weights().len();
    for (idx, w) in task.teacher.weights().iter().enumerate() {
        // Samples live in columns here; the scoring/quant calibration API
        // takes samples as rows.
        let calib_rows = h.transpose();
        let scores = match spec.score {
            ScoreKind::Magnitude => score_magnitude(w),
            ScoreKind::Wanda => score_wanda(w, &calib_rows)?,
        };
        let mask = if spec.sparsity > 0.0 {
            build_mask(&scores, level, spec.group)
        } else {
            SparsityMask::all_ones(w.rows(), w.cols())
        };
        let wp = apply_mask(w, &mask)?;

        let base = if spec.method.quantized_base() {
            let quant = match spec.quant.method {
                QuantMethod::Rtn => {
                    let params = calibrate_params(
                        &wp,
                        spec.quant.bits,
                        spec.quant.group(),
                        spec.quant.range_mode,
                    )?;
                    quantize_rtn(&wp, &params)?
                }
                QuantMethod::GptqLite => {
                    quantize_gptq_lite_masked(
                        &wp,
                        &calib_rows,
                        spec.quant.bits,
                        spec.quant.group(),
                        Some(&mask),
                    )?
                    .0
                }
                QuantMethod::Off => unreachable!("validated"),
            };
            BaseWeight::Quantized {
                weight: wp,
                mask,
                quant,
            }
        } else {
            BaseWeight::Sparse { weight: wp, mask }
        };

        let space = spec
            .rank_space()?
            .clipped(base.in_dim().min(base.out_dim()))?;
        let mut adapter_rng = rng.derive(&format!("adapter-{idx}"));
        let adapter = ElasticAdapter::new(
            base.in_dim(),
            base.out_dim(),
            space,
            spec.alpha,
            &mut adapter_rng,
        )?;
        let layer = AdapterizedLayer::new(base, adapter, spec.method.mode())?;

        // Propagate calibration through the compressed layer.
        h = layer.effective_weight()?.matmul(&h)?;
        if idx + 1 < n_layers {
            for i in 0..h.rows() {
                for j in 0..h.cols() {
                    if h.get(i, j) < 0.0 {
                        h.set(i, j, 0.0);
                    }
                }
            }
        }
        layers.push(layer);
    }
    MlpModel::new(layers)
}

/// Run the full pipeline (sparsify, optionally quantize, fine-tune, merge or
/// pair) and write checkpoints into `out_dir`.
pub fn run_pipeline(spec: &PipelineSpec, out_dir: &Path) -> Result<RunResult> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let kind = spec.loss_kind();
    let task = make_task(spec.task, &spec.dims, spec.samples, spec.noise_sigma, spec.seed)?;

    let mut model = build_student(spec, &task)?;
    let pruned_metrics = evaluate(&model, &task.test, kind)?;

    let started = Instant::now();
    let history = finetune(&mut model, &task.train, &spec.train, kind)?;
    let train_seconds = started.elapsed().as_secs_f64();
    let steps = spec.train.epochs * task.train.len().div_ceil(spec.train.batch_size);
    let steps_per_sec = if train_seconds > 0.0 {
        steps as f64 / train_seconds
    } else {
        0.0
    };

    // Elastic methods are delivered at the heuristic rank configuration.
    let spaces: Vec<RankSpace> = model
        .layers()
        .iter()
        .map(|l| l.adapter.rank_space().clone())
        .collect();
    model.set_active_ranks(&heuristic_config(&spaces))?;

    let metrics = evaluate(&model, &task.test, kind)?;

    let mut files = Vec::new();
    let label = spec.method.label();
    if spec.method.merged_output() {
        let path = out_dir.join(format!("{label}-merged.sqck"));
        save_checkpoint(&path, &merged_container(spec, &model)?)?;
        files.push(file_entry(path)?);
    } else {
        let base_path = out_dir.join(format!("{label}-base.sqck"));
        save_checkpoint(&base_path, &base_container(spec, &model)?)?;
        files.push(file_entry(base_path)?);
        let adapter_path = out_dir.join(format!("{label}-adapter.sqck"));
        save_checkpoint(&adapter_path, &adapter_container(spec, &model)?)?;
        files.push(file_entry(adapter_path)?);
    }

    Ok(RunResult {
        method: spec.method,
        pruned_metrics,
        metrics,
        history,
        files,
        train_seconds,
        steps_per_sec,
    })
}

fn file_entry(path: PathBuf) -> Result<(PathBuf, u64)> {
    let len = std::fs::metadata(&path)?.len();
    Ok((path, len))
}

fn common_metadata(spec: &PipelineSpec, model: &MlpModel, c: &mut Container) {
    c.set_meta("mode", spec.method.label());
    c.set_meta("sparsity", spec.sparsity);
    if spec.method.quantized_base() {
        c.set_meta("bits", spec.quant.bits);
    }
    c.set_meta("alpha", spec.alpha);
    c.set_meta(
        "rank_space",
        spec.ranks
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    c.set_meta(
        "active_rank",
        model
            .active_ranks()
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    c.set_meta("seed", spec.seed);
}

/// Single-tensor-per-layer merged artifact. Sparse merges store one f32
/// weight per layer (the pattern lives in its exact zeros); quantized merges
/// store integer codes plus scales and zeros, nothing else.
fn merged_container(spec: &PipelineSpec, model: &MlpModel) -> Result<Container> {
    let mut c = Container::new();
    for (idx, layer) in model.layers().iter().enumerate() {
        match layer.mode {
            Mode::SparsePeft => {
                let mask = layer.base.mask().expect("mode invariant");
                let lp = layer.adapter.sparse_delta(mask)?;
                let merged = merge_sparse_peft(layer.base.raw_weight(), &lp, mask)?;
                c.push(NamedTensor::from_matrix_f32(
                    &format!("layer{idx}.weight"),
                    &merged,
                )?)?;
            }
            Mode::QaSparsePeft => {
                let mask = layer.base.mask().expect("mode invariant");
                let params = layer.base.quant_params().expect("mode invariant");
                let lp = layer.adapter.sparse_delta(mask)?;
                let merged = merge_qa(layer.base.raw_weight(), &lp, params)?;
                push_quantized(&mut c, idx, &merged)?;
            }
            Mode::VanillaLora => {
                return Err(Error::Invariant(format!(
                    "method {} does not produce a merged checkpoint",
                    spec.method.label()
                )))
            }
        }
    }
    common_metadata(spec, model, &mut c);
    Ok(c)
}

fn push_quantized(
    c: &mut Container,
    idx: usize,
    q: &crate::quant::QuantizedTensor,
) -> Result<()> {
    c.push(NamedTensor::from_u8(
        &format!("layer{idx}.codes"),
        vec![q.rows() as u64, q.cols() as u64],
        q.codes(),
    )?)?;
    let p = q.params();
    c.push(NamedTensor::from_f32_slice(
        &format!("layer{idx}.scales"),
        vec![p.scales().len() as u64],
        p.scales(),
    )?)?;
    c.push(NamedTensor::from_i32(
        &format!("layer{idx}.zeros"),
        vec![p.zeros().len() as u64],
        p.zeros(),
    )?)?;
    Ok(())
}

/// Frozen base of a pair artifact. The sparsity pattern travels implicitly:
/// exact zeros in the f32 weight, or zero-point codes in the quantized case.
fn base_container(spec: &PipelineSpec, model: &MlpModel) -> Result<Container> {
    let mut c = Container::new();
    for (idx, layer) in model.layers().iter().enumerate() {
        match &layer.base {
            BaseWeight::Dense(w) | BaseWeight::Sparse { weight: w, .. } => {
                c.push(NamedTensor::from_matrix_f32(
                    &format!("layer{idx}.weight"),
                    w,
                )?)?;
            }
            BaseWeight::Quantized { quant, .. } => push_quantized(&mut c, idx, quant)?,
        }
    }
    common_metadata(spec, model, &mut c);
    Ok(c)
}

fn adapter_container(spec: &PipelineSpec, model: &MlpModel) -> Result<Container> {
    let mut c = Container::new();
    for (idx, layer) in model.layers().iter().enumerate() {
        c.push(NamedTensor::from_matrix_f32(
            &format!("layer{idx}.adapter.a"),
            layer.adapter.a(),
        )?)?;
        c.push(NamedTensor::from_matrix_f32(
            &format!("layer{idx}.adapter.b"),
            layer.adapter.b(),
        )?)?;
    }
    common_metadata(spec, model, &mut c);
    Ok(c)
}

/// One row of the cost comparison.
#[derive(Debug, Clone)]
pub struct CostRow {
    pub method: Method,
    pub model_bytes: u64,
    pub adapter_bytes: u64,
    pub total_bytes: u64,
    pub mergeable: bool,
    pub precision: String,
    pub train_seconds: f64,
    pub steps_per_sec: f64,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    /// Measured total storage satisfies
    /// lora-pair > sparsepeft-merged > sqft-pair > qa-merged.
    pub storage_ordering_ok: bool,
    pub note: String,
}

/// Summarize measured artifact sizes and check the qualitative storage
/// ordering. A violated ordering flags the report, it does not fail it
/// (sizes depend on model dimensions and are logged for inspection).
pub fn cost_report(results: &[RunResult]) -> Result<CostReport> {
    let mut rows = Vec::new();
    for r in results {
        let model_bytes = r.files.first().map_or(0, |(_, n)| *n);
        let adapter_bytes = r.files.get(1).map_or(0, |(_, n)| *n);
        let precision = if r.method.quantized_base() && r.method.merged_output() {
            "INT4".to_string()
        } else if r.method.quantized_base() {
            "INT4+FP32".to_string()
        } else {
            "FP32".to_string()
        };
        rows.push(CostRow {
            method: r.method,
            model_bytes,
            adapter_bytes,
            total_bytes: model_bytes + adapter_bytes,
            mergeable: r.metrics.mergeable,
            precision,
            train_seconds: r.train_seconds,
            steps_per_sec: r.steps_per_sec,
        });
    }
    let total = |m: Method| -> Option<u64> {
        rows.iter().find(|r| r.method == m).map(|r| r.total_bytes)
    };
    let chain = [
        Method::Lora,
        Method::SqftSparsePeft,
        Method::Sqft,
        Method::SqftQaSparsePeft,
    ];
    let sizes: Vec<Option<u64>> = chain.iter().map(|&m| total(m)).collect();
    let (ordering_ok, note) = if sizes.iter().any(Option::is_none) {
        (
            false,
            "ordering not checked: needs all four canonical methods".to_string(),
        )
    } else {
        let v: Vec<u64> = sizes.into_iter().map(Option::unwrap).collect();
        let ok = v.windows(2).all(|w| w[0] > w[1]);
        let note = format!(
            "storage bytes: lora-pair {} > sparsepeft-merged {} > sqft-pair {} > qa-merged {}: {}",
            v[0],
            v[1],
            v[2],
            v[3],
            if ok { "holds" } else { "VIOLATED" }
        );
        (ok, note)
    };
    Ok(CostReport {
        rows,
        storage_ordering_ok: ordering_ok,
        note,
    })
}

/// Run the four canonical methods on the same task and seed and report costs.
pub fn compare(seed: u64, out_dir: &Path) -> Result<(Vec<RunResult>, CostReport)> {
    let mut results = Vec::new();
    for method in Method::canonical_four() {
        let spec = PipelineSpec::default_for(method, seed);
        let dir = out_dir.join(method.label());
        results.push(run_pipeline(&spec, &dir)?);
    }
    let report = cost_report(&results)?;
    Ok((results, report))
}
