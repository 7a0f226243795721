//! Command-line front end: each subcommand drives one stage (or the whole
//! lattice) of the sparsify / quantize / fine-tune / merge pipeline from a
//! TOML config. All stages are deterministic given (config, seed), so later
//! stages rebuild earlier ones instead of deserializing intermediate state.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sqft_core::pipeline::checkpoint::{save_checkpoint, Container, NamedTensor};
use sqft_core::pipeline::task::make_task;
use sqft_core::pipeline::{
    build_student, compare, cost_report, evaluate, force_merge_weights, run_pipeline, Method,
    PipelineSpec, RunResult,
};
use sqft_core::search::{heuristic_config, hill_climb, SearchParams};
use sqft_core::sparsity::measure_sparsity;
use sqft_core::train::finetune;
use sqft_core::Result;

#[derive(Parser)]
#[command(name = "sqft-forge", about = "Sparse + quantized fine-tuning toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    JsonLines,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML). Omitted: built-in defaults for --method.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Method when no config file is given.
    #[arg(long)]
    method: Option<String>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

impl Common {
    fn spec(&self, fallback_method: Method) -> Result<PipelineSpec> {
        let mut spec = match &self.config {
            Some(path) => PipelineSpec::from_toml_str(&std::fs::read_to_string(path)?)?,
            None => {
                let method = match &self.method {
                    Some(m) => Method::parse(m)?,
                    None => fallback_method,
                };
                PipelineSpec::default_for(method, self.seed.unwrap_or(0))
            }
        };
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Prune the teacher and report per-layer sparsity.
    Prune(Common),
    /// Prune then quantize the base; report sparsity survival.
    Quantize(Common),
    /// Prune, optionally quantize, and fine-tune; write a base+adapter pair.
    Finetune(Common),
    /// Fine-tune, then hill-climb the rank configuration on validation data.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        turns: usize,
        #[arg(long, default_value_t = 8)]
        neighbors: usize,
        #[arg(long, default_value_t = 1)]
        step: usize,
        #[arg(long, default_value_t = 256)]
        eval_samples: usize,
    },
    /// Fine-tune and merge. Non-mergeable methods refuse unless --force,
    /// which folds the dense delta in and reports the sparsity damage.
    Merge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
    },
    /// Fine-tune and print held-out metrics plus the mergeable verdict.
    Eval(Common),
    /// Run the full pipeline for one method.
    Run(Common),
    /// Run the four canonical methods and print the cost table.
    Compare(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn emit(format: Format, record: serde_json::Value, text: String) {
    match format {
        Format::Text => println!("{text}"),
        Format::JsonLines => println!("{record}"),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Prune(common) => {
            let spec = common.spec(Method::SqftSparsePeft)?;
            let task = make_task(spec.task, &spec.dims, spec.samples, spec.noise_sigma, spec.seed)?;
            let model = build_student(&spec, &task)?;
            for (idx, layer) in model.layers().iter().enumerate() {
                let s = measure_sparsity(layer.base.raw_weight());
                emit(
                    common.format,
                    json!({"layer": idx, "sparsity": s, "target": spec.sparsity}),
                    format!("layer {idx}: sparsity {s:.4} (target {})", spec.sparsity),
                );
            }
            Ok(())
        }
        Command::Quantize(common) => {
            let spec = common.spec(Method::SqftQaSparsePeft)?;
            let task = make_task(spec.task, &spec.dims, spec.samples, spec.noise_sigma, spec.seed)?;
            let model = build_student(&spec, &task)?;
            for (idx, layer) in model.layers().iter().enumerate() {
                let pruned = measure_sparsity(layer.base.raw_weight());
                let quantized = measure_sparsity(&layer.base.effective());
                emit(
                    common.format,
                    json!({
                        "layer": idx,
                        "bits": spec.quant.bits,
                        "sparsity_pruned": pruned,
                        "sparsity_quantized": quantized,
                    }),
                    format!(
                        "layer {idx}: {} bits, sparsity {pruned:.4} -> {quantized:.4}",
                        spec.quant.bits
                    ),
                );
            }
            Ok(())
        }
        Command::Finetune(common) => {
            let spec = common.spec(Method::Nls)?;
            let result = run_pipeline(&spec, &common.out)?;
            report_run(common.format, &spec, &result);
            Ok(())
        }
        Command::Search {
            common,
            turns,
            neighbors,
            step,
            eval_samples,
        } => {
            let spec = common.spec(Method::Nls)?;
            let task = make_task(spec.task, &spec.dims, spec.samples, spec.noise_sigma, spec.seed)?;
            let mut model = build_student(&spec, &task)?;
            finetune(&mut model, &task.train, &spec.train, spec.loss_kind())?;
            let params = SearchParams {
                turns,
                neighbors,
                step,
                eval_samples,
                seed: spec.seed,
            };
            let (best, trace) = hill_climb(&mut model, &task.validation, spec.loss_kind(), &params)?;
            let spaces: Vec<_> = model
                .layers()
                .iter()
                .map(|l| l.adapter.rank_space().clone())
                .collect();
            let heuristic = heuristic_config(&spaces);
            emit(
                common.format,
                json!({
                    "heuristic": heuristic,
                    "best": best,
                    "evaluations": trace.evaluations.len(),
                    "best_score": trace.anchors.last().map(|a| a.score),
                }),
                format!(
                    "heuristic {heuristic:?} -> best {best:?} ({} evaluations, score {:.4})",
                    trace.evaluations.len(),
                    trace.anchors.last().map(|a| a.score).unwrap_or(f64::NAN)
                ),
            );
            Ok(())
        }
        Command::Merge { common, force } => {
            let spec = common.spec(Method::SqftSparsePeft)?;
            if spec.method.merged_output() {
                let result = run_pipeline(&spec, &common.out)?;
                report_run(common.format, &spec, &result);
                return Ok(());
            }
            if !force {
                return Err(sqft_core::Error::Invariant(format!(
                    "method {} is not mergeable; pass --force to fold the dense delta anyway",
                    spec.method.label()
                )));
            }
            let task = make_task(spec.task, &spec.dims, spec.samples, spec.noise_sigma, spec.seed)?;
            let mut model = build_student(&spec, &task)?;
            finetune(&mut model, &task.train, &spec.train, spec.loss_kind())?;
            let merged = force_merge_weights(&model)?;
            std::fs::create_dir_all(&common.out)?;
            let mut c = Container::new();
            for (idx, w) in merged.iter().enumerate() {
                c.push(NamedTensor::from_matrix_f32(&format!("layer{idx}.weight"), w)?)?;
            }
            c.set_meta("mode", format!("{}-force-merged", spec.method.label()));
            c.set_meta("seed", spec.seed);
            let path = common
                .out
                .join(format!("{}-force-merged.sqck", spec.method.label()));
            save_checkpoint(&path, &c)?;
            for (idx, w) in merged.iter().enumerate() {
                let s = measure_sparsity(w);
                emit(
                    common.format,
                    json!({"layer": idx, "sparsity_after_force_merge": s, "target": spec.sparsity}),
                    format!(
                        "layer {idx}: sparsity {s:.4} after force merge (was >= {})",
                        spec.sparsity
                    ),
                );
            }
            Ok(())
        }
        Command::Eval(common) => {
            let spec = common.spec(Method::SqftSparsePeft)?;
            let task = make_task(spec.task, &spec.dims, spec.samples, spec.noise_sigma, spec.seed)?;
            let mut model = build_student(&spec, &task)?;
            finetune(&mut model, &task.train, &spec.train, spec.loss_kind())?;
            let metrics = evaluate(&model, &task.test, spec.loss_kind())?;
            emit(
                common.format,
                json!({
                    "method": spec.method.label(),
                    "loss": metrics.loss,
                    "accuracy": metrics.accuracy,
                    "layer_sparsity": metrics.layer_sparsity,
                    "total_params": metrics.total_params,
                    "mergeable": metrics.mergeable,
                }),
                format!(
                    "{}: loss {:.6}{} | sparsity {:?} | mergeable {}",
                    spec.method.label(),
                    metrics.loss,
                    metrics
                        .accuracy
                        .map(|a| format!(", accuracy {a:.4}"))
                        .unwrap_or_default(),
                    metrics
                        .layer_sparsity
                        .iter()
                        .map(|s| format!("{s:.3}"))
                        .collect::<Vec<_>>(),
                    metrics.mergeable
                ),
            );
            Ok(())
        }
        Command::Run(common) => {
            let spec = common.spec(Method::SqftSparsePeft)?;
            let result = run_pipeline(&spec, &common.out)?;
            report_run(common.format, &spec, &result);
            Ok(())
        }
        Command::Compare(common) => {
            let seed = common.seed.unwrap_or(0);
            let (results, report) = compare(seed, &common.out)?;
            let _ = cost_report(&results)?;
            match common.format {
                Format::Text => {
                    println!(
                        "{:<20} {:>12} {:>12} {:>10} {:>12} {:>10}",
                        "method", "model bytes", "adapter", "mergeable", "precision", "steps/s"
                    );
                    for row in &report.rows {
                        println!(
                            "{:<20} {:>12} {:>12} {:>10} {:>12} {:>10.1}",
                            row.method.label(),
                            row.model_bytes,
                            row.adapter_bytes,
                            row.mergeable,
                            row.precision,
                            row.steps_per_sec
                        );
                    }
                    println!("{}", report.note);
                }
                Format::JsonLines => {
                    for row in &report.rows {
                        println!(
                            "{}",
                            json!({
                                "method": row.method.label(),
                                "model_bytes": row.model_bytes,
                                "adapter_bytes": row.adapter_bytes,
                                "total_bytes": row.total_bytes,
                                "mergeable": row.mergeable,
                                "precision": row.precision,
                                "train_seconds": row.train_seconds,
                                "steps_per_sec": row.steps_per_sec,
                            })
                        );
                    }
                    println!(
                        "{}",
                        json!({"storage_ordering_ok": report.storage_ordering_ok, "note": report.note})
                    );
                }
            }
            Ok(())
        }
    }
}

fn report_run(format: Format, spec: &PipelineSpec, result: &RunResult) {
    let files: Vec<String> = result
        .files
        .iter()
        .map(|(p, n)| format!("{} ({n} bytes)", p.display()))
        .collect();
    emit(
        format,
        json!({
            "method": spec.method.label(),
            "loss_pruned": result.pruned_metrics.loss,
            "loss": result.metrics.loss,
            "accuracy": result.metrics.accuracy,
            "mergeable": result.metrics.mergeable,
            "layer_sparsity": result.metrics.layer_sparsity,
            "files": result.files.iter().map(|(p, n)| json!({"path": p.display().to_string(), "bytes": n})).collect::<Vec<_>>(),
            "train_seconds": result.train_seconds,
            "steps_per_sec": result.steps_per_sec,
        }),
        format!(
            "{}: loss {:.6} (pruned {:.6}){} | mergeable {} | {}",
            spec.method.label(),
            result.metrics.loss,
            result.pruned_metrics.loss,
            result
                .metrics
                .accuracy
                .map(|a| format!(", accuracy {a:.4}"))
                .unwrap_or_default(),
            result.metrics.mergeable,
            files.join(", ")
        ),
    );
}
