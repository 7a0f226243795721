//! Rank-configuration selection after supernet training: a median-rank
//! heuristic that needs no search, and a budgeted hill-climbing search over
//! the discrete per-layer rank grid.
//!
//! Configurations are represented two ways: as rank values (one per layer)
//! and as index vectors into each layer's rank space. The search operates on
//! index vectors; neighbors are configurations whose per-layer indices differ
//! by at most a step bound, with at least one layer changed.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adapter::RankSpace;
use crate::error::{Error, Result};
use crate::tensor::Rng;
use crate::train::{loss, Dataset, LossKind, MlpModel};

/// One rank per adapterized layer.
pub type RankConfig = Vec<usize>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchParams {
    /// Maximum climbing turns `T`.
    pub turns: usize,
    /// Neighbors drawn per turn `N`.
    pub neighbors: usize,
    /// Maximum per-layer index offset `S` when forming a neighbor.
    pub step: usize,
    /// Validation samples used per evaluation.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            turns: 8,
            neighbors: 8,
            step: 1,
            eval_samples: 256,
            seed: 0,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if self.turns == 0 || self.neighbors == 0 || self.step == 0 {
            return Err(Error::Config(
                "turns, neighbors, and step must be positive".into(),
            ));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Search-free baseline: each layer takes the median of its rank space.
pub fn heuristic_config(spaces: &[RankSpace]) -> RankConfig {
    spaces.iter().map(|s| s.median()).collect()
}

fn config_of_indices(spaces: &[RankSpace], indices: &[usize]) -> RankConfig {
    indices
        .iter()
        .zip(spaces)
        .map(|(&i, s)| s.values()[i])
        .collect()
}

/// Total rank of a configuration; the tie-break prefers smaller.
fn total_rank(config: &RankConfig) -> usize {
    config.iter().sum()
}

/// All index vectors within `step` of `anchor` in every coordinate, excluding
/// the anchor itself and anything already visited, shuffled, truncated to
/// `limit`.
fn neighbor_sample(
    spaces: &[RankSpace],
    anchor: &[usize],
    step: usize,
    limit: usize,
    visited: &BTreeSet<Vec<usize>>,
    rng: &mut Rng,
) -> Vec<Vec<usize>> {
    let mut all = Vec::new();
    let mut current = vec![0usize; anchor.len()];
    enumerate_offsets(spaces, anchor, step, 0, &mut current, &mut all);
    all.retain(|c| c != anchor && !visited.contains(c));
    rng.shuffle(&mut all);
    all.truncate(limit);
    all
}

fn enumerate_offsets(
    spaces: &[RankSpace],
    anchor: &[usize],
    step: usize,
    depth: usize,
    current: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    if depth == anchor.len() {
        out.push(current.clone());
        return;
    }
    let len = spaces[depth].len();
    let lo = anchor[depth].saturating_sub(step);
    let hi = (anchor[depth] + step).min(len - 1);
    for idx in lo..=hi {
        current[depth] = idx;
        enumerate_offsets(spaces, anchor, step, depth + 1, current, out);
    }
}

/// One scored configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub config: RankConfig,
    pub score: f64,
}

/// What the search did: every evaluation in order, and the anchor after each
/// turn.
#[derive(Debug, Clone, Default)]
pub struct SearchTrace {
    pub evaluations: Vec<Evaluation>,
    pub anchors: Vec<Evaluation>,
}

/// Budgeted hill climbing over rank configurations, driven by an arbitrary
/// scoring closure (higher is better).
///
/// Starts from the heuristic configuration, evaluates up to `neighbors` fresh
/// neighbors per turn, and moves the anchor only on strict improvement
/// (ties broken toward smaller total rank, then lexicographically smaller
/// ranks). Stops early when the reachable neighborhood is exhausted. Total
/// evaluations never exceed `turns * neighbors + 1`.
pub fn hill_climb_with<F>(
    spaces: &[RankSpace],
    params: &SearchParams,
    mut score: F,
) -> Result<(RankConfig, SearchTrace)>
where
    F: FnMut(&RankConfig) -> Result<f64>,
{
    params.validate()?;
    if spaces.is_empty() {
        return Err(Error::Config("no rank spaces to search".into()));
    }
    let mut rng = Rng::new(params.seed).derive("hill-climb");
    let mut trace = SearchTrace::default();
    let mut visited: BTreeSet<Vec<usize>> = BTreeSet::new();

    let start: Vec<usize> = spaces
        .iter()
        .map(|s| {
            let median = s.median();
            s.values().iter().position(|&v| v == median).expect("median is in the space")
        })
        .collect();
    let start_config = config_of_indices(spaces, &start);
    let start_score = score(&start_config)?;
    trace.evaluations.push(Evaluation {
        config: start_config.clone(),
        score: start_score,
    });
    visited.insert(start.clone());

    let mut anchor = start;
    let mut anchor_eval = Evaluation {
        config: start_config,
        score: start_score,
    };
    trace.anchors.push(anchor_eval.clone());

    for _turn in 0..params.turns {
        let candidates = neighbor_sample(
            spaces,
            &anchor,
            params.step,
            params.neighbors,
            &visited,
            &mut rng,
        );
        if candidates.is_empty() {
            break;
        }
        let mut best: Option<(Vec<usize>, Evaluation)> = None;
        for cand in candidates {
            let config = config_of_indices(spaces, &cand);
            let s = score(&config)?;
            if !s.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite search score for configuration {config:?}"
                )));
            }
            visited.insert(cand.clone());
            let eval = Evaluation { config, score: s };
            trace.evaluations.push(eval.clone());
            let better = match &best {
                None => true,
                Some((_, cur)) => prefer(&eval, cur),
            };
            if better {
                best = Some((cand, eval));
            }
        }
        if let Some((cand, eval)) = best {
            if prefer(&eval, &anchor_eval) {
                anchor = cand;
                anchor_eval = eval;
            }
        }
        trace.anchors.push(anchor_eval.clone());
    }
    Ok((anchor_eval.config, trace))
}

/// Strict preference: higher score, then smaller total rank, then
/// lexicographically smaller ranks. Equal configurations are never preferred.
fn prefer(a: &Evaluation, b: &Evaluation) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    let (ta, tb) = (total_rank(&a.config), total_rank(&b.config));
    if ta != tb {
        return ta < tb;
    }
    a.config < b.config
}

/// Set the model's active ranks to `config`, measure the metric on the given
/// data, and restore the previous ranks. Classification scores accuracy,
/// regression scores negative mean squared error, so higher is always better.
pub fn evaluate_config(
    model: &mut MlpModel,
    config: &RankConfig,
    data: &Dataset,
    kind: LossKind,
) -> Result<f64> {
    let saved = model.active_ranks();
    model.set_active_ranks(config)?;
    let result = match kind {
        LossKind::Mse => loss(model, &data.x, &data.targets, LossKind::Mse).map(|l| -l),
        LossKind::CrossEntropy => accuracy(model, data),
    };
    model.set_active_ranks(&saved)?;
    result
}

/// Fraction of columns whose argmax logit equals the label.
pub fn accuracy(model: &MlpModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let pred = model.forward(&data.x)?;
    let mut correct = 0usize;
    for col in 0..pred.cols() {
        let mut arg = 0usize;
        for i in 1..pred.rows() {
            if pred.get(i, col) > pred.get(arg, col) {
                arg = i;
            }
        }
        if arg == data.targets.get(0, col) as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / pred.cols() as f64)
}

/// Hill climbing over a trained supernet: scores each candidate on a fixed
/// proxy subset of the validation data (the same subset for every candidate,
/// drawn once from the search seed).
pub fn hill_climb(
    model: &mut MlpModel,
    validation: &Dataset,
    kind: LossKind,
    params: &SearchParams,
) -> Result<(RankConfig, SearchTrace)> {
    if validation.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let mut proxy_rng = Rng::new(params.seed).derive("search-proxy");
    let m = params.eval_samples.min(validation.len());
    let mut indices: Vec<usize> = (0..validation.len()).collect();
    proxy_rng.shuffle(&mut indices);
    indices.truncate(m);
    let (px, py) = validation.batch(&indices)?;
    let proxy = Dataset { x: px, targets: py };

    let spaces: Vec<RankSpace> = model
        .layers()
        .iter()
        .map(|l| l.adapter.rank_space().clone())
        .collect();
    hill_climb_with(&spaces, params, |config| {
        evaluate_config(model, config, &proxy, kind)
    })
}

/// Exhaustive argmax over the whole configuration grid, same tie-break as the
/// search. Only usable on small spaces; the test oracle for hill climbing.
pub fn brute_force_with<F>(spaces: &[RankSpace], mut score: F) -> Result<Evaluation>
where
    F: FnMut(&RankConfig) -> Result<f64>,
{
    if spaces.is_empty() {
        return Err(Error::Config("no rank spaces to search".into()));
    }
    let mut indices = vec![0usize; spaces.len()];
    let mut best: Option<Evaluation> = None;
    loop {
        let config = config_of_indices(spaces, &indices);
        let s = score(&config)?;
        let eval = Evaluation { config, score: s };
        let better = match &best {
            None => true,
            Some(cur) => prefer(&eval, cur),
        };
        if better {
            best = Some(eval);
        }
        // Odometer increment over the index grid.
        let mut depth = spaces.len();
        loop {
            if depth == 0 {
                return Ok(best.expect("grid is nonempty"));
            }
            depth -= 1;
            indices[depth] += 1;
            if indices[depth] < spaces[depth].len() {
                break;
            }
            indices[depth] = 0;
        }
    }
}
