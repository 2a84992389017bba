//! Online phase: multi-start gradient ascent on the predicted score over
//! the architecture encoding of an unseen task.
//!
//! Nothing here can reach a child-training backend; the only inputs are a
//! frozen ranker, the experiment DB and task samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expdb::ExperimentDB;
use crate::ranker::{task_centroid, task_embedding_distance, MetaFeatures, RankerWeights};
use crate::seed::Rng;
use crate::tasks::TaskDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub eta: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub n_warm_tasks: usize,
    pub n_top_per_task: usize,
    /// Batches averaged for the test-task embedding and for task distances.
    pub embed_batches: usize,
    pub embed_batch_size: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            eta: 0.01,
            max_iters: 500,
            tol: 1e-6,
            n_warm_tasks: 2,
            n_top_per_task: 5,
            embed_batches: 10,
            embed_batch_size: 256,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            bad.push("eta must be > 0");
        }
        if self.max_iters == 0 {
            bad.push("max_iters must be >= 1");
        }
        if !(self.tol >= 0.0) {
            bad.push("tol must be >= 0");
        }
        if self.n_warm_tasks == 0 || self.n_top_per_task == 0 {
            bad.push("warm-start counts must be >= 1");
        }
        if self.embed_batches == 0 || self.embed_batch_size == 0 {
            bad.push("embedding batch counts must be >= 1");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(bad.join("; ")))
        }
    }
}

/// A differentiable score over encodings.
pub trait Objective: Sync {
    fn value_and_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// The ranker's score with weights and task embedding held fixed.
pub struct RankerObjective<'a> {
    pub weights: &'a RankerWeights,
    pub z: &'a MetaFeatures,
}

impl Objective for RankerObjective<'_> {
    fn value_and_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.weights.score_and_grad_u(u, self.z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ascent {
    pub encoding: Vec<f64>,
    pub start_score: f64,
    pub final_score: f64,
    pub iterations: usize,
    /// Whether the score never dropped by more than 1e-12 between steps.
    pub monotone: bool,
}

/// Fixed-step ascent `u ← u + η ∂v/∂u`, stopping once `‖Δu‖ < tol` or
/// after `max_iters` steps.
pub fn gradient_ascent(obj: &dyn Objective, u0: &[f64], cfg: &SearchConfig) -> Result<Ascent> {
    cfg.validate()?;
    let mut u = u0.to_vec();
    let (mut v, mut g) = obj.value_and_grad(&u)?;
    let start_score = v;
    let mut monotone = true;
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        if let Some(k) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("encoding[{k}] at iteration {it}")));
        }
        let mut step2 = 0.0;
        for (ui, gi) in u.iter_mut().zip(&g) {
            let d = cfg.eta * gi;
            *ui += d;
            step2 += d * d;
        }
        iterations = it;
        let (nv, ng) = obj.value_and_grad(&u)?;
        if !nv.is_finite() {
            return Err(Error::NonFiniteGradient(format!("score at iteration {it}")));
        }
        if nv < v - 1e-12 {
            monotone = false;
        }
        v = nv;
        g = ng;
        if step2.sqrt() < cfg.tol {
            break;
        }
    }
    Ok(Ascent {
        encoding: u,
        start_score,
        final_score: v,
        iterations,
        monotone,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub source_task: String,
    pub recorded_performance: f64,
    pub encoding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub source_task: String,
    pub start_encoding: Vec<f64>,
    pub start_score: Option<f64>,
    pub iterations: usize,
    pub final_score: Option<f64>,
    pub monotone: Option<bool>,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub test_task: String,
    pub best_encoding: Vec<f64>,
    pub predicted_score: f64,
    pub best_start: usize,
    pub nearest_tasks: Vec<(String, f64)>,
    pub starts: Vec<StartSummary>,
}

/// Training tasks ordered by meta-feature distance to `test_task`.
pub fn nearest_tasks(
    weights: &RankerWeights,
    training: &[&TaskDataset],
    test_task: &TaskDataset,
    cfg: &SearchConfig,
    rng: &mut Rng,
) -> Result<Vec<(String, f64)>> {
    let mut dist = Vec::with_capacity(training.len());
    for t in training {
        let d = task_embedding_distance(weights, test_task, t, cfg.embed_batches, cfg.embed_batch_size, rng)?;
        dist.push((t.task_id().to_string(), d));
    }
    dist.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(dist)
}

/// The best `n_top_per_task` recorded encodings of each of the
/// `n_warm_tasks` nearest training tasks.
pub fn warm_starts(
    weights: &RankerWeights,
    db: &ExperimentDB,
    training: &[&TaskDataset],
    test_task: &TaskDataset,
    cfg: &SearchConfig,
    rng: &mut Rng,
) -> Result<(Vec<WarmStart>, Vec<(String, f64)>)> {
    if training.len() < 2 {
        return Err(Error::invalid("warm starts need at least 2 training tasks"));
    }
    if training.iter().any(|t| t.task_id() == test_task.task_id()) {
        return Err(Error::invalid("the test task is among the training tasks"));
    }
    let near = nearest_tasks(weights, training, test_task, cfg, rng)?;
    let mut starts = Vec::new();
    for (id, _) in near.iter().take(cfg.n_warm_tasks) {
        starts.extend(top_records(db, id, cfg.n_top_per_task)?);
    }
    Ok((starts, near))
}

pub fn top_records(db: &ExperimentDB, task_id: &str, n: usize) -> Result<Vec<WarmStart>> {
    let mut recs: Vec<_> = db.records(task_id)?.iter().collect();
    recs.sort_by(|a, b| b.performance.total_cmp(&a.performance));
    Ok(recs
        .into_iter()
        .take(n)
        .map(|r| WarmStart {
            source_task: task_id.to_string(),
            recorded_performance: r.performance,
            encoding: r.encoding.clone(),
        })
        .collect())
}

/// Runs ascent from every start (in parallel) and keeps the highest final
/// score; ties go to the earliest start.
pub fn ascend_from(
    obj: &dyn Objective,
    starts: &[WarmStart],
    cfg: &SearchConfig,
) -> Result<(usize, Vec<StartSummary>, Vec<Option<Ascent>>)> {
    if starts.is_empty() {
        return Err(Error::Search("no warm starts available".into()));
    }
    let runs: Vec<Result<Ascent>> = starts
        .par_iter()
        .map(|s| gradient_ascent(obj, &s.encoding, cfg))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    let mut summaries = Vec::with_capacity(starts.len());
    let mut ascents = Vec::with_capacity(starts.len());
    for (k, (s, run)) in starts.iter().zip(runs).enumerate() {
        match run {
            Ok(a) => {
                if best.is_none_or(|(_, v)| a.final_score > v) {
                    best = Some((k, a.final_score));
                }
                summaries.push(StartSummary {
                    source_task: s.source_task.clone(),
                    start_encoding: s.encoding.clone(),
                    start_score: Some(a.start_score),
                    iterations: a.iterations,
                    final_score: Some(a.final_score),
                    monotone: Some(a.monotone),
                    aborted: None,
                });
                ascents.push(Some(a));
            }
            Err(e) => {
                log::warn!("search start {k} aborted: {e}");
                summaries.push(StartSummary {
                    source_task: s.source_task.clone(),
                    start_encoding: s.encoding.clone(),
                    start_score: None,
                    iterations: 0,
                    final_score: None,
                    monotone: None,
                    aborted: Some(e.to_string()),
                });
                ascents.push(None);
            }
        }
    }
    let (k, _) = best.ok_or_else(|| Error::Search("every start aborted".into()))?;
    Ok((k, summaries, ascents))
}

/// Finds a high-scoring encoding for `test_task`, whose records are never
/// read from `db`.
pub fn search(
    weights: &RankerWeights,
    db: &ExperimentDB,
    training: &[&TaskDataset],
    test_task: &TaskDataset,
    cfg: &SearchConfig,
    rng: &mut Rng,
) -> Result<SearchResult> {
    cfg.validate()?;
    let z = MetaFeatures {
        z: task_centroid(weights, test_task, cfg.embed_batches, cfg.embed_batch_size, rng)?,
    };
    let (starts, near) = warm_starts(weights, db, training, test_task, cfg, rng)?;
    let obj = RankerObjective { weights, z: &z };
    let (best, starts, mut ascents) = ascend_from(&obj, &starts, cfg)?;
    let winner = ascents[best].take().expect("best start succeeded");
    Ok(SearchResult {
        test_task: test_task.task_id().to_string(),
        best_encoding: winner.encoding,
        predicted_score: winner.final_score,
        best_start: best,
        nearest_tasks: near,
        starts,
    })
}
