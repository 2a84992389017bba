use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{pearson, spearman};
use super::report::{summarize, CellResult, EvalReport};
use crate::child::{ArchEncoding, ArchSpace, PerfBackend};
use crate::error::{Error, Result};
use crate::expdb::ExperimentDB;
use crate::losses::{train_ranker, LossConfig, TrainConfig};
use crate::numerics::Matrix;
use crate::ranker::{task_centroid, MetaFeatures, RankerConfig, RankerWeights};
use crate::search::{search, SearchConfig};
use crate::seed;
use crate::tasks::TaskDataset;

/// The part of the DB and task family a held-out task's ranker may see.
/// Construction removes the held-out task; [`TrainingSlice::check`]
/// re-verifies it before any training.
pub struct TrainingSlice<'a> {
    held_out: String,
    db: ExperimentDB,
    tasks: Vec<&'a TaskDataset>,
}

impl<'a> TrainingSlice<'a> {
    pub fn new(db: &ExperimentDB, tasks: &'a [TaskDataset], held_out: &str) -> Self {
        TrainingSlice {
            held_out: held_out.to_string(),
            db: db.without_task(held_out),
            tasks: tasks.iter().filter(|t| t.task_id() != held_out).collect(),
        }
    }

    pub fn held_out(&self) -> &str {
        &self.held_out
    }

    pub fn db(&self) -> &ExperimentDB {
        &self.db
    }

    pub fn tasks(&self) -> &[&'a TaskDataset] {
        &self.tasks
    }

    /// Whether `task_id` can reach training through this slice.
    pub fn exposes(&self, task_id: &str) -> bool {
        self.db.contains_task(task_id) || self.tasks.iter().any(|t| t.task_id() == task_id)
    }

    pub fn check(&self) -> Result<()> {
        if self.exposes(&self.held_out) {
            return Err(Error::invalid(format!(
                "held-out task `{}` leaked into the training slice",
                self.held_out
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooConfig {
    pub losses: Vec<LossConfig>,
    pub ranker: RankerConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub n_repeats: usize,
    pub run_search: bool,
}

impl LooConfig {
    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() {
            return Err(Error::invalid("no loss kinds to evaluate"));
        }
        if self.n_repeats == 0 {
            return Err(Error::invalid("n_repeats must be >= 1"));
        }
        for l in &self.losses {
            l.validate()?;
        }
        self.ranker.validate()?;
        self.train.validate()?;
        self.search.validate()
    }
}

/// Seed for one (held-out task, repeat) cell; shared by every loss kind so
/// losses are compared on identical initializations and batch streams.
pub fn cell_seed(seed: u64, task_id: &str, repeat: usize) -> u64 {
    seed::derive_seed(seed, &[0xce11, seed::label(task_id), repeat as u64])
}

/// Scores of every DB record of `task` under `z` taken from that task.
pub fn score_task_records(
    weights: &RankerWeights,
    db: &ExperimentDB,
    task: &TaskDataset,
    cfg: &SearchConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = MetaFeatures {
        z: task_centroid(
            weights,
            task,
            cfg.embed_batches,
            cfg.embed_batch_size,
            &mut seed::rng_from(seed, &[0x5c0e]),
        )?,
    };
    let recs = db.records(task.task_id())?;
    let u = Matrix::from_row_slices(recs.iter().map(|r| r.encoding.as_slice()))?;
    let scores = weights.score_batch(&u, &z)?;
    Ok((scores, recs.iter().map(|r| r.performance).collect()))
}

/// Leave-one-out over every task: for each held-out task, loss kind and
/// repeat, trains a ranker on the other tasks, correlates its scores with
/// the held-out records, and searches for an architecture whose quality
/// `backend` then measures. Cells run in parallel; the report is ordered
/// by task id, loss and repeat.
pub fn leave_one_out(
    tasks: &[TaskDataset],
    db: &ExperimentDB,
    arch: &ArchSpace,
    backend: &PerfBackend,
    cfg: &LooConfig,
    seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    if tasks.len() < 3 {
        return Err(Error::invalid(format!(
            "leave-one-out needs at least 3 tasks, got {}",
            tasks.len()
        )));
    }
    let mut sorted: Vec<&TaskDataset> = tasks.iter().collect();
    sorted.sort_by(|a, b| a.task_id().cmp(b.task_id()));
    for t in &sorted {
        if !db.contains_task(t.task_id()) {
            return Err(Error::UnknownTask(t.task_id().to_string()));
        }
    }

    let mut jobs = Vec::new();
    for t in &sorted {
        for loss in &cfg.losses {
            for r in 0..cfg.n_repeats {
                jobs.push((t.task_id().to_string(), *loss, r));
            }
        }
    }
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|(task_id, loss, r)| {
            let s = cell_seed(seed, task_id, *r);
            let outcome = run_cell(tasks, db, arch, backend, cfg, task_id, loss, s);
            CellResult::from_outcome(task_id, loss.kind, *r, s, outcome)
        })
        .collect();
    Ok(EvalReport {
        rows: summarize(&cells),
        cells,
    })
}

pub(crate) struct CellOutcome {
    pub spearman: Result<f64>,
    pub pearson: Result<f64>,
    pub search: Option<Result<(f64, f64, Vec<f64>)>>,
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    tasks: &[TaskDataset],
    db: &ExperimentDB,
    arch: &ArchSpace,
    backend: &PerfBackend,
    cfg: &LooConfig,
    held_out: &str,
    loss: &LossConfig,
    cell_seed: u64,
) -> Result<CellOutcome> {
    let slice = TrainingSlice::new(db, tasks, held_out);
    slice.check()?;
    let test = tasks
        .iter()
        .find(|t| t.task_id() == held_out)
        .ok_or_else(|| Error::UnknownTask(held_out.to_string()))?;
    let trained = train_ranker(slice.db(), slice.tasks(), loss, &cfg.ranker, &cfg.train, cell_seed)?;
    let weights = trained.weights;

    let (scores, perf) = score_task_records(&weights, db, test, &cfg.search, cell_seed)?;
    let search_outcome = cfg.run_search.then(|| -> Result<(f64, f64, Vec<f64>)> {
        let mut rng = seed::rng_from(cell_seed, &[0x5ea7]);
        let found = search(&weights, slice.db(), slice.tasks(), test, &cfg.search, &mut rng)?;
        let enc = ArchEncoding::from_flat(arch, &found.best_encoding)?;
        let q = backend.final_performance(&enc, test, seed::derive_seed(cell_seed, &[0xf1a1]))?;
        Ok((q, found.predicted_score, found.best_encoding))
    });
    Ok(CellOutcome {
        spearman: spearman(&scores, &perf),
        pearson: pearson(&scores, &perf),
        search: search_outcome,
    })
}
