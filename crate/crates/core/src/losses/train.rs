use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{batch_loss, LossConfig, Reduction};
use crate::error::{Error, Result};
use crate::expdb::{batch_for_task, ExperimentDB};
use crate::numerics::{sgd_momentum_step, Matrix, MomentumState, Tape};
use crate::ranker::{init_for, meta_batch_inputs, RankerConfig, RankerWeights};
use crate::seed;
use crate::tasks::TaskDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub record_batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            record_batch: 32,
            learning_rate: 1e-4,
            momentum: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.record_batch < 2 {
            return Err(Error::invalid("record_batch must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub task: String,
    pub loss: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: RankerWeights,
    pub metrics: Vec<StepMetrics>,
}

pub fn write_metrics_csv(metrics: &[StepMetrics], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains a freshly initialized ranker on `tasks`, which must all be
/// present in `db`. Every stochastic choice derives from `seed`.
pub fn train_ranker(
    db: &ExperimentDB,
    tasks: &[&TaskDataset],
    loss: &LossConfig,
    ranker_cfg: &RankerConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let dim = db
        .iter()
        .next()
        .map(|r| r.encoding.len())
        .ok_or(Error::Empty("train_ranker: database"))?;
    let first = tasks.first().ok_or(Error::Empty("train_ranker: tasks"))?;
    let init = init_for(std::slice::from_ref(*first), dim, ranker_cfg, seed)?;
    train_ranker_from(init, db, tasks, loss, ranker_cfg, train_cfg, seed)
}

/// Like [`train_ranker`] but starting from given weights.
pub fn train_ranker_from(
    mut weights: RankerWeights,
    db: &ExperimentDB,
    tasks: &[&TaskDataset],
    loss: &LossConfig,
    ranker_cfg: &RankerConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    loss.validate()?;
    train_cfg.validate()?;
    ranker_cfg.validate()?;
    if tasks.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 training tasks, got {}", tasks.len())));
    }
    for t in tasks {
        let n = db.records(t.task_id())?.len();
        if n < 2 {
            return Err(Error::DegenerateTask {
                task: t.task_id().to_string(),
                reason: format!("{n} database records"),
            });
        }
        if t.input_dim() != weights.input_dim {
            return Err(Error::shape("train_ranker", "task input dimension differs from ranker"));
        }
    }

    let names = weights.tensor_names();
    let mut state = MomentumState::new(&weights.tensors(), train_cfg.learning_rate, train_cfg.momentum)?;
    let mut rng = seed::rng_from(seed, &[0x7a1a]);
    let mut metrics = Vec::with_capacity(train_cfg.steps);
    let mut steps_with_pairs = 0usize;

    for step in 0..train_cfg.steps {
        let task = tasks[rng.random_range(0..tasks.len())];
        let recs = batch_for_task(db, task.task_id(), train_cfg.record_batch, &mut rng)?;
        let x = meta_batch_inputs(task, ranker_cfg.meta_batch, &mut rng)?;
        let u = Matrix::from_row_slices(recs.iter().map(|r| r.encoding.as_slice()))?;
        let perf: Vec<f64> = recs.iter().map(|r| r.performance).collect();

        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape);
        let xv = tape.leaf(x);
        let uv = tape.leaf(u);
        let z = bound.meta_features(&mut tape, xv)?;
        let scores = bound.scores(&mut tape, uv, z)?;
        let vars = bound.vars();

        let (grads, value, pairs) = match batch_loss(&mut tape, scores, &perf, loss, Reduction::Mean)? {
            Some((l, n)) => {
                steps_with_pairs += 1;
                let g = tape.backward(l)?;
                let grads: Vec<Matrix> = vars.iter().map(|&v| g.wrt(v, tape.value(v))).collect();
                (grads, tape.scalar(l), n)
            }
            None => {
                let grads = weights.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
                (grads, 0.0, 0)
            }
        };
        drop(tape);
        sgd_momentum_step(&mut weights.tensors_mut(), &grads, &names, &mut state)?;
        metrics.push(StepMetrics {
            step,
            task: task.task_id().to_string(),
            loss: value,
            pairs,
        });
    }
    if train_cfg.steps > 0 && steps_with_pairs == 0 {
        log::warn!("no training step had a pair passing the gap filter; weights only moved by momentum");
    }
    Ok(TrainOutcome { weights, metrics })
}
