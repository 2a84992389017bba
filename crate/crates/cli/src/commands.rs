use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use archrank_core::child::{AnalyticBackend, PerfBackend, RealTrainBackend};
use archrank_core::eval::{
    leave_one_out, pca_meta_features, read_summary_csv, render_tables, write_pca_csv, EvalReport, Pca,
};
use archrank_core::expdb::{populate, ExperimentDB};
use archrank_core::losses::{train_ranker, write_metrics_csv, TrainOutcome};
use archrank_core::ranker::RankerWeights;
use archrank_core::search::{search, SearchResult};
use archrank_core::seed;
use archrank_core::tasks::{generate_tasks, load_tasks, TaskDataset};

use crate::config::{BackendKind, RunConfig};

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn read_tasks(path: &Path) -> anyhow::Result<Vec<TaskDataset>> {
    load_tasks(path).with_context(|| format!("loading tasks from {}", path.display()))
}

pub fn read_db(cfg: &RunConfig, path: &Path) -> anyhow::Result<ExperimentDB> {
    ExperimentDB::load(path, Some(&cfg.arch.fingerprint()))
        .with_context(|| format!("loading experiment database {}", path.display()))
}

fn find_task<'a>(tasks: &'a [TaskDataset], id: &str) -> anyhow::Result<&'a TaskDataset> {
    tasks.iter().find(|t| t.task_id() == id).with_context(|| {
        let ids: Vec<&str> = tasks.iter().map(TaskDataset::task_id).collect();
        format!("unknown task `{id}` (known: {})", ids.join(", "))
    })
}

/// The child-performance backend named by the config. The analytic
/// surrogate's per-task optima depend on the tasks and the seed only.
pub fn build_backend(cfg: &RunConfig, tasks: &[TaskDataset]) -> anyhow::Result<PerfBackend> {
    let s = seed::derive_seed(cfg.seed, &[0xbac]);
    Ok(match cfg.db.backend {
        BackendKind::Analytic => PerfBackend::Analytic(AnalyticBackend::for_tasks(tasks, &cfg.arch, &cfg.surrogate, s)?),
        BackendKind::RealTrain => {
            let d_in = tasks.first().context("no tasks")?.input_dim();
            PerfBackend::RealTrain(RealTrainBackend::new(cfg.arch.clone(), d_in, cfg.real_train.clone(), s)?)
        }
    })
}

pub fn gen_tasks(cfg: &RunConfig) -> anyhow::Result<Vec<TaskDataset>> {
    Ok(generate_tasks(&cfg.tasks)?)
}

pub fn cmd_gen_tasks(cfg: &RunConfig, out: &Path) -> anyhow::Result<Vec<TaskDataset>> {
    let tasks = gen_tasks(cfg)?;
    let mut w = create(out)?;
    archrank_core::tasks::write_tasks_jsonl(&tasks, &mut w)?;
    w.flush()?;
    log::info!("wrote {} tasks to {}", tasks.len(), out.display());
    Ok(tasks)
}

pub fn build_db(cfg: &RunConfig, tasks: &[TaskDataset]) -> anyhow::Result<ExperimentDB> {
    let backend = build_backend(cfg, tasks)?;
    Ok(populate(
        tasks,
        &cfg.arch,
        &backend,
        cfg.db.records_per_task,
        seed::derive_seed(cfg.seed, &[0xdb]),
    )?)
}

pub fn cmd_populate_db(cfg: &RunConfig, tasks_path: &Path, out: &Path) -> anyhow::Result<ExperimentDB> {
    let tasks = read_tasks(tasks_path)?;
    let db = build_db(cfg, &tasks)?;
    let mut w = create(out)?;
    db.write_jsonl(&mut w)?;
    w.flush()?;
    log::info!("wrote {} records to {}", db.len(), out.display());
    Ok(db)
}

/// Trains a ranker on every task except `test_task`.
pub fn train_excluding(
    cfg: &RunConfig,
    tasks: &[TaskDataset],
    db: &ExperimentDB,
    test_task: &str,
) -> anyhow::Result<TrainOutcome> {
    find_task(tasks, test_task)?;
    let slice = archrank_core::eval::TrainingSlice::new(db, tasks, test_task);
    slice.check()?;
    let s = seed::derive_seed(cfg.seed, &[0x7a, seed::label(test_task)]);
    Ok(train_ranker(
        slice.db(),
        slice.tasks(),
        &cfg.loss_config(cfg.loss.kind),
        &cfg.ranker,
        &cfg.train_config(),
        s,
    )?)
}

pub fn cmd_train(
    cfg: &RunConfig,
    tasks_path: &Path,
    db_path: &Path,
    test_task: &str,
    out_weights: &Path,
    metrics_out: Option<&Path>,
) -> anyhow::Result<RankerWeights> {
    let tasks = read_tasks(tasks_path)?;
    let db = read_db(cfg, db_path)?;
    let outcome = train_excluding(cfg, &tasks, &db, test_task)?;
    let mut w = create(out_weights)?;
    outcome.weights.write_checkpoint(&mut w)?;
    w.flush()?;
    if let Some(m) = metrics_out {
        let mut w = create(m)?;
        write_metrics_csv(&outcome.metrics, &mut w)?;
        w.flush()?;
    }
    Ok(outcome.weights)
}

pub fn cmd_search(
    cfg: &RunConfig,
    tasks_path: &Path,
    db_path: &Path,
    weights_path: &Path,
    test_task: &str,
) -> anyhow::Result<SearchResult> {
    let tasks = read_tasks(tasks_path)?;
    let db = read_db(cfg, db_path)?;
    let weights = RankerWeights::load(weights_path)
        .with_context(|| format!("loading weights {}", weights_path.display()))?;
    let test = find_task(&tasks, test_task)?;
    let slice = archrank_core::eval::TrainingSlice::new(&db, &tasks, test_task);
    let mut rng = seed::rng_from(cfg.seed, &[0x5ea7, seed::label(test_task)]);
    Ok(search(&weights, slice.db(), slice.tasks(), test, &cfg.search, &mut rng)?)
}

pub const SUMMARY_CSV: &str = "report.csv";
pub const CELLS_CSV: &str = "cells.csv";
pub const TABLE_TXT: &str = "report.txt";

/// Leave-one-out over the task family. Tasks and DB are read from the
/// given paths, or generated from the config when absent.
pub fn cmd_eval_loo(
    cfg: &RunConfig,
    tasks_path: Option<&Path>,
    db_path: Option<&Path>,
    out_dir: &Path,
) -> anyhow::Result<EvalReport> {
    let tasks = match tasks_path {
        Some(p) => read_tasks(p)?,
        None => gen_tasks(cfg)?,
    };
    let db = match db_path {
        Some(p) => read_db(cfg, p)?,
        None => build_db(cfg, &tasks)?,
    };
    let backend = build_backend(cfg, &tasks)?;
    let report = leave_one_out(
        &tasks,
        &db,
        &cfg.arch,
        &backend,
        &cfg.loo_config(),
        seed::derive_seed(cfg.seed, &[0x100]),
    )?;
    write_report(&report, out_dir)?;
    Ok(report)
}

pub fn write_report(report: &EvalReport, out_dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut w = create(&out_dir.join(SUMMARY_CSV))?;
    report.write_summary_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&out_dir.join(CELLS_CSV))?;
    report.write_cells_csv(&mut w)?;
    w.flush()?;
    std::fs::write(out_dir.join(TABLE_TXT), render_tables(&report.rows))?;
    Ok(())
}

/// Renders a summary CSV, or the one inside a report directory.
pub fn cmd_report(report_path: &Path) -> anyhow::Result<String> {
    let path: PathBuf = if report_path.is_dir() {
        report_path.join(SUMMARY_CSV)
    } else {
        report_path.to_path_buf()
    };
    let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let rows = read_summary_csv(f).with_context(|| format!("reading {}", path.display()))?;
    if rows.is_empty() {
        bail!("{} has no report rows", path.display());
    }
    Ok(render_tables(&rows))
}

pub fn cmd_pca(cfg: &RunConfig, tasks_path: &Path, weights_path: &Path, out: &Path) -> anyhow::Result<Pca> {
    let tasks = read_tasks(tasks_path)?;
    let weights = RankerWeights::load(weights_path)
        .with_context(|| format!("loading weights {}", weights_path.display()))?;
    let pca = pca_meta_features(
        &weights,
        &tasks,
        cfg.eval.pca_batches,
        cfg.eval.pca_batch_size,
        seed::derive_seed(cfg.seed, &[0x9ca]),
    )?;
    let mut w = create(out)?;
    write_pca_csv(&pca, &mut w)?;
    w.flush()?;
    Ok(pca)
}
