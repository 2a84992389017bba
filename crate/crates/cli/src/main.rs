use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use archrank_cli::commands;
use archrank_cli::config::{BackendKind, RunConfig};
use archrank_core::losses::LossKind;

#[derive(Parser)]
#[command(name = "archrank", version, about = "Ranking-based neural architecture search pipeline")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Bundled configuration used when --config is absent.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    loss: Option<LossArg>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Output file, or directory for eval-loo.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    PaperShape,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    L2,
    Linear,
    Quadratic,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Analytic,
    RealTrain,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task family.
    GenTasks,
    /// Measure random architectures on every task.
    PopulateDb {
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
    /// Train a ranker on every task but the test task.
    Train {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        test_task: String,
        /// Per-step training metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Search an architecture for the test task with trained weights.
    Search {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        test_task: String,
    },
    /// Leave-one-out evaluation over all tasks and losses.
    EvalLoo {
        /// Tasks file; generated from the config when absent.
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Experiment DB; populated from the config when absent.
        #[arg(long)]
        db: Option<PathBuf>,
    },
    /// Render a leave-one-out report as text tables.
    Report { report: PathBuf },
    /// Project batch meta-features onto two principal components.
    Pca {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(match cli.preset {
            Preset::Desk => "desk",
            Preset::PaperShape => "paper-shape",
        })?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.tasks.seed = s;
    }
    if let Some(l) = cli.loss {
        let kind = match l {
            LossArg::L2 => LossKind::L2,
            LossArg::Linear => LossKind::LinearRank,
            LossArg::Quadratic => LossKind::QuadraticRank,
        };
        cfg.loss.kind = kind;
        cfg.eval.losses = vec![kind];
    }
    if let Some(b) = cli.backend {
        cfg.db.backend = match b {
            BackendArg::Analytic => BackendKind::Analytic,
            BackendArg::RealTrain => BackendKind::RealTrain,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn or_default(given: &Option<PathBuf>, cfg: &RunConfig, name: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.paths.out_dir.join(name))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = effective_config(&cli)?;
    let out = |name: &str| or_default(&cli.out, &cfg, name);
    match &cli.command {
        Command::GenTasks => {
            let path = out("tasks.jsonl");
            let tasks = commands::cmd_gen_tasks(&cfg, &path)?;
            println!("wrote {} tasks to {}", tasks.len(), path.display());
        }
        Command::PopulateDb { tasks } => {
            let path = out("db.jsonl");
            let db = commands::cmd_populate_db(&cfg, &or_default(tasks, &cfg, "tasks.jsonl"), &path)?;
            println!("wrote {} records to {}", db.len(), path.display());
        }
        Command::Train {
            tasks,
            db,
            test_task,
            metrics,
        } => {
            let path = out("weights.json");
            commands::cmd_train(
                &cfg,
                &or_default(tasks, &cfg, "tasks.jsonl"),
                &or_default(db, &cfg, "db.jsonl"),
                test_task,
                &path,
                metrics.as_deref(),
            )?;
            println!("wrote ranker weights to {}", path.display());
        }
        Command::Search {
            tasks,
            db,
            weights,
            test_task,
        } => {
            let result = commands::cmd_search(
                &cfg,
                &or_default(tasks, &cfg, "tasks.jsonl"),
                &or_default(db, &cfg, "db.jsonl"),
                &or_default(weights, &cfg, "weights.json"),
                test_task,
            )?;
            let json = serde_json::to_string_pretty(&result)?;
            if let Some(p) = &cli.out {
                std::fs::write(p, format!("{json}\n")).with_context(|| format!("writing {}", p.display()))?;
            }
            println!("{json}");
        }
        Command::EvalLoo { tasks, db } => {
            let dir = cli.out.clone().unwrap_or_else(|| cfg.paths.out_dir.join("eval"));
            let report = commands::cmd_eval_loo(&cfg, tasks.as_deref(), db.as_deref(), &dir)?;
            print!("{}", archrank_core::eval::render_tables(&report.rows));
            println!("report written to {}", dir.display());
        }
        Command::Report { report } => print!("{}", commands::cmd_report(report)?),
        Command::Pca { tasks, weights } => {
            let path = out("pca.csv");
            let pca = commands::cmd_pca(
                &cfg,
                &or_default(tasks, &cfg, "tasks.jsonl"),
                &or_default(weights, &cfg, "weights.json"),
                &path,
            )?;
            println!(
                "wrote {} points to {} (component variances {:.4e}, {:.4e})",
                pca.points.len(),
                path.display(),
                pca.variances[0],
                pca.variances[1]
            );
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

