//! Leave-one-out evaluation: rank correlations, search quality and
//! meta-feature projections.

mod loo;
mod metrics;
mod pca;
mod report;

pub use loo::{cell_seed, leave_one_out, score_task_records, LooConfig, TrainingSlice};
pub use metrics::{average_ranks, mean_std, pearson, quantile, spearman};
pub use pca::{
    batch_embeddings, pca_2d, pca_meta_features, write_pca_csv, BatchEmbeddings, Pca, PcaPoint,
    StabilityRow,
};
pub use report::{read_summary_csv, render_tables, CellResult, EvalReport, ReportRow};

use crate::child::{AnalyticBackend, ArchEncoding};
use crate::error::Result;
use crate::seed;

/// Noiseless surrogate values of `n` random encodings (i.i.d. N(0, 1)
/// logits, the same law the DB is populated with) for one task.
pub fn sample_true_performance(backend: &AnalyticBackend, task_id: &str, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = seed::rng_from(seed, &[0x3c, seed::label(task_id)]);
    (0..n)
        .map(|_| {
            let enc = ArchEncoding::random(backend.arch(), &mut rng);
            backend.expected_perf(&enc, task_id)
        })
        .collect()
}
