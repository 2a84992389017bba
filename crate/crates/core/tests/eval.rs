//! Leave-one-out harness shape, metric invariances and meta-feature PCA.

use archrank_core::child::{AnalyticBackend, ArchSpace, PerfBackend, SurrogateConfig};
use archrank_core::eval::{batch_embeddings, leave_one_out, pca_meta_features, pearson, spearman, LooConfig};
use archrank_core::expdb::populate;
use archrank_core::losses::{LossConfig, LossKind, TrainConfig};
use archrank_core::ranker::{InitScheme, RankerConfig, RankerWeights};
use archrank_core::search::SearchConfig;
use archrank_core::seed::rng_from;
use archrank_core::tasks::{generate_tasks, Range, TaskFamilyConfig};
use proptest::prelude::*;

#[test]
fn three_tasks_one_repeat_give_three_rows_per_loss() {
    let tasks = generate_tasks(&TaskFamilyConfig {
        num_tasks: 3,
        samples: Range::new(200, 300),
        seed: 2,
        ..TaskFamilyConfig::default()
    })
    .unwrap();
    let arch = ArchSpace::desk();
    let backend = PerfBackend::Analytic(AnalyticBackend::for_tasks(&tasks, &arch, &SurrogateConfig::default(), 1).unwrap());
    let db = populate(&tasks, &arch, &backend, 20, 2).unwrap();
    let cfg = LooConfig {
        losses: LossKind::ALL.iter().map(|&k| LossConfig::new(k)).collect(),
        ranker: RankerConfig {
            init: InitScheme::Glorot { bias: 0.1 },
            meta_batch: Some(64),
            ..RankerConfig::default()
        },
        train: TrainConfig {
            steps: 50,
            ..TrainConfig::default()
        },
        search: SearchConfig {
            max_iters: 20,
            embed_batch_size: 32,
            ..SearchConfig::default()
        },
        n_repeats: 1,
        run_search: true,
    };
    let report = leave_one_out(&tasks, &db, &arch, &backend, &cfg, 4).unwrap();
    assert_eq!(report.rows.len(), 9);
    assert_eq!(report.cells.len(), 9);
    for kind in LossKind::ALL {
        assert_eq!(report.rows.iter().filter(|r| r.loss == kind).count(), 3);
    }
    for r in &report.rows {
        assert_eq!(r.n_repeats, 1);
        assert_eq!(r.n_failed, 0, "{r:?}");
        assert!(r.spearman_mean.is_some_and(|s| (-1.0..=1.0).contains(&s)));
        assert!(r.search_mean.is_some_and(|q| (0.0..=1.0).contains(&q)));
        assert_eq!(r.spearman_std, None);
    }
    // Cells sharing a (task, repeat) share a seed across losses.
    for t in report.task_ids() {
        let seeds: Vec<u64> = report.cells.iter().filter(|c| c.task_id == t).map(|c| c.seed).collect();
        assert!(seeds.windows(2).all(|w| w[0] == w[1]));
    }

    let two = &tasks[..2];
    assert!(leave_one_out(two, &db, &arch, &backend, &cfg, 4).is_err());
}

#[test]
fn pca_of_batch_meta_features() {
    let tasks = generate_tasks(&TaskFamilyConfig {
        num_tasks: 3,
        samples: Range::new(300, 300),
        seed: 3,
        ..TaskFamilyConfig::default()
    })
    .unwrap();
    let cfg = RankerConfig {
        init: InitScheme::Glorot { bias: 0.1 },
        ..RankerConfig::default()
    };
    let w = RankerWeights::init(8, 21, &cfg, &mut rng_from(1, &[])).unwrap();
    let pca = pca_meta_features(&w, &tasks, 10, 64, 5).unwrap();
    assert_eq!(pca.points.len(), 30);
    assert!(pca.variances[0] >= pca.variances[1] && pca.variances[1] >= 0.0);
    // Projections are centred.
    let mean = |f: fn(&archrank_core::eval::PcaPoint) -> f64| pca.points.iter().map(f).sum::<f64>() / 30.0;
    assert!(mean(|p| p.pc1).abs() < 1e-9);
    assert!(mean(|p| p.pc2).abs() < 1e-9);
    // Untrained random towers already separate distinct mixtures.
    let emb = batch_embeddings(&w, &tasks, 10, 64, 5).unwrap();
    for row in emb.stability().unwrap() {
        assert!(row.nearest_other > 0.0);
    }
}

proptest! {
    #[test]
    fn spearman_ignores_monotone_transforms(xs in prop::collection::vec(-5.0f64..5.0, 3..30), ys in prop::collection::vec(-5.0f64..5.0, 30)) {
        let y = &ys[..xs.len()];
        if let Ok(base) = spearman(&xs, y) {
            let cubed: Vec<f64> = xs.iter().map(|v| v.powi(3) + 2.0).collect();
            let expd: Vec<f64> = y.iter().map(|v| v.exp()).collect();
            prop_assert!((spearman(&cubed, &expd).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn pearson_ignores_positive_affine_maps(xs in prop::collection::vec(-5.0f64..5.0, 3..30), ys in prop::collection::vec(-5.0f64..5.0, 30), a in 0.1f64..10.0, b in -10.0f64..10.0) {
        let y = &ys[..xs.len()];
        if let Ok(base) = pearson(&xs, y) {
            let mapped: Vec<f64> = xs.iter().map(|v| a * v + b).collect();
            prop_assert!((pearson(&mapped, y).unwrap() - base).abs() < 1e-9);
            let flipped: Vec<f64> = xs.iter().map(|v| -v).collect();
            prop_assert!((pearson(&flipped, y).unwrap() + base).abs() < 1e-12);
        }
    }
}
