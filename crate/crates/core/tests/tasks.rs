//! Task generator and batch sampling, checked with a reference classifier
//! and a binomial frequency test.

use archrank_core::seed::rng_from;
use archrank_core::tasks::{generate_tasks, sample_batch, Range, Split, TaskDataset, TaskFamilyConfig};

fn two_gaussians(label_noise: f64, samples: usize) -> TaskDataset {
    let cfg = TaskFamilyConfig {
        num_tasks: 1,
        input_dim: 4,
        classes: Range::new(2, 2),
        samples: Range::new(samples, samples),
        class_separation: Range::new(6.0, 6.0),
        cluster_spread: Range::new(1.0, 1.0),
        spread_jitter: 0.0,
        label_noise: Range::new(label_noise, label_noise),
        task_shift: 1.0,
        seed: 17,
    };
    generate_tasks(&cfg).unwrap().remove(0)
}

/// Binary logistic regression by full-batch gradient descent on
/// standardized features.
struct Logistic {
    mean: Vec<f64>,
    sd: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl Logistic {
    fn fit(task: &TaskDataset) -> Self {
        let train: Vec<_> = task.split_samples(Split::Train).collect();
        let d = task.input_dim();
        let n = train.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| train.iter().map(|s| s.x[k]).sum::<f64>() / n).collect();
        let sd: Vec<f64> = (0..d)
            .map(|k| (train.iter().map(|s| (s.x[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12))
            .collect();
        let mut model = Logistic { mean, sd, w: vec![0.0; d], b: 0.0 };
        for _ in 0..500 {
            let (mut gw, mut gb) = (vec![0.0; d], 0.0);
            for s in &train {
                let x = model.standardize(&s.x);
                let err = model.prob(&x) - s.y as f64;
                gw.iter_mut().zip(&x).for_each(|(g, xi)| *g += err * xi / n);
                gb += err / n;
            }
            model.w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= 0.5 * g);
            model.b -= 0.5 * gb;
        }
        model
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.sd).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn prob(&self, x: &[f64]) -> f64 {
        let t = self.b + self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        1.0 / (1.0 + (-t).exp())
    }

    fn accuracy(&self, task: &TaskDataset, split: Split) -> f64 {
        let samples: Vec<_> = task.split_samples(split).collect();
        let hits = samples
            .iter()
            .filter(|s| (self.prob(&self.standardize(&s.x)) > 0.5) as usize == s.y)
            .count();
        hits as f64 / samples.len() as f64
    }
}

#[test]
fn separated_gaussians_are_linearly_learnable() {
    let task = two_gaussians(0.0, 1000);
    let acc = Logistic::fit(&task).accuracy(&task, Split::Val);
    assert!(acc > 0.95, "val accuracy {acc}");
}

#[test]
fn fully_noised_labels_are_at_chance() {
    let task = two_gaussians(0.5, 10_000);
    let acc = Logistic::fit(&task).accuracy(&task, Split::Val);
    assert!((acc - 0.5).abs() < 0.05, "val accuracy {acc}");
}

#[test]
fn batch_frequencies_are_uniform_within_three_sigma() {
    let task = two_gaussians(0.0, 200);
    let n = task.split_indices(Split::Train).len();
    let (draws, batch) = (10_000usize, 8usize);
    let mut rng = rng_from(5, &[]);
    let mut counts = std::collections::HashMap::new();
    for _ in 0..draws {
        let got = sample_batch(&task, Split::Train, batch, &mut rng).unwrap();
        let mut seen = std::collections::HashSet::new();
        for s in got {
            let key = s as *const _ as usize;
            assert!(seen.insert(key), "sampled with replacement");
            *counts.entry(key).or_insert(0usize) += 1;
        }
    }
    assert_eq!(counts.len(), n, "some train sample never drawn");
    let p = batch as f64 / n as f64;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts.values() {
        assert!((*c as f64 - mean).abs() <= 3.0 * sigma, "count {c} vs expected {mean} +- {sigma}");
    }
}

#[test]
fn meta_feature_batches_never_touch_the_test_split() {
    let task = two_gaussians(0.0, 300);
    let mut rng = rng_from(6, &[]);
    let x = archrank_core::ranker::meta_batch_inputs(&task, Some(64), &mut rng).unwrap();
    for r in 0..x.rows() {
        let row = x.row(r);
        assert!(task.split_samples(Split::Train).any(|s| s.x == row));
        assert!(!task.split_samples(Split::Test).any(|s| s.x == row));
    }
}
