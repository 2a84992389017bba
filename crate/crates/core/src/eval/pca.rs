use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranker::{euclidean, meta_batch_inputs, RankerWeights};
use crate::seed;
use crate::tasks::TaskDataset;

/// Meta-features of `n_batches` random train-split batches per task.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings {
    pub task_ids: Vec<String>,
    /// `embeddings[t][b]` is the z of batch `b` of task `t`.
    pub embeddings: Vec<Vec<Vec<f64>>>,
}

pub fn batch_embeddings(
    weights: &RankerWeights,
    tasks: &[TaskDataset],
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<BatchEmbeddings> {
    if n_batches == 0 || batch_size == 0 {
        return Err(Error::invalid("n_batches and batch_size must be positive"));
    }
    let mut out = BatchEmbeddings {
        task_ids: Vec::new(),
        embeddings: Vec::new(),
    };
    for task in tasks {
        let mut rng = seed::rng_from(seed, &[0x9ca, seed::label(task.task_id())]);
        let mut zs = Vec::with_capacity(n_batches);
        for _ in 0..n_batches {
            let x = meta_batch_inputs(task, Some(batch_size), &mut rng)?;
            zs.push(weights.meta_features_of(&x)?.z);
        }
        out.task_ids.push(task.task_id().to_string());
        out.embeddings.push(zs);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub task_id: String,
    /// Mean pairwise distance between the task's batch embeddings.
    pub dispersion: f64,
    /// Distance from this task's centroid to the nearest other centroid.
    pub nearest_other: f64,
    pub mean_other: f64,
}

impl BatchEmbeddings {
    pub fn centroid(&self, t: usize) -> Vec<f64> {
        let zs = &self.embeddings[t];
        let mut c = vec![0.0; zs[0].len()];
        for z in zs {
            for (a, b) in c.iter_mut().zip(z) {
                *a += b / zs.len() as f64;
            }
        }
        c
    }

    pub fn stability(&self) -> Result<Vec<StabilityRow>> {
        if self.task_ids.len() < 2 {
            return Err(Error::invalid("stability needs at least 2 tasks"));
        }
        let centroids: Vec<Vec<f64>> = (0..self.task_ids.len()).map(|t| self.centroid(t)).collect();
        let mut rows = Vec::new();
        for (t, zs) in self.embeddings.iter().enumerate() {
            let (mut sum, mut n) = (0.0, 0usize);
            for a in 0..zs.len() {
                for b in a + 1..zs.len() {
                    sum += euclidean(&zs[a], &zs[b]);
                    n += 1;
                }
            }
            let others: Vec<f64> = (0..centroids.len())
                .filter(|&o| o != t)
                .map(|o| euclidean(&centroids[t], &centroids[o]))
                .collect();
            rows.push(StabilityRow {
                task_id: self.task_ids[t].clone(),
                dispersion: if n == 0 { 0.0 } else { sum / n as f64 },
                nearest_other: others.iter().cloned().fold(f64::INFINITY, f64::min),
                mean_other: others.iter().sum::<f64>() / others.len() as f64,
            });
        }
        Ok(rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaPoint {
    pub task_id: String,
    pub batch: usize,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub points: Vec<PcaPoint>,
    /// Variance along each of the two components, descending.
    pub variances: [f64; 2],
    pub components: [Vec<f64>; 2],
}

/// Projects vectors onto the top two eigenvectors of their covariance.
/// Missing components (dimension 1, or zero variance) project to 0.
pub fn pca_2d(vectors: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, [f64; 2], [Vec<f64>; 2])> {
    if vectors.len() < 2 {
        return Err(Error::invalid("PCA needs at least 2 vectors"));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::shape("pca", "vectors differ in dimension"));
    }
    let n = vectors.len();
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |r, c| vectors[r][c] - mean[c]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut variances = [0.0; 2];
    let mut components = [vec![0.0; d], vec![0.0; d]];
    for k in 0..2.min(d) {
        let idx = order[k];
        let lambda = eig.eigenvalues[idx].max(0.0);
        if lambda <= 1e-300 {
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map_or(0, |(i, _)| i);
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        variances[k] = lambda;
        components[k] = v;
    }
    let coords = (0..n)
        .map(|r| {
            let mut p = [0.0; 2];
            for k in 0..2 {
                p[k] = (0..d).map(|c| centered[(r, c)] * components[k][c]).sum();
            }
            p
        })
        .collect();
    Ok((coords, variances, components))
}

/// PCA of the batch meta-features of every task.
pub fn pca_meta_features(
    weights: &RankerWeights,
    tasks: &[TaskDataset],
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Pca> {
    let emb = batch_embeddings(weights, tasks, n_batches, batch_size, seed)?;
    let flat: Vec<Vec<f64>> = emb.embeddings.iter().flatten().cloned().collect();
    let (coords, variances, components) = pca_2d(&flat)?;
    let mut points = Vec::with_capacity(coords.len());
    let mut k = 0;
    for (t, zs) in emb.embeddings.iter().enumerate() {
        for b in 0..zs.len() {
            points.push(PcaPoint {
                task_id: emb.task_ids[t].clone(),
                batch: b,
                pc1: coords[k][0],
                pc2: coords[k][1],
            });
            k += 1;
        }
    }
    Ok(Pca {
        points,
        variances,
        components,
    })
}

pub fn write_pca_csv(pca: &Pca, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in &pca.points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_vectors_project_to_origin() {
        let v = vec![vec![1.0, 2.0, 3.0]; 5];
        let (coords, var, _) = pca_2d(&v).unwrap();
        assert!(coords.iter().all(|p| p[0] == 0.0 && p[1] == 0.0));
        assert_eq!(var, [0.0, 0.0]);
    }

    #[test]
    fn points_on_a_line_have_one_component() {
        let v: Vec<Vec<f64>> = (0..6).map(|k| vec![k as f64, 2.0 * k as f64, -(k as f64)]).collect();
        let (coords, var, comps) = pca_2d(&v).unwrap();
        assert!(var[0] > 0.0);
        assert!(var[1].abs() < 1e-12);
        assert!(coords.iter().all(|p| p[1].abs() < 1e-9));
        let norm: f64 = comps[0].iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        // Component along (1, 2, -1)/√6.
        assert!((comps[0][1] - 2.0 / 6f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn variances_are_ordered() {
        let v = vec![
            vec![2.0, 0.1, 0.0],
            vec![-2.0, -0.1, 0.3],
            vec![1.0, 0.5, -0.2],
            vec![-1.0, -0.4, 0.1],
        ];
        let (_, var, _) = pca_2d(&v).unwrap();
        assert!(var[0] >= var[1] && var[1] >= 0.0);
    }
}
