//! The predictor `v(u, z) = ρ(u, mean φ(x))`.
//!
//! `φ` embeds each task sample; the task embedding `z` is the mean of the
//! embeddings over a batch, which makes it invariant to sample order and,
//! in expectation, to batch size. `ρ` scores the concatenation `[u, z]`.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, BoundDense, Dense, Matrix, Tape, Var};
use crate::seed::{self, Rng};
use crate::tasks::{sample_batch, Split, TaskDataset};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitScheme {
    /// Every weight and bias i.i.d. uniform in `(-limit, limit)`.
    Uniform { limit: f64 },
    /// Glorot-uniform weights; every bias starts at `bias`.
    Glorot {
        #[serde(default)]
        bias: f64,
    },
    /// He-uniform weights; every bias starts at `bias`.
    He {
        #[serde(default)]
        bias: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankerConfig {
    pub phi_widths: Vec<usize>,
    pub rho_widths: Vec<usize>,
    pub init: InitScheme,
    /// Samples per meta-feature batch; `None` uses the whole train split.
    pub meta_batch: Option<usize>,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            phi_widths: vec![50, 50],
            rho_widths: vec![50, 10],
            init: InitScheme::Uniform { limit: 0.05 },
            meta_batch: Some(256),
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phi_widths.is_empty() || self.phi_widths.contains(&0) || self.rho_widths.contains(&0) {
            return Err(Error::invalid("ranker tower widths must be positive"));
        }
        if self.meta_batch == Some(0) {
            return Err(Error::invalid("meta_batch must be positive"));
        }
        match self.init {
            InitScheme::Uniform { limit } if !(limit >= 0.0 && limit.is_finite()) => {
                return Err(Error::invalid("init limit must be >= 0"));
            }
            InitScheme::Glorot { bias } | InitScheme::He { bias } if !bias.is_finite() => {
                return Err(Error::invalid("init bias must be finite"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Task embedding `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaFeatures {
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankerWeights {
    pub input_dim: usize,
    pub encoding_dim: usize,
    pub phi: Vec<Dense>,
    pub rho: Vec<Dense>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: u32,
    weights: RankerWeights,
}

/// Ranker weights loaded onto a tape.
#[derive(Clone, Debug)]
pub struct BoundRanker {
    pub phi: Vec<BoundDense>,
    pub rho: Vec<BoundDense>,
}

impl BoundRanker {
    /// `1×embed` mean of `φ` over the rows of `x`.
    pub fn meta_features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.phi {
            h = layer.apply(tape, h)?;
        }
        Ok(tape.mean_rows(h))
    }

    /// `n×1` scores for the rows of `u` under a shared `1×embed` `z`.
    pub fn scores(&self, tape: &mut Tape, u: Var, z: Var) -> Result<Var> {
        let n = tape.value(u).rows();
        let zb = tape.broadcast_rows(z, n)?;
        let mut h = tape.concat_cols(u, zb)?;
        for layer in &self.rho {
            h = layer.apply(tape, h)?;
        }
        Ok(h)
    }

    /// Vars in the order of [`RankerWeights::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.phi
            .iter()
            .chain(&self.rho)
            .flat_map(|d| [d.weight, d.bias])
            .collect()
    }
}

fn with_bias(mut layer: Dense, bias: f64) -> Dense {
    layer.bias.data_mut().iter_mut().for_each(|b| *b = bias);
    layer
}

impl RankerWeights {
    pub fn init(input_dim: usize, encoding_dim: usize, cfg: &RankerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 || encoding_dim == 0 {
            return Err(Error::invalid("ranker input dimensions must be positive"));
        }
        let mut make = |i: usize, o: usize, act: Activation| match cfg.init {
            InitScheme::Uniform { limit } => Dense::uniform(i, o, limit, act, rng),
            InitScheme::Glorot { bias } => with_bias(Dense::glorot(i, o, act, rng), bias),
            InitScheme::He { bias } => with_bias(Dense::he(i, o, act, rng), bias),
        };
        let mut phi = Vec::new();
        let mut width = input_dim;
        for &w in &cfg.phi_widths {
            phi.push(make(width, w, Activation::Relu));
            width = w;
        }
        let mut rho = Vec::new();
        let mut width_r = encoding_dim + width;
        for &w in &cfg.rho_widths {
            rho.push(make(width_r, w, Activation::Relu));
            width_r = w;
        }
        rho.push(make(width_r, 1, Activation::Identity));
        Ok(RankerWeights {
            input_dim,
            encoding_dim,
            phi,
            rho,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.phi.last().map_or(0, Dense::outputs)
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.phi
            .iter()
            .chain(&self.rho)
            .flat_map(|d| [&d.weight, &d.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.phi
            .iter_mut()
            .chain(self.rho.iter_mut())
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (tower, layers) in [("phi", &self.phi), ("rho", &self.rho)] {
            for k in 0..layers.len() {
                names.push(format!("{tower}.{k}.weight"));
                names.push(format!("{tower}.{k}.bias"));
            }
        }
        names
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundRanker {
        BoundRanker {
            phi: self.phi.iter().map(|d| d.bind(tape)).collect(),
            rho: self.rho.iter().map(|d| d.bind(tape)).collect(),
        }
    }

    pub fn meta_features(&self, samples: &[&[f64]]) -> Result<MetaFeatures> {
        if samples.is_empty() {
            return Err(Error::Empty("meta_features"));
        }
        if samples.iter().any(|s| s.len() != self.input_dim) {
            return Err(Error::shape("meta_features", "sample dimension"));
        }
        let x = Matrix::from_row_slices(samples.iter().copied())?;
        self.meta_features_of(&x)
    }

    /// Meta-features of the rows of `x` without recording a tape.
    pub fn meta_features_of(&self, x: &Matrix) -> Result<MetaFeatures> {
        let mut h = x.clone();
        for layer in &self.phi {
            h = layer.forward(&h)?;
        }
        let n = h.rows() as f64;
        let mut z = vec![0.0; h.cols()];
        for r in 0..h.rows() {
            for (a, b) in z.iter_mut().zip(h.row(r)) {
                *a += b;
            }
        }
        z.iter_mut().for_each(|v| *v /= n);
        Ok(MetaFeatures { z })
    }

    fn check_score_dims(&self, u_len: usize, z: &MetaFeatures) -> Result<()> {
        if u_len != self.encoding_dim || z.z.len() != self.embed_dim() {
            return Err(Error::shape(
                "score",
                format!(
                    "u has {u_len} (want {}), z has {} (want {})",
                    self.encoding_dim,
                    z.z.len(),
                    self.embed_dim()
                ),
            ));
        }
        Ok(())
    }

    pub fn score(&self, u: &[f64], z: &MetaFeatures) -> Result<f64> {
        self.check_score_dims(u.len(), z)?;
        let mut h: Vec<f64> = u.iter().chain(&z.z).copied().collect();
        for layer in &self.rho {
            h = crate::numerics::forward_fc(&h, &layer.weight, layer.bias.data(), layer.activation)?;
        }
        Ok(h[0])
    }

    /// Scores for many encodings (rows of `u`) under one `z`.
    pub fn score_batch(&self, u: &Matrix, z: &MetaFeatures) -> Result<Vec<f64>> {
        self.check_score_dims(u.cols(), z)?;
        let mut h = Matrix::zeros(u.rows(), u.cols() + z.z.len());
        for r in 0..u.rows() {
            let row = h.row_mut(r);
            row[..u.cols()].copy_from_slice(u.row(r));
            row[u.cols()..].copy_from_slice(&z.z);
        }
        for layer in &self.rho {
            h = layer.forward(&h)?;
        }
        Ok(h.into_data())
    }

    /// `v(u, z)` and `∂v/∂u` with weights and `z` held fixed.
    pub fn score_and_grad_u(&self, u: &[f64], z: &MetaFeatures) -> Result<(f64, Vec<f64>)> {
        self.check_score_dims(u.len(), z)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let uv = tape.leaf(Matrix::row_vector(u.to_vec())?);
        let zv = tape.leaf(Matrix::row_vector(z.z.clone())?);
        let v = bound.scores(&mut tape, uv, zv)?;
        let grads = tape.backward(v)?;
        Ok((tape.scalar(v), grads.wrt(uv, tape.value(uv)).into_data()))
    }

    pub fn write_checkpoint(&self, mut out: impl Write) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            weights: self.clone(),
        };
        serde_json::to_writer(&mut out, &ck)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_checkpoint(input: impl std::io::Read) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(input)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {}", ck.version)));
        }
        let w = ck.weights;
        let consistent = w.phi.first().is_some_and(|d| d.inputs() == w.input_dim)
            && w.phi.windows(2).all(|p| p[0].outputs() == p[1].inputs())
            && w.rho.first().is_some_and(|d| d.inputs() == w.encoding_dim + w.embed_dim())
            && w.rho.windows(2).all(|p| p[0].outputs() == p[1].inputs())
            && w.rho.last().is_some_and(|d| d.outputs() == 1)
            && w.phi.iter().chain(&w.rho).all(|d| d.bias.shape() == (1, d.outputs()));
        if !consistent || !w.is_finite() {
            return Err(Error::invalid("checkpoint tensors have inconsistent shapes"));
        }
        Ok(w)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RankerWeights::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Inputs of a meta-feature batch drawn from the train split; the whole
/// split when `batch` is `None` or exceeds it.
pub fn meta_batch_inputs(task: &TaskDataset, batch: Option<usize>, rng: &mut Rng) -> Result<Matrix> {
    let n = task.split_indices(Split::Train).len();
    match batch {
        Some(b) if b < n => {
            let picked = sample_batch(task, Split::Train, b, rng)?;
            Matrix::from_row_slices(picked.iter().map(|s| s.x.as_slice()))
        }
        _ => Matrix::from_row_slices(task.split_samples(Split::Train).map(|s| s.x.as_slice())),
    }
}

/// Mean meta-features of a task over `n_batches` random batches.
pub fn task_centroid(
    weights: &RankerWeights,
    task: &TaskDataset,
    n_batches: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if n_batches == 0 {
        return Err(Error::invalid("n_batches must be positive"));
    }
    let mut c = vec![0.0; weights.embed_dim()];
    for _ in 0..n_batches {
        let x = meta_batch_inputs(task, Some(batch_size), rng)?;
        let z = weights.meta_features_of(&x)?;
        for (a, b) in c.iter_mut().zip(&z.z) {
            *a += b / n_batches as f64;
        }
    }
    Ok(c)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance between the two tasks' meta-feature centroids. Both centroids
/// draw their batches from one seed taken from `rng`, so the distance is
/// exactly symmetric and `d(a, a) = 0`.
pub fn task_embedding_distance(
    weights: &RankerWeights,
    task_a: &TaskDataset,
    task_b: &TaskDataset,
    n_batches: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let s: u64 = rand::Rng::random(rng);
    let ca = task_centroid(weights, task_a, n_batches, batch_size, &mut Rng::seed_from_u64(s))?;
    let cb = task_centroid(weights, task_b, n_batches, batch_size, &mut Rng::seed_from_u64(s))?;
    Ok(euclidean(&ca, &cb))
}

/// Convenience: fresh weights for a task family and arch.
pub fn init_for(tasks: &[TaskDataset], encoding_dim: usize, cfg: &RankerConfig, seed: u64) -> Result<RankerWeights> {
    let d_in = tasks.first().ok_or(Error::Empty("init_for"))?.input_dim();
    RankerWeights::init(d_in, encoding_dim, cfg, &mut seed::rng_from(seed, &[0x1417]))
}
