use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{count_child_training, mix_weights, ArchEncoding, ArchSpace, MixWeights};
use crate::error::{Error, Result};
use crate::numerics::{Activation, BoundDense, Dense, Matrix, Tape, Var};
use crate::seed::{self, Rng};
use crate::tasks::{Split, TaskDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RealTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for RealTrainConfig {
    fn default() -> Self {
        RealTrainConfig {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 32,
        }
    }
}

/// Trains child networks for real. Feature modules are frozen random
/// `tanh` projections of the input to the common hidden width.
#[derive(Clone, Debug)]
pub struct RealTrainBackend {
    arch: ArchSpace,
    cfg: RealTrainConfig,
    features: Arc<Vec<Dense>>,
}

/// One base layer: `act(FC(h → width))` projected back to the hidden width.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseLayer {
    pub hidden: Dense,
    pub project: Dense,
}

/// A child network for a fixed encoding. Only base layers and the head are
/// trainable.
#[derive(Clone, Debug)]
pub struct ChildNet {
    features: Arc<Vec<Dense>>,
    mix: MixWeights,
    layers: Vec<Vec<BaseLayer>>,
    head: Dense,
}

struct BoundChild {
    layers: Vec<Vec<(BoundDense, BoundDense)>>,
    head: BoundDense,
}

impl ChildNet {
    pub fn new(
        arch: &ArchSpace,
        features: Arc<Vec<Dense>>,
        encoding: &ArchEncoding,
        num_classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if features.len() != arch.feature_modules {
            return Err(Error::shape("ChildNet::new", "feature module count"));
        }
        let h = arch.hidden_width;
        let layers = (0..arch.layers)
            .map(|_| {
                (0..arch.base_count())
                    .map(|b| {
                        let (width, act) = arch.base_layer(b);
                        BaseLayer {
                            hidden: Dense::glorot(h, width, act, rng),
                            project: Dense::glorot(width, h, Activation::Identity, rng),
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(ChildNet {
            features,
            mix: mix_weights(encoding)?,
            layers,
            head: Dense::glorot(h, num_classes, Activation::Identity, rng),
        })
    }

    /// Same network with the base layers of every parametrized layer
    /// reordered by `perm` (new position `k` holds old base `perm[k]`),
    /// together with the matching mixture weights.
    pub fn permute_basis(&self, perm: &[usize]) -> Result<ChildNet> {
        let b = self.mix.layer_weights.cols();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..b).collect::<Vec<_>>() {
            return Err(Error::invalid("not a permutation of the base layers"));
        }
        let mut out = self.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            for (k, &old) in perm.iter().enumerate() {
                out.layers[l][k] = layer[old].clone();
                out.mix.layer_weights.set(l, k, self.mix.layer_weights.get(l, old));
            }
        }
        Ok(out)
    }

    /// Feature-module mixture for a batch of inputs (frozen, no tape).
    fn embed(&self, x: &Matrix) -> Result<Matrix> {
        let mut h: Option<Matrix> = None;
        for (w, module) in self.mix.feature_weights.iter().zip(self.features.iter()) {
            let y = module.forward(x)?;
            match h.as_mut() {
                None => h = Some(y.map(|v| v * w)),
                Some(acc) => acc.axpy(*w, &y),
            }
        }
        h.ok_or(Error::Empty("feature modules"))
    }

    fn bind(&self, tape: &mut Tape) -> BoundChild {
        BoundChild {
            layers: self
                .layers
                .iter()
                .map(|l| l.iter().map(|b| (b.hidden.bind(tape), b.project.bind(tape))).collect())
                .collect(),
            head: self.head.bind(tape),
        }
    }

    fn logits(&self, tape: &mut Tape, bound: &BoundChild, embedded: Var) -> Result<Var> {
        let mut h = embedded;
        for (l, bases) in bound.layers.iter().enumerate() {
            let mut mixed: Option<Var> = None;
            for (b, (hidden, project)) in bases.iter().enumerate() {
                let o = hidden.apply(tape, h)?;
                let o = project.apply(tape, o)?;
                let o = tape.scale(o, self.mix.layer_weights.get(l, b));
                mixed = Some(match mixed {
                    None => o,
                    Some(acc) => tape.add(acc, o)?,
                });
            }
            let mixed = mixed.ok_or(Error::Empty("base layers"))?;
            let apply = tape.scale(mixed, self.mix.gate_weights.get(l, 0));
            let skip = tape.scale(h, self.mix.gate_weights.get(l, 1));
            h = tape.add(apply, skip)?;
        }
        bound.head.apply(tape, h)
    }

    /// Class logits for a batch of inputs.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let e = tape.leaf(self.embed(x)?);
        let out = self.logits(&mut tape, &bound, e)?;
        Ok(tape.value(out).clone())
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for b in layer {
                out.extend([
                    &mut b.hidden.weight,
                    &mut b.hidden.bias,
                    &mut b.project.weight,
                    &mut b.project.bias,
                ]);
            }
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    /// One plain SGD step on mean cross-entropy; returns the batch loss.
    fn sgd_step(&mut self, embedded: Matrix, labels: &[usize], lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let e = tape.leaf(embedded);
        let logits = self.logits(&mut tape, &bound, e)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let mut grads = tape.backward(loss)?;
        let mut vars = Vec::new();
        for layer in &bound.layers {
            for (h, p) in layer {
                vars.extend([h.weight, h.bias, p.weight, p.bias]);
            }
        }
        vars.extend([bound.head.weight, bound.head.bias]);
        let loss_value = tape.scalar(loss);
        for (param, var) in self.params_mut().into_iter().zip(vars) {
            if let Some(g) = grads.take(var) {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient("child".into()));
                }
                param.axpy(-lr, &g);
            }
        }
        Ok(loss_value)
    }

    pub fn accuracy(&self, task: &TaskDataset, split: Split) -> Result<f64> {
        let idx = task.split_indices(split);
        if idx.is_empty() {
            return Err(Error::DegenerateTask {
                task: task.task_id().to_string(),
                reason: format!("empty {split:?} split"),
            });
        }
        let x = Matrix::from_row_slices(idx.iter().map(|&i| task.samples()[i].x.as_slice()))?;
        let logits = self.forward(&x)?;
        let correct = idx
            .iter()
            .enumerate()
            .filter(|(r, &i)| argmax(logits.row(*r)) == task.samples()[i].y)
            .count();
        Ok(correct as f64 / idx.len() as f64)
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

impl RealTrainBackend {
    pub fn new(arch: ArchSpace, input_dim: usize, cfg: RealTrainConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
            return Err(Error::invalid(format!("bad child training config {cfg:?}")));
        }
        let mut rng = seed::rng_from(seed, &[0xfea7]);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let features = (0..arch.feature_modules)
            .map(|_| {
                let mut d = Dense::glorot(input_dim, arch.hidden_width, Activation::Tanh, &mut rng);
                d.bias = Matrix::from_vec(
                    1,
                    arch.hidden_width,
                    (0..arch.hidden_width).map(|_| rng.random_range(-scale..scale)).collect(),
                )?;
                Ok(d)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RealTrainBackend {
            arch,
            cfg,
            features: Arc::new(features),
        })
    }

    pub fn arch(&self) -> &ArchSpace {
        &self.arch
    }

    pub fn build(&self, encoding: &ArchEncoding, task: &TaskDataset, seed: u64) -> Result<ChildNet> {
        let mut rng = seed::rng_from(seed, &[0xc41d]);
        ChildNet::new(&self.arch, self.features.clone(), encoding, task.num_classes(), &mut rng)
    }

    /// Builds the child for `encoding`, trains it on the train split and
    /// returns its accuracy on `eval_split`.
    pub fn build_and_train_child(
        &self,
        encoding: &ArchEncoding,
        task: &TaskDataset,
        seed: u64,
        eval_split: Split,
    ) -> Result<f64> {
        let degenerate = |reason: &str| Error::DegenerateTask {
            task: task.task_id().to_string(),
            reason: reason.to_string(),
        };
        let train = task.split_indices(Split::Train);
        if train.is_empty() || task.split_indices(Split::Val).is_empty() {
            return Err(degenerate("empty train or val split"));
        }
        if task.input_dim() != self.features[0].inputs() {
            return Err(degenerate("input dimension does not match the feature modules"));
        }
        count_child_training();
        let mut net = self.build(encoding, task, seed)?;
        let x = Matrix::from_row_slices(train.iter().map(|&i| task.samples()[i].x.as_slice()))?;
        let embedded = net.embed(&x)?;
        let labels: Vec<usize> = train.iter().map(|&i| task.samples()[i].y).collect();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = seed::rng_from(seed, &[0x5eed]);
        for _ in 0..self.cfg.epochs {
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch = Matrix::from_row_slices(chunk.iter().map(|&r| embedded.row(r)))?;
                let y: Vec<usize> = chunk.iter().map(|&r| labels[r]).collect();
                net.sgd_step(batch, &y, self.cfg.learning_rate)?;
            }
        }
        net.accuracy(task, eval_split)
    }
}
