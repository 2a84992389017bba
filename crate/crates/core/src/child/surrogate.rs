use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{mix_on_tape, mix_weights, ArchEncoding, ArchSpace};
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Matrix, Tape};
use crate::seed::{self, Rng};
use crate::tasks::{Split, TaskDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    /// τ in `exp(-‖s(u) - c‖² / τ)`.
    pub temperature: f64,
    pub noise_sigma: f64,
    /// Scale of the optimum logits shared by every task.
    pub shared_scale: f64,
    /// Scale of the task-dependent optimum shift, driven by the task's
    /// input statistics.
    pub task_scale: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            temperature: 1.0,
            noise_sigma: 0.01,
            shared_scale: 1.5,
            task_scale: 0.6,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("surrogate temperature must be > 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.shared_scale >= 0.0 && self.task_scale >= 0.0) {
            return Err(Error::invalid("surrogate scales must be >= 0"));
        }
        Ok(())
    }
}

/// Smooth stand-in for child training:
/// `p = clip01(exp(-‖s(u) - c_task‖² / τ) + ε)`, `ε ~ N(0, σ²)`,
/// where `s(u)` is the concatenated mixture weights and `c_task` a per-task
/// point on the same product of simplices.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticBackend {
    arch: ArchSpace,
    temperature: f64,
    noise_sigma: f64,
    optima: BTreeMap<String, Vec<f64>>,
}

impl AnalyticBackend {
    pub fn new(
        arch: ArchSpace,
        temperature: f64,
        noise_sigma: f64,
        optima: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        let dim = arch.encoding_dim();
        if let Some((id, _)) = optima.iter().find(|(_, c)| c.len() != dim) {
            return Err(Error::shape(
                "AnalyticBackend::new",
                format!("optimum for `{id}` has wrong dimension"),
            ));
        }
        SurrogateConfig {
            temperature,
            noise_sigma,
            ..SurrogateConfig::default()
        }
        .validate()?;
        Ok(AnalyticBackend {
            arch,
            temperature,
            noise_sigma,
            optima,
        })
    }

    /// Optimum logits = shared logits + a fixed random linear map of the
    /// task's mean training input, softmaxed per group. Tasks whose inputs
    /// look alike get nearby optima.
    pub fn for_tasks(
        tasks: &[TaskDataset],
        arch: &ArchSpace,
        cfg: &SurrogateConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let dim = arch.encoding_dim();
        let mut rng: Rng = seed::rng_from(seed, &[0x5u64]);
        let shared: Vec<f64> = (0..dim)
            .map(|_| cfg.shared_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let d_in = tasks.first().map_or(1, TaskDataset::input_dim);
        let dist = Normal::new(0.0, cfg.task_scale / (d_in as f64).sqrt())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let map: Vec<f64> = (0..dim * d_in).map(|_| dist.sample(&mut rng)).collect();

        let mut optima = BTreeMap::new();
        for task in tasks {
            if task.input_dim() != d_in {
                return Err(Error::invalid("tasks disagree on input dimension"));
            }
            let n = task.split_indices(Split::Train).len() as f64;
            let mut mean = vec![0.0; d_in];
            for s in task.split_samples(Split::Train) {
                for (m, x) in mean.iter_mut().zip(&s.x) {
                    *m += x / n;
                }
            }
            let mut logits: Vec<f64> = shared
                .iter()
                .enumerate()
                .map(|(k, b)| b + map[k * d_in..(k + 1) * d_in].iter().zip(&mean).map(|(a, m)| a * m).sum::<f64>())
                .collect();
            let mut start = 0;
            for len in arch.segments() {
                softmax_in_place(&mut logits[start..start + len]);
                start += len;
            }
            optima.insert(task.task_id().to_string(), logits);
        }
        AnalyticBackend::new(arch.clone(), cfg.temperature, cfg.noise_sigma, optima)
    }

    pub fn arch(&self) -> &ArchSpace {
        &self.arch
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn optimum(&self, task_id: &str) -> Result<&[f64]> {
        self.optima
            .get(task_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    /// Noiseless surrogate value.
    pub fn expected_perf(&self, encoding: &ArchEncoding, task_id: &str) -> Result<f64> {
        let c = self.optimum(task_id)?;
        let s = mix_weights(encoding)?.concat();
        let dist2: f64 = s.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((-dist2 / self.temperature).exp())
    }

    pub fn surrogate_perf(
        &self,
        encoding: &ArchEncoding,
        task_id: &str,
        rng: &mut Rng,
    ) -> Result<f64> {
        let mean = self.expected_perf(encoding, task_id)?;
        let eps = if self.noise_sigma > 0.0 {
            self.noise_sigma * Distribution::<f64>::sample(&StandardNormal, rng)
        } else {
            0.0
        };
        Ok((mean + eps).clamp(0.0, 1.0))
    }

    /// Noiseless value and its gradient with respect to the flat encoding.
    pub fn value_and_grad(&self, u: &[f64], task_id: &str) -> Result<(f64, Vec<f64>)> {
        let c = self.optimum(task_id)?;
        if u.len() != self.arch.encoding_dim() {
            return Err(Error::shape("surrogate gradient", "encoding dimension"));
        }
        let mut tape = Tape::new();
        let uv = tape.leaf(Matrix::row_vector(u.to_vec())?);
        let cv = tape.leaf(Matrix::row_vector(c.to_vec())?);
        let s = mix_on_tape(&mut tape, uv, &self.arch)?;
        let diff = tape.sub(s, cv)?;
        let sq = tape.square(diff);
        let d2 = tape.sum(sq);
        let scaled = tape.scale(d2, -1.0 / self.temperature);
        let p = tape.exp(scaled);
        let grads = tape.backward(p)?;
        let g = grads.wrt(uv, tape.value(uv)).into_data();
        Ok((tape.scalar(p), g))
    }
}
