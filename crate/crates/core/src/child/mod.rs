//! The continuously parametrized child-model family.
//!
//! An encoding `u` holds three groups of logits: `gamma` mixes the feature
//! modules, each row of `alpha` mixes the base layers of one parametrized
//! layer, and each row of `beta` softmaxes into (apply, skip) gates for one
//! layer. Flat order is gamma, alpha row-major, beta row-major.

mod network;
mod surrogate;

use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{softmax, Activation, Matrix, Tape, Var};
use crate::seed::Rng;
use crate::tasks::TaskDataset;

pub use network::{ChildNet, RealTrainBackend, RealTrainConfig};
pub use surrogate::{AnalyticBackend, SurrogateConfig};

static CHILD_TRAININGS: AtomicU64 = AtomicU64::new(0);

/// Number of child models trained by this process so far.
pub fn child_trainings() -> u64 {
    CHILD_TRAININGS.load(Ordering::SeqCst)
}

pub(crate) fn count_child_training() {
    CHILD_TRAININGS.fetch_add(1, Ordering::SeqCst);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpace {
    pub feature_modules: usize,
    pub layers: usize,
    pub base_sizes: Vec<usize>,
    pub base_activations: Vec<Activation>,
    pub hidden_width: usize,
}

impl Default for ArchSpace {
    fn default() -> Self {
        ArchSpace::desk()
    }
}

/// Identifies an arch space; stored in DB headers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchFingerprint {
    pub feature_modules: usize,
    pub layers: usize,
    pub base_count: usize,
    pub sizes_hash: String,
}

impl std::fmt::Display for ArchFingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "G={} L={} B={} sizes={}",
            self.feature_modules, self.layers, self.base_count, self.sizes_hash
        )
    }
}

impl ArchSpace {
    /// 3 feature modules, 3 layers of 4 bases ({8,16} x {relu,tanh}): 21 dims.
    pub fn desk() -> Self {
        ArchSpace {
            feature_modules: 3,
            layers: 3,
            base_sizes: vec![8, 16],
            base_activations: vec![Activation::Relu, Activation::Tanh],
            hidden_width: 32,
        }
    }

    /// 7 feature modules, 7 layers of 12 bases: 105 dims.
    pub fn paper_shape() -> Self {
        ArchSpace {
            feature_modules: 7,
            layers: 7,
            base_sizes: vec![8, 16, 32, 64, 128, 256],
            base_activations: vec![Activation::Relu, Activation::Tanh],
            hidden_width: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_modules == 0
            || self.layers == 0
            || self.base_sizes.is_empty()
            || self.base_activations.is_empty()
            || self.hidden_width == 0
            || self.base_sizes.contains(&0)
        {
            return Err(Error::invalid(format!("degenerate arch space {self:?}")));
        }
        Ok(())
    }

    pub fn base_count(&self) -> usize {
        self.base_sizes.len() * self.base_activations.len()
    }

    /// `(width, activation)` of base layer `b`; sizes vary slowest.
    pub fn base_layer(&self, b: usize) -> (usize, Activation) {
        let na = self.base_activations.len();
        (self.base_sizes[b / na], self.base_activations[b % na])
    }

    pub fn encoding_dim(&self) -> usize {
        self.feature_modules + self.layers * self.base_count() + 2 * self.layers
    }

    /// Softmax group lengths in flat order.
    pub fn segments(&self) -> Vec<usize> {
        let mut s = vec![self.feature_modules];
        s.extend(std::iter::repeat(self.base_count()).take(self.layers));
        s.extend(std::iter::repeat(2).take(self.layers));
        s
    }

    pub fn fingerprint(&self) -> ArchFingerprint {
        let acts: Vec<&str> = self
            .base_activations
            .iter()
            .map(|a| match a {
                Activation::Relu => "relu",
                Activation::Tanh => "tanh",
                Activation::Identity => "identity",
            })
            .collect();
        let desc = format!(
            "sizes={:?};acts={:?};hidden={}",
            self.base_sizes, acts, self.hidden_width
        );
        let digest = Sha256::digest(desc.as_bytes());
        let sizes_hash = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        ArchFingerprint {
            feature_modules: self.feature_modules,
            layers: self.layers,
            base_count: self.base_count(),
            sizes_hash,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchEncoding {
    pub gamma: Vec<f64>,
    /// `layers × base_count`
    pub alpha: Matrix,
    /// `layers × 2`: column 0 applies the layer, column 1 skips it.
    pub beta: Matrix,
}

impl ArchEncoding {
    pub fn zeros(arch: &ArchSpace) -> Self {
        ArchEncoding {
            gamma: vec![0.0; arch.feature_modules],
            alpha: Matrix::zeros(arch.layers, arch.base_count()),
            beta: Matrix::zeros(arch.layers, 2),
        }
    }

    /// I.i.d. standard-normal logits.
    pub fn random(arch: &ArchSpace, rng: &mut Rng) -> Self {
        let flat: Vec<f64> = (0..arch.encoding_dim())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        ArchEncoding::from_flat(arch, &flat).expect("length matches by construction")
    }

    pub fn from_flat(arch: &ArchSpace, u: &[f64]) -> Result<Self> {
        if u.len() != arch.encoding_dim() {
            return Err(Error::shape(
                "ArchEncoding::from_flat",
                format!("{} values, arch expects {}", u.len(), arch.encoding_dim()),
            ));
        }
        if !u.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("encoding has non-finite entries"));
        }
        let g = arch.feature_modules;
        let a = arch.layers * arch.base_count();
        Ok(ArchEncoding {
            gamma: u[..g].to_vec(),
            alpha: Matrix::from_vec(arch.layers, arch.base_count(), u[g..g + a].to_vec())?,
            beta: Matrix::from_vec(arch.layers, 2, u[g + a..].to_vec())?,
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut u = self.gamma.clone();
        u.extend_from_slice(self.alpha.data());
        u.extend_from_slice(self.beta.data());
        u
    }
}

/// Softmaxed mixing weights of an encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct MixWeights {
    pub feature_weights: Vec<f64>,
    pub layer_weights: Matrix,
    pub gate_weights: Matrix,
}

impl MixWeights {
    /// Concatenation in flat encoding order; the point `s(u)` on the
    /// product of simplices.
    pub fn concat(&self) -> Vec<f64> {
        let mut s = self.feature_weights.clone();
        s.extend_from_slice(self.layer_weights.data());
        s.extend_from_slice(self.gate_weights.data());
        s
    }
}

fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let s = softmax(m.row(r))?;
        out.row_mut(r).copy_from_slice(&s);
    }
    Ok(out)
}

pub fn mix_weights(encoding: &ArchEncoding) -> Result<MixWeights> {
    Ok(MixWeights {
        feature_weights: softmax(&encoding.gamma)?,
        layer_weights: softmax_rows(&encoding.alpha)?,
        gate_weights: softmax_rows(&encoding.beta)?,
    })
}

/// Differentiable `s(u)` for a `1×dim` (or `n×dim`) encoding node.
pub fn mix_on_tape(tape: &mut Tape, u: Var, arch: &ArchSpace) -> Result<Var> {
    tape.segment_softmax(u, &arch.segments())
}

/// How a measured performance `p` is produced for a (encoding, task) pair.
#[derive(Clone, Debug)]
pub enum PerfBackend {
    Analytic(AnalyticBackend),
    RealTrain(RealTrainBackend),
}

impl PerfBackend {
    pub fn name(&self) -> &'static str {
        match self {
            PerfBackend::Analytic(_) => "analytic",
            PerfBackend::RealTrain(_) => "real_train",
        }
    }

    /// Validation-split performance as stored in the experiment DB.
    pub fn measure(&self, encoding: &ArchEncoding, task: &TaskDataset, seed: u64) -> Result<f64> {
        match self {
            PerfBackend::Analytic(b) => {
                let mut rng = crate::seed::rng_from(seed, &[]);
                b.surrogate_perf(encoding, task.task_id(), &mut rng)
            }
            PerfBackend::RealTrain(b) => {
                b.build_and_train_child(encoding, task, seed, crate::tasks::Split::Val)
            }
        }
    }

    /// Final quality of a found architecture: the noiseless surrogate value,
    /// or the test-split accuracy of a freshly trained child.
    pub fn final_performance(
        &self,
        encoding: &ArchEncoding,
        task: &TaskDataset,
        seed: u64,
    ) -> Result<f64> {
        match self {
            PerfBackend::Analytic(b) => b.expected_perf(encoding, task.task_id()),
            PerfBackend::RealTrain(b) => {
                b.build_and_train_child(encoding, task, seed, crate::tasks::Split::Test)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encoding_dims() {
        assert_eq!(ArchSpace::desk().encoding_dim(), 21);
        assert_eq!(ArchSpace::paper_shape().encoding_dim(), 105);
        assert_eq!(ArchSpace::paper_shape().base_count(), 12);
        assert_eq!(ArchSpace::desk().segments(), vec![3, 4, 4, 4, 2, 2, 2]);
    }

    #[test]
    fn uniform_and_saturated_mixtures() {
        let arch = ArchSpace::paper_shape();
        let w = mix_weights(&ArchEncoding::zeros(&arch)).unwrap();
        for r in 0..arch.layers {
            for &v in w.layer_weights.row(r) {
                assert!((v - 1.0 / 12.0).abs() < 1e-15);
            }
        }
        let mut enc = ArchEncoding::zeros(&arch);
        enc.alpha.set(0, 0, 10.0);
        let w = mix_weights(&enc).unwrap();
        let e10 = 10f64.exp();
        assert!((w.layer_weights.get(0, 0) - e10 / (e10 + 11.0)).abs() < 1e-15);
        let desk = ArchSpace::desk();
        let mut enc = ArchEncoding::zeros(&desk);
        enc.alpha.set(0, 0, 10.0);
        let first = mix_weights(&enc).unwrap().layer_weights.get(0, 0);
        assert!((first - e10 / (e10 + 3.0)).abs() < 1e-15);
        // Past 0.9999 only with at most three base layers.
        let three = crate::numerics::softmax(&[10.0, 0.0, 0.0]).unwrap();
        assert!(three[0] > 0.9999);
    }

    #[test]
    fn gamma_hand_softmax() {
        let arch = ArchSpace::desk();
        let mut enc = ArchEncoding::zeros(&arch);
        enc.gamma = vec![1f64.ln(), 2f64.ln(), 3f64.ln()];
        let w = mix_weights(&enc).unwrap();
        for (a, b) in w.feature_weights.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tape_mix_matches_plain_mix() {
        let arch = ArchSpace::desk();
        let mut rng = crate::seed::rng_from(5, &[]);
        let enc = ArchEncoding::random(&arch, &mut rng);
        let mut t = Tape::new();
        let u = t.leaf(Matrix::row_vector(enc.flatten()).unwrap());
        let s = mix_on_tape(&mut t, u, &arch).unwrap();
        let plain = mix_weights(&enc).unwrap().concat();
        for (a, b) in t.value(s).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fingerprints_distinguish_spaces() {
        let a = ArchSpace::desk().fingerprint();
        let mut other = ArchSpace::desk();
        other.base_sizes = vec![8, 32];
        assert_ne!(a, other.fingerprint());
        assert_eq!(a, ArchSpace::desk().fingerprint());
    }

    #[test]
    fn from_flat_rejects_wrong_length() {
        assert!(ArchEncoding::from_flat(&ArchSpace::desk(), &[0.0; 20]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_round_trip(u in prop::collection::vec(-50.0f64..50.0, 21)) {
            let arch = ArchSpace::desk();
            let enc = ArchEncoding::from_flat(&arch, &u).unwrap();
            prop_assert_eq!(enc.flatten(), u);
        }

        #[test]
        fn mixture_rows_sum_to_one(u in prop::collection::vec(-30.0f64..30.0, 21)) {
            let arch = ArchSpace::desk();
            let w = mix_weights(&ArchEncoding::from_flat(&arch, &u).unwrap()).unwrap();
            prop_assert!((w.feature_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for m in [&w.layer_weights, &w.gate_weights] {
                for r in 0..m.rows() {
                    prop_assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(m.row(r).iter().all(|&v| v >= 0.0));
                }
            }
        }
    }
}
