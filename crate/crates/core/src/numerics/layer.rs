use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Activation, Matrix, Tape, Var};
use crate::error::Result;
use crate::seed::Rng;

/// Fully connected layer; `weight` is `out×in`, `bias` is `1×out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
}

impl Dense {
    /// Weights and biases i.i.d. uniform in `(-limit, limit)`.
    pub fn uniform(inputs: usize, outputs: usize, limit: f64, act: Activation, rng: &mut Rng) -> Self {
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-limit..limit)).collect()
        };
        let weight = Matrix::from_vec(outputs, inputs, draw(outputs * inputs)).expect("positive dims");
        let bias = Matrix::from_vec(1, outputs, draw(outputs)).expect("positive dims");
        Dense {
            weight,
            bias,
            activation: act,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, act: Activation, rng: &mut Rng) -> Self {
        Dense::zero_bias(inputs, outputs, (6.0 / (inputs + outputs) as f64).sqrt(), act, rng)
    }

    /// He-uniform weights (variance `2 / inputs`), zero bias.
    pub fn he(inputs: usize, outputs: usize, act: Activation, rng: &mut Rng) -> Self {
        Dense::zero_bias(inputs, outputs, (6.0 / inputs as f64).sqrt(), act, rng)
    }

    fn zero_bias(inputs: usize, outputs: usize, limit: f64, act: Activation, rng: &mut Rng) -> Self {
        let data = (0..outputs * inputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Dense {
            weight: Matrix::from_vec(outputs, inputs, data).expect("positive dims"),
            bias: Matrix::zeros(1, outputs),
            activation: act,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundDense {
        BoundDense {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
            activation: self.activation,
        }
    }

    /// Forward pass on a batch without recording gradients.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul_t(&self.weight)?;
        let bias = self.bias.data();
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(bias) {
                *v = self.activation.apply(*v + b);
            }
        }
        Ok(y)
    }
}

impl BoundDense {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.fc(x, self.weight, self.bias, self.activation)
    }
}
