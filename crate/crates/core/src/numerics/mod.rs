//! Dense matrices, tape-based reverse-mode differentiation and the
//! momentum optimizer.

mod layer;
mod matrix;
mod optim;
mod tape;

pub use layer::{BoundDense, Dense};
pub use matrix::Matrix;
pub use optim::{sgd_momentum_step, MomentumState};
pub use tape::{Activation, Gradients, Tape, Var};

pub(crate) use tape::softmax_in_place;

use crate::error::{Error, Result};

/// `act(W·x + b)` for a single input vector.
pub fn forward_fc(x: &[f64], w: &Matrix, b: &[f64], act: Activation) -> Result<Vec<f64>> {
    if w.cols() != x.len() || w.rows() != b.len() {
        return Err(Error::shape(
            "forward_fc",
            format!("W {:?}, x {}, b {}", w.shape(), x.len(), b.len()),
        ));
    }
    Ok((0..w.rows())
        .map(|r| {
            let s: f64 = w.row(r).iter().zip(x).map(|(a, b)| a * b).sum();
            act.apply(s + b[r])
        })
        .collect())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(a: &[f64]) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    let mut out = a.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}
