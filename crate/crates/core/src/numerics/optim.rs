use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Classical (Polyak) momentum: `v ← μ·v − η·g`, `w ← w + v`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    velocity: Vec<Matrix>,
    momentum: f64,
    learning_rate: f64,
}

impl MomentumState {
    pub fn new(params: &[&Matrix], learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum {momentum} not in [0, 1)")));
        }
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {learning_rate} must be > 0")));
        }
        Ok(MomentumState {
            velocity: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            momentum,
            learning_rate,
        })
    }

    pub fn velocity(&self) -> &[Matrix] {
        &self.velocity
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }
}

/// One optimizer step. `names` label the tensors for error reporting.
/// Nothing is modified if any gradient is non-finite.
pub fn sgd_momentum_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    names: &[String],
    state: &mut MomentumState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!(
                "{} params, {} grads, {} velocity buffers",
                params.len(),
                grads.len(),
                state.velocity.len()
            ),
        ));
    }
    for (k, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if !p.same_shape(g) || !p.same_shape(v) {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!("tensor #{k}: param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            let name = names.get(k).cloned().unwrap_or_else(|| format!("#{k}"));
            return Err(Error::NonFiniteGradient(name));
        }
    }
    let (mu, eta) = (state.momentum, state.learning_rate);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((w, &gv), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vel = mu * *vel - eta * gv;
            *w += *vel;
        }
    }
    Ok(())
}
