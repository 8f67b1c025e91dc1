use super::{ModelParams, Real};
use crate::error::{Error, Result};

/// Momentum SGD: `v ← μ·v + g`, `p ← p − lr·v`.
///
/// Checks every gradient before touching anything, so a non-finite
/// gradient leaves both parameters and velocity unchanged.
pub fn sgd_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    velocity: &mut ModelParams<T>,
    lr: T,
    momentum: T,
) -> Result<()> {
    if grads.tensors.len() != params.tensors.len() || velocity.tensors.len() != params.tensors.len() {
        return Err(Error::ShapeMismatch("gradient/velocity layout differs from parameters".into()));
    }
    for (p, g) in params.tensors.iter().zip(&grads.tensors) {
        if p.shape != g.shape {
            return Err(Error::ShapeMismatch(format!("gradient shape for `{}`", p.name)));
        }
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(g.name.clone()));
        }
    }
    for ((p, g), v) in params.tensors.iter_mut().zip(&grads.tensors).zip(velocity.tensors.iter_mut()) {
        for ((pi, &gi), vi) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
            *vi = momentum * *vi + gi;
            *pi = *pi - lr * *vi;
        }
    }
    Ok(())
}

/// Optimizer state bundled with its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub velocity: ModelParams<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &ModelParams<T>, lr: T, momentum: T) -> Self {
        Self { lr, momentum, velocity: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) -> Result<()> {
        sgd_step(params, grads, &mut self.velocity, self.lr, self.momentum)
    }
}
