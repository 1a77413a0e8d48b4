//! Adam with a reduce-on-plateau learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::Denoiser;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has not
/// improved (by a relative `threshold`) for more than `patience` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn bad_epochs(&self) -> usize {
        self.bad_epochs
    }

    /// Records one epoch's loss and returns the (possibly reduced) rate.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub adam: AdamConfig,
    pub plateau: PlateauScheduler,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
    step: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(model: &Denoiser<F>, adam: AdamConfig, plateau: PlateauScheduler) -> Result<Self> {
        if !(adam.lr > 0.0 && adam.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", adam.lr)));
        }
        let zeros: Vec<Tensor<F>> = model.params().values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            adam,
            plateau,
            second: zeros.clone(),
            first: zeros,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.adam.lr
    }

    /// Feeds an epoch's validation loss to the plateau scheduler. Returns
    /// `true` if the learning rate was reduced.
    pub fn end_epoch(&mut self, val_loss: f64) -> bool {
        let new = self.plateau.observe(val_loss, self.adam.lr);
        let reduced = new < self.adam.lr;
        self.adam.lr = new;
        reduced
    }
}

/// One Adam update. Non-finite gradients leave model and state untouched.
pub fn optimizer_step<F: Real>(model: &mut Denoiser<F>, grads: &[Tensor<F>], state: &mut OptimizerState<F>) -> Result<()> {
    let params = model.params_mut();
    if grads.len() != params.len() {
        return Err(Error::LengthMismatch {
            context: "gradients".into(),
            expected: params.len(),
            got: grads.len(),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.values()[i].shape() {
            return Err(Error::ShapeMismatch {
                context: format!("gradient of `{}`", params.names()[i]),
                expected: params.values()[i].shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", params.names()[i])));
        }
    }

    state.step += 1;
    let a = &state.adam;
    let t = state.step as i32;
    let bc1 = 1.0 - a.beta1.powi(t);
    let bc2 = 1.0 - a.beta2.powi(t);
    let (b1, b2) = (F::from_f64_lossy(a.beta1), F::from_f64_lossy(a.beta2));
    let (one_b1, one_b2) = (F::from_f64_lossy(1.0 - a.beta1), F::from_f64_lossy(1.0 - a.beta2));
    let step_size = F::from_f64_lossy(a.lr / bc1);
    let inv_bc2 = F::from_f64_lossy(1.0 / bc2);
    let eps = F::from_f64_lossy(a.eps);

    for (i, g) in grads.iter().enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let p = params.values_mut()[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            p[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}
