use std::f64::consts::PI;

use crate::engine::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and a cosine-annealed learning rate.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub lr0: f64,
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
    pub step: usize,
    pub horizon: usize,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParamStore<T>, lr0: f64, momentum: f64, horizon: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum {momentum} outside [0, 1)")));
        }
        if lr0 <= 0.0 {
            return Err(Error::invalid(format!("learning rate {lr0} must be positive")));
        }
        Ok(Self {
            lr0,
            momentum,
            velocity: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
            horizon: horizon.max(1),
        })
    }

    /// Learning rate for the current step.
    pub fn current_lr(&self) -> Result<f64> {
        cosine_anneal_lr(self.lr0, self.step.min(self.horizon), self.horizon)
    }

    /// One annealed step; advances the step counter.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let lr = self.current_lr()?;
        sgd_momentum_step(store, self, lr)?;
        self.step += 1;
        Ok(())
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }
}

/// `v ← μ·v + g; w ← w − lr·v` for trainable parameters; frozen ones are
/// left untouched (value and velocity).
pub fn sgd_momentum_step<T: Real>(store: &mut ParamStore<T>, optim: &mut OptimState<T>, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate {lr} must be positive")));
    }
    if optim.velocity.len() != store.len() {
        return Err(Error::shape(
            "sgd",
            format!("{} velocities for {} parameters", optim.velocity.len(), store.len()),
        ));
    }
    let mu = T::of(optim.momentum);
    let lr = T::of(lr);
    for ((_, p), v) in store.iter_mut().zip(optim.velocity.iter_mut()) {
        if !p.trainable {
            continue;
        }
        for ((w, vel), &g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(v.data_mut().iter_mut())
            .zip(p.grad.data())
        {
            *vel = mu * *vel + g;
            *w -= lr * *vel;
        }
    }
    Ok(())
}

/// `lr0 · ½(1 + cos(π t / T))`.
pub fn cosine_anneal_lr(lr0: f64, t: usize, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::invalid("annealing horizon must be positive"));
    }
    if t > horizon {
        return Err(Error::invalid(format!("step {t} beyond horizon {horizon}")));
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * t as f64 / horizon as f64).cos()))
}
