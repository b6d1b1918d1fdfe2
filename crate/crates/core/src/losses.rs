//! Cross-entropy, knowledge distillation and the EWC penalty, both as graph
//! ops (for training) and as plain 64-bit functions (for reference checks).

use crate::engine::{softmax_in_place, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Mean cross-entropy `−log softmax(z)_y` over the batch.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let c = g.value(logits).last_dim();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {bad} outside {c} classes")));
    }
    let lp = g.log_softmax(logits);
    let picked = g.pick(lp, labels)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -T::one()))
}

/// Mean distillation loss `−Σ softmax(v/τ)·log softmax(z/τ)` where `v` are
/// the frozen previous model's logits `[B, C_old]` and `z` the first
/// `C_old` columns of the current logits.
pub fn kd_loss<T: Real>(g: &mut Graph<T>, logits: Var, old_logits: &Tensor<T>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let shape = g.shape(logits).to_vec();
    let c_old = old_logits.last_dim();
    if old_logits.rows() != shape[0] || c_old > shape[1] {
        return Err(Error::shape("kd_loss", format!("old {:?} vs new {shape:?}", old_logits.shape())));
    }
    let inv = T::of(1.0 / tau);
    let mut target = old_logits.data().iter().map(|&v| v * inv).collect::<Vec<_>>();
    for row in target.chunks_mut(c_old) {
        softmax_in_place(row);
    }
    let target = g.constant(Tensor::new(old_logits.shape(), target)?);
    let z = g.narrow(logits, 1, 0, c_old)?;
    let z = g.scale(z, inv);
    let lp = g.log_softmax(z);
    let prod = g.mul(lp, target)?;
    let s = g.sum(prod);
    Ok(g.scale(s, T::of(-1.0 / shape[0] as f64)))
}

/// Diagonal Fisher information and anchor values for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherEntry<T> {
    pub param: ParamId,
    pub fisher: Tensor<T>,
    pub anchor: Tensor<T>,
}

/// `(λ/2) Σ F (θ − θ*)²` over every stored entry whose parameter is
/// trainable. Returns `None` when nothing contributes.
pub fn ewc_penalty<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    entries: &[FisherEntry<T>],
    lambda: f64,
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for e in entries {
        if !store.get(e.param).trainable {
            continue;
        }
        if store.value(e.param).shape() != e.fisher.shape() || e.fisher.shape() != e.anchor.shape() {
            return Err(Error::shape("ewc_penalty", format!("parameter {}", store.get(e.param).name)));
        }
        let theta = g.param(store, e.param);
        let anchor = g.constant(e.anchor.clone());
        let f = g.constant(e.fisher.clone());
        let d = g.sub(theta, anchor)?;
        let d2 = g.mul(d, d)?;
        let w = g.mul(d2, f)?;
        terms.push(g.sum(w));
    }
    let Some(&first) = terms.first() else { return Ok(None) };
    let mut total = first;
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(Some(g.scale(total, T::of(lambda / 2.0))))
}

fn log_softmax_f64(x: &[f64]) -> Vec<f64> {
    let (m, tail) = crate::engine::log_sum_exp_split(x);
    x.iter().map(|v| (v - m) - tail).collect()
}

pub fn cross_entropy_f64(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} outside {} classes", logits.len())));
    }
    Ok(-log_softmax_f64(logits)[label])
}

pub fn kd_loss_f64(v: &[f64], z: &[f64], tau: f64) -> Result<f64> {
    if v.len() != z.len() {
        return Err(Error::shape("kd_loss", format!("{} vs {}", v.len(), z.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let mut p: Vec<f64> = v.iter().map(|x| x / tau).collect();
    softmax_in_place(&mut p);
    let lq = log_softmax_f64(&z.iter().map(|x| x / tau).collect::<Vec<_>>());
    Ok(-p.iter().zip(&lq).map(|(a, b)| a * b).sum::<f64>())
}

/// Shannon entropy of `softmax(v/τ)`.
pub fn softened_entropy(v: &[f64], tau: f64) -> f64 {
    let lp = log_softmax_f64(&v.iter().map(|x| x / tau).collect::<Vec<_>>());
    -lp.iter().map(|l| l.exp() * l).sum::<f64>()
}

pub fn ewc_penalty_f64(theta: &[f64], anchor: &[f64], fisher: &[f64], lambda: f64) -> Result<f64> {
    if theta.len() != anchor.len() || theta.len() != fisher.len() {
        return Err(Error::shape("ewc_penalty", format!("{} / {} / {}", theta.len(), anchor.len(), fisher.len())));
    }
    Ok(lambda / 2.0
        * theta
            .iter()
            .zip(anchor)
            .zip(fisher)
            .map(|((t, a), f)| f * (t - a) * (t - a))
            .sum::<f64>())
}
