//! Incremental classifier heads and the prediction rule.
//!
//! Class 0 is always the conart class. The base session registers classes
//! `{0, 1}` (conart and the base generator); every later session appends one
//! deepart class.

use serde::{Deserialize, Serialize};

use crate::engine::{softmax_in_place, Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};
use crate::error::{Error, Result};

pub const CONART_CLASS: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub session: usize,
    pub classes: Vec<usize>,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

/// All heads of a model, in registration order. Logits are the concatenation
/// of every head's outputs, so class ids index directly into them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadBank {
    pub kind: HeadKind,
    pub dim: usize,
    pub heads: Vec<ClassifierHead>,
}

impl HeadBank {
    pub fn new(kind: HeadKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            heads: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.heads.iter().map(|h| h.classes.len()).sum()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.heads
            .iter()
            .flat_map(|h| std::iter::once(h.weight).chain(h.bias))
            .collect()
    }

    pub fn head_for_session(&self, session: usize) -> Option<&ClassifierHead> {
        self.heads.iter().find(|h| h.session == session)
    }

    /// Register the head for `session`. The base session (the first one
    /// registered) must add 2 classes, every later one exactly 1.
    pub fn add_head<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        session: usize,
        n_new: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        if self.heads.iter().any(|h| h.session == session) {
            return Err(Error::Protocol(format!("head for session {session} already registered")));
        }
        let expected = if self.heads.is_empty() { 2 } else { 1 };
        if n_new != expected {
            return Err(Error::Protocol(format!(
                "session {session} must add {expected} class(es), asked for {n_new}"
            )));
        }
        let first = self.num_classes();
        let std = (1.0 / self.dim as f64).sqrt();
        let w = Tensor::new(
            &[n_new, self.dim],
            (0..n_new * self.dim).map(|_| T::of(rng.normal() * std)).collect(),
        )?;
        let weight = store.add(format!("head.s{session}.w"), w);
        let bias = match self.kind {
            HeadKind::Linear => Some(store.add(format!("head.s{session}.b"), Tensor::zeros(&[n_new]))),
            HeadKind::Cosine => None,
        };
        self.heads.push(ClassifierHead {
            session,
            classes: (first..first + n_new).collect(),
            weight,
            bias,
        });
        Ok(())
    }

    /// Logits `[B, C]` over every registered class.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feature: Var) -> Result<Var> {
        if self.heads.is_empty() {
            return Err(Error::Protocol("no classifier heads registered".into()));
        }
        let f = match self.kind {
            HeadKind::Cosine => g.l2_normalize(feature)?,
            HeadKind::Linear => feature,
        };
        let mut parts = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let w = g.param(store, h.weight);
            let out = match self.kind {
                HeadKind::Cosine => {
                    let wn = g.l2_normalize(w)?;
                    g.matmul_t(f, wn)?
                }
                HeadKind::Linear => {
                    let z = g.matmul_t(f, w)?;
                    let b = g.param(store, h.bias.expect("linear head has a bias"));
                    g.add_broadcast(z, b)?
                }
            };
            parts.push(out);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat(&parts, 1)
        }
    }
}

/// `φ_c = ⟨W_c/‖W_c‖, f/‖f‖⟩` for every class row of `w`.
pub fn cosine_logits(w: &[Vec<f64>], f: &[f64]) -> Result<Vec<f64>> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nf = norm(f);
    if nf == 0.0 {
        return Err(Error::ZeroNorm("cosine_logits feature"));
    }
    w.iter()
        .map(|row| {
            if row.len() != f.len() {
                return Err(Error::shape("cosine_logits", format!("row {} vs feature {}", row.len(), f.len())));
            }
            let nw = norm(row);
            if nw == 0.0 {
                return Err(Error::ZeroNorm("cosine_logits weight row"));
            }
            let dot: f64 = row.iter().zip(f).map(|(a, b)| a * b).sum();
            Ok((dot / (nw * nf)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// How the scalar deepart score is read off the class probabilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Total probability mass on deepart classes.
    #[default]
    Sum,
    /// Largest single deepart-class probability.
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    /// −1 for conart, +1 for deepart.
    pub binary: i8,
    pub score: f64,
}

impl Prediction {
    pub fn is_deepart(&self) -> bool {
        self.binary > 0
    }
}

/// `ŷ = argmax φ` (lowest class id on ties); binary label from the class
/// partition; deepart score from the softmax of `φ`.
pub fn predict(logits: &[f64], mode: ScoreMode) -> Result<Prediction> {
    if logits.is_empty() {
        return Err(Error::invalid("empty logits"));
    }
    let mut class = 0;
    for (c, &v) in logits.iter().enumerate() {
        if v > logits[class] {
            class = c;
        }
    }
    let mut probs = logits.to_vec();
    softmax_in_place(&mut probs);
    let deep = probs.iter().enumerate().filter(|(c, _)| *c != CONART_CLASS).map(|(_, &p)| p);
    let score = match mode {
        ScoreMode::Sum => deep.sum::<f64>(),
        ScoreMode::Max => deep.fold(0.0, f64::max),
    };
    Ok(Prediction {
        class,
        binary: if class == CONART_CLASS { -1 } else { 1 },
        score: score.clamp(0.0, 1.0),
    })
}
