//! A detector: backbone, per-session prompt sets and the incremental head
//! bank, all stored in one [`ParamStore`].

use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig, PromptSet, TuningMode};
use crate::engine::{Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::heads::{HeadBank, HeadKind};
use crate::losses::{cross_entropy, FisherEntry};

#[derive(Clone, Debug)]
pub struct Detector<T> {
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub prompts: Vec<PromptSet>,
    pub heads: HeadBank,
}

impl<T: Real> Detector<T> {
    pub fn new(cfg: BackboneConfig, head_kind: HeadKind, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let dim = cfg.dim;
        let backbone = Backbone::new(&mut store, cfg, rng)?;
        Ok(Self {
            store,
            backbone,
            prompts: Vec::new(),
            heads: HeadBank::new(head_kind, dim),
        })
    }

    pub fn cfg(&self) -> &BackboneConfig {
        &self.backbone.cfg
    }

    pub fn add_prompt_set(&mut self, session: usize, rng: &mut Rng) -> Result<usize> {
        if self.prompts.iter().any(|p| p.session == session) {
            return Err(Error::Protocol(format!("prompt set for session {session} already exists")));
        }
        let ps = PromptSet::new(&mut self.store, &self.backbone.cfg, session, rng);
        self.prompts.push(ps);
        Ok(self.prompts.len() - 1)
    }

    /// Copy the values of prompt set `from` into prompt set `to`.
    pub fn copy_prompts(&mut self, from: usize, to: usize) {
        let src: Vec<Tensor<T>> = self.prompts[from]
            .layers
            .iter()
            .map(|&id| self.store.value(id).clone())
            .collect();
        for (&id, v) in self.prompts[to].layers.clone().iter().zip(src) {
            self.store.get_mut(id).value = v;
        }
    }

    pub fn add_head(&mut self, session: usize, n_new: usize, rng: &mut Rng) -> Result<()> {
        self.heads.add_head(&mut self.store, session, n_new, rng)
    }

    pub fn num_classes(&self) -> usize {
        self.heads.num_classes()
    }

    pub fn features(&self, g: &mut Graph<T>, images: &[&[T]], prompt: Option<usize>) -> Result<Var> {
        let ps = prompt.map(|i| &self.prompts[i]);
        self.backbone.encode(g, &self.store, images, ps)
    }

    pub fn logits(&self, g: &mut Graph<T>, images: &[&[T]], prompt: Option<usize>) -> Result<Var> {
        let f = self.features(g, images, prompt)?;
        self.heads.logits(g, &self.store, f)
    }

    /// Forward without gradient bookkeeping of interest; returns `[B, C]`.
    pub fn infer_logits(&self, images: &[&[T]], prompt: Option<usize>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let z = self.logits(&mut g, images, prompt)?;
        Ok(g.value(z).clone())
    }

    pub fn infer_features(&self, images: &[&[T]], prompt: Option<usize>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = self.features(&mut g, images, prompt)?;
        Ok(g.value(f).clone())
    }

    /// Apply a tuning mode. `active_prompt` is the prompt set being trained in
    /// this session; other sessions' prompt sets stay frozen.
    pub fn set_trainable(&mut self, mode: TuningMode, active_prompt: Option<usize>) {
        self.store.set_all_trainable(false);
        for id in self.heads.param_ids() {
            self.store.set_trainable(id, true);
        }
        if mode == TuningMode::FullFinetune {
            for id in self.backbone.param_ids() {
                self.store.set_trainable(id, true);
            }
        }
        if mode != TuningMode::HeadsOnly {
            if let Some(p) = active_prompt {
                for &id in self.prompts[p].layers.clone().iter() {
                    self.store.set_trainable(id, true);
                }
            }
        }
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.backbone.param_ids()
    }

    /// SHA-256 over the raw bits of the listed parameters (all when `None`).
    pub fn hash_params(&self, ids: Option<&[ParamId]>) -> String {
        let mut h = Sha256::new();
        let all: Vec<ParamId>;
        let ids = match ids {
            Some(ids) => ids,
            None => {
                all = self.store.iter().map(|(id, _)| id).collect();
                &all
            }
        };
        for &id in ids {
            let p = self.store.get(id);
            h.update(p.name.as_bytes());
            let mut buf = Vec::with_capacity(p.value.len() * T::BYTES);
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        format!("{:x}", h.finalize())
    }

    /// Empirical diagonal Fisher over `(image, label)` pairs for every
    /// currently trainable parameter: mean of squared per-sample gradients
    /// of the log-likelihood of `logit_scale · logits`.
    pub fn estimate_fisher(
        &mut self,
        data: &[(&[T], usize)],
        prompt: Option<usize>,
        logit_scale: f64,
    ) -> Result<Vec<FisherEntry<T>>> {
        if data.is_empty() {
            return Err(Error::invalid("Fisher estimation needs at least one sample"));
        }
        let ids = self.store.trainable_ids();
        let mut acc: Vec<Tensor<T>> = ids.iter().map(|&id| Tensor::zeros(self.store.value(id).shape())).collect();
        for &(img, label) in data {
            self.store.zero_grad();
            let mut g = Graph::new();
            let z = self.logits(&mut g, &[img], prompt)?;
            let z = g.scale(z, T::of(logit_scale));
            let loss = cross_entropy(&mut g, z, &[label])?;
            g.backward(loss, &mut self.store)?;
            for (a, &id) in acc.iter_mut().zip(&ids) {
                for (x, &gr) in a.data_mut().iter_mut().zip(self.store.grad(id).data()) {
                    *x += gr * gr;
                }
            }
        }
        self.store.zero_grad();
        let n = T::of(data.len() as f64);
        Ok(ids
            .iter()
            .zip(acc)
            .map(|(&id, mut f)| {
                f.data_mut().iter_mut().for_each(|v| *v /= n);
                FisherEntry {
                    param: id,
                    fisher: f,
                    anchor: self.store.value(id).clone(),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::prompt_param_count;

    fn detector(kind: HeadKind) -> Detector<f64> {
        let mut rng = Rng::new(1);
        let mut d = Detector::new(BackboneConfig::default(), kind, &mut rng).unwrap();
        d.add_prompt_set(0, &mut rng).unwrap();
        d.add_head(0, 2, &mut rng).unwrap();
        d
    }

    #[test]
    fn prompt_tune_trainable_accounting() {
        let mut d = detector(HeadKind::Linear);
        d.set_trainable(TuningMode::PromptTune, Some(0));
        let cfg = d.cfg().clone();
        let head = 2 * cfg.dim + 2;
        assert_eq!(
            d.store.num_trainable(),
            prompt_param_count(cfg.prompt_len, cfg.dim, cfg.prompt_depth) + head
        );
        d.set_trainable(TuningMode::HeadsOnly, Some(0));
        assert_eq!(d.store.num_trainable(), head);
        d.set_trainable(TuningMode::FullFinetune, Some(0));
        assert_eq!(d.store.num_trainable(), d.store.num_elements());
    }

    #[test]
    fn fisher_definitions() {
        let mut d = detector(HeadKind::Cosine);
        d.set_trainable(TuningMode::HeadsOnly, None);
        let img = Rng::new(4).draw(d.cfg().pixels());
        let single = d.estimate_fisher(&[(&img, 1)], Some(0), 1.0).unwrap();
        // single sample: F equals the squared gradient
        d.store.zero_grad();
        let mut g = Graph::new();
        let z = d.logits(&mut g, &[&img], Some(0)).unwrap();
        let loss = cross_entropy(&mut g, z, &[1]).unwrap();
        g.backward(loss, &mut d.store).unwrap();
        for e in &single {
            for (f, gr) in e.fisher.data().iter().zip(d.store.grad(e.param).data()) {
                assert!((f - gr * gr).abs() < 1e-15);
                assert!(*f >= 0.0);
            }
        }
        assert!(d.estimate_fisher(&[], Some(0), 1.0).is_err());
    }

    #[test]
    fn fisher_zero_for_unused_parameter() {
        // prompts of a session that is not used in the forward pass never
        // receive gradient
        let mut d = detector(HeadKind::Linear);
        d.add_prompt_set(1, &mut Rng::new(2)).unwrap();
        d.set_trainable(TuningMode::PromptTune, Some(1));
        let img = Rng::new(4).draw(d.cfg().pixels());
        let f = d.estimate_fisher(&[(&img, 0), (&img, 1)], Some(0), 1.0).unwrap();
        let unused = &d.prompts[1].layers;
        for e in f.iter().filter(|e| unused.contains(&e.param)) {
            assert!(e.fisher.data().iter().all(|&v| v == 0.0));
        }
    }
}
