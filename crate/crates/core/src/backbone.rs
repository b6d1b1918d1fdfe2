//! Tiny pre-norm vision transformer with deep prompt injection.
//!
//! Token layout at layer `i` is `[image tokens | prompts pⁱ | class token]`
//! while `i ≤ Ψ`, and `[image tokens | class token]` afterwards. The prompt
//! slots are overwritten with fresh learnable prompts before every prompted
//! layer; the previous layer's prompt outputs are dropped.

use serde::{Deserialize, Serialize};

use crate::engine::{Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub prompt_len: usize,
    pub prompt_depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            patch: 8,
            dim: 32,
            layers: 4,
            heads: 2,
            mlp_ratio: 2,
            prompt_len: 4,
            prompt_depth: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!("image {}x{} not divisible by patch {}", self.height, self.width, self.patch));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.prompt_depth > self.layers {
            return bad(format!("prompt depth {} exceeds layers {}", self.prompt_depth, self.layers));
        }
        if self.channels == 0 || self.dim == 0 || self.layers == 0 || self.mlp_ratio == 0 {
            return bad("zero-sized backbone dimension".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Token count entering layer `layer` (1-based).
    pub fn tokens_at_layer(&self, layer: usize, prompted: bool) -> usize {
        let p = if prompted && layer <= self.prompt_depth { self.prompt_len } else { 0 };
        self.num_patches() + p + 1
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Number of prompt parameters `l · d · Ψ`.
pub fn prompt_param_count(prompt_len: usize, dim: usize, depth: usize) -> usize {
    prompt_len * dim * depth
}

/// Which parameters a training session may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningMode {
    FullFinetune,
    PromptTune,
    HeadsOnly,
}

impl std::str::FromStr for TuningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-finetune" | "full" => Ok(Self::FullFinetune),
            "prompt-tune" | "prompt" => Ok(Self::PromptTune),
            "heads-only" | "heads" => Ok(Self::HeadsOnly),
            other => Err(Error::Config(format!("unknown tuning mode {other:?}"))),
        }
    }
}

/// Learnable per-layer prompts `{pⁱ : l×d}` owned by one session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub session: usize,
    pub layers: Vec<ParamId>,
}

impl PromptSet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &BackboneConfig, session: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (cfg.prompt_len + cfg.dim) as f64).sqrt();
        let layers = (0..cfg.prompt_depth)
            .map(|i| {
                let data = (0..cfg.prompt_len * cfg.dim)
                    .map(|_| T::of(rng.range(-bound, bound)))
                    .collect();
                store.add(
                    format!("prompts.s{session}.l{i}"),
                    Tensor::new(&[cfg.prompt_len, cfg.dim], data).unwrap(),
                )
            })
            .collect();
        Self { session, layers }
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.layers
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    cls: ParamId,
    blocks: Vec<Block>,
    norm_g: ParamId,
    norm_b: ParamId,
}

fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(rng.normal() * std)).collect()).unwrap()
}

fn linear<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> (ParamId, ParamId) {
    let w = store.add(
        format!("{name}.w"),
        normal_tensor(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
    );
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    (w, b)
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let (patch_w, patch_b) = linear(store, "embed.patch", cfg.patch_dim(), d, rng);
        let pos = store.add("embed.pos", normal_tensor(&[cfg.num_patches(), d], 0.02, rng));
        let cls = store.add("embed.cls", normal_tensor(&[1, d], 0.02, rng));
        let hidden = d * cfg.mlp_ratio;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("block{i}");
            let ln1_g = store.add(format!("{p}.ln1.g"), Tensor::full(&[d], T::one()));
            let ln1_b = store.add(format!("{p}.ln1.b"), Tensor::zeros(&[d]));
            let (qkv_w, qkv_b) = linear(store, &format!("{p}.qkv"), d, 3 * d, rng);
            let (proj_w, proj_b) = linear(store, &format!("{p}.proj"), d, d, rng);
            let ln2_g = store.add(format!("{p}.ln2.g"), Tensor::full(&[d], T::one()));
            let ln2_b = store.add(format!("{p}.ln2.b"), Tensor::zeros(&[d]));
            let (fc1_w, fc1_b) = linear(store, &format!("{p}.fc1"), d, hidden, rng);
            let (fc2_w, fc2_b) = linear(store, &format!("{p}.fc2"), hidden, d, rng);
            blocks.push(Block {
                ln1_g,
                ln1_b,
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
                ln2_g,
                ln2_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            });
        }
        let norm_g = store.add("norm.g", Tensor::full(&[d], T::one()));
        let norm_b = store.add("norm.b", Tensor::zeros(&[d]));
        Ok(Self {
            cfg,
            patch_w,
            patch_b,
            pos,
            cls,
            blocks,
            norm_g,
            norm_b,
        })
    }

    /// Every backbone parameter (excludes prompts and heads).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.pos, self.cls];
        for b in &self.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.qkv_w, b.qkv_b, b.proj_w, b.proj_b, b.ln2_g, b.ln2_b, b.fc1_w, b.fc1_b,
                b.fc2_w, b.fc2_b,
            ]);
        }
        ids.extend([self.norm_g, self.norm_b]);
        ids
    }

    pub fn pos_id(&self) -> ParamId {
        self.pos
    }

    pub fn patch_ids(&self) -> (ParamId, ParamId) {
        (self.patch_w, self.patch_b)
    }

    /// Rearrange a batch of `H×W×C` images (row-major, channel last) into
    /// `[B, N, P·P·C]` patch vectors, patches in raster order.
    pub fn patchify<T: Real>(&self, images: &[&[T]]) -> Result<Tensor<T>> {
        let c = &self.cfg;
        let (p, w, ch) = (c.patch, c.width, c.channels);
        let (gh, gw) = (c.height / p, c.width / p);
        let mut out = Vec::with_capacity(images.len() * c.pixels());
        for img in images {
            if img.len() != c.pixels() {
                return Err(Error::shape(
                    "patchify",
                    format!("image has {} values, expected {}x{}x{}", img.len(), c.height, c.width, ch),
                ));
            }
            for py in 0..gh {
                for px in 0..gw {
                    for dy in 0..p {
                        let row = (py * p + dy) * w + px * p;
                        out.extend_from_slice(&img[row * ch..(row + p) * ch]);
                    }
                }
            }
        }
        Tensor::new(&[images.len(), gh * gw, c.patch_dim()], out)
    }

    /// Patch embedding + positional embedding; returns image tokens `[B, N, d]`
    /// and the broadcast class token `[B, 1, d]`.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: &[&[T]]) -> Result<(Var, Var)> {
        let patches = g.constant(self.patchify(images)?);
        let w = g.param(store, self.patch_w);
        let b = g.param(store, self.patch_b);
        let pos = g.param(store, self.pos);
        let x = g.matmul(patches, w)?;
        let x = g.add_broadcast(x, b)?;
        let x = g.add_broadcast(x, pos)?;
        let cls = g.param(store, self.cls);
        let cls = g.expand_batch(cls, images.len());
        Ok((x, cls))
    }

    fn block<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, blk: &Block, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (bsz, t, d) = (shape[0], shape[1], shape[2]);
        let h = self.cfg.heads;
        let dh = d / h;

        let (g1, b1) = (g.param(store, blk.ln1_g), g.param(store, blk.ln1_b));
        let hn = g.layer_norm(x, g1, b1)?;
        let (wq, bq) = (g.param(store, blk.qkv_w), g.param(store, blk.qkv_b));
        let qkv = g.matmul(hn, wq)?;
        let qkv = g.add_broadcast(qkv, bq)?;
        let qkv = g.reshape(qkv, &[bsz, t, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3 * bsz * h, t, dh])?;
        let q = g.narrow(qkv, 0, 0, bsz * h)?;
        let k = g.narrow(qkv, 0, bsz * h, bsz * h)?;
        let v = g.narrow(qkv, 0, 2 * bsz * h, bsz * h)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
        let attn = g.softmax(scores);
        let ctx = g.bmm(attn, v, false)?;
        let ctx = g.reshape(ctx, &[bsz, h, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[bsz, t, d])?;
        let (wo, bo) = (g.param(store, blk.proj_w), g.param(store, blk.proj_b));
        let o = g.matmul(ctx, wo)?;
        let o = g.add_broadcast(o, bo)?;
        let x = g.add(x, o)?;

        let (g2, b2) = (g.param(store, blk.ln2_g), g.param(store, blk.ln2_b));
        let hn = g.layer_norm(x, g2, b2)?;
        let (w1, c1) = (g.param(store, blk.fc1_w), g.param(store, blk.fc1_b));
        let m = g.matmul(hn, w1)?;
        let m = g.add_broadcast(m, c1)?;
        let m = g.gelu(m);
        let (w2, c2) = (g.param(store, blk.fc2_w), g.param(store, blk.fc2_b));
        let m = g.matmul(m, w2)?;
        let m = g.add_broadcast(m, c2)?;
        g.add(x, m)
    }

    /// Final-layer class-token feature `f(x)` of shape `[B, d]`.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: &[&[T]],
        prompts: Option<&PromptSet>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        if let Some(ps) = prompts {
            if ps.layers.len() != cfg.prompt_depth {
                return Err(Error::shape("encode", format!("{} prompt layers, depth {}", ps.layers.len(), cfg.prompt_depth)));
            }
            for &id in &ps.layers {
                if store.value(id).shape() != [cfg.prompt_len, cfg.dim] {
                    return Err(Error::shape(
                        "encode",
                        format!("prompt {:?}, expected [{}, {}]", store.value(id).shape(), cfg.prompt_len, cfg.dim),
                    ));
                }
            }
        }
        let bsz = images.len();
        let n = cfg.num_patches();
        let (mut img, mut cls) = self.embed(g, store, images)?;
        for (i, blk) in self.blocks.iter().enumerate() {
            let prompt = prompts.and_then(|ps| ps.layers.get(i).copied());
            let x = match prompt {
                Some(pid) => {
                    let p = g.param(store, pid);
                    let p = g.expand_batch(p, bsz);
                    g.concat(&[img, p, cls], 1)?
                }
                None => g.concat(&[img, cls], 1)?,
            };
            let t = g.shape(x)[1];
            let y = self.block(g, store, blk, x)?;
            img = g.narrow(y, 1, 0, n)?;
            cls = g.narrow(y, 1, t - 1, 1)?;
        }
        let cls = g.reshape(cls, &[bsz, cfg.dim])?;
        let (ng, nb) = (g.param(store, self.norm_g), g.param(store, self.norm_b));
        g.layer_norm(cls, ng, nb)
    }
}
