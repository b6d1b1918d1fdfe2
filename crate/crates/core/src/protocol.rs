//! Session orchestration for the once-for-all, continual and joint
//! benchmarks: rehearsal buffers, negative sharing, anti-forgetting
//! recipes and evaluation.
//!
//! Sessions are numbered by learning position: position 0 is the base
//! session (conart class 0 plus the base generator as class 1) and
//! position `p ≥ 1` adds class `p + 1`. Datasets keep their own index in
//! the stream; `order` maps positions to datasets.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, TuningMode};
use crate::engine::{Graph, OptimState, Real, Rng, Tensor};
use crate::error::{Error, Result};
use crate::heads::{predict, HeadKind, Prediction, ScoreMode, CONART_CLASS};
use crate::losses::{cross_entropy, ewc_penalty, kd_loss, FisherEntry};
use crate::metrics::{aa, af, average_precision, binary_accuracy, ca, map_score, AccuracyMatrix};
use crate::model::Detector;
use crate::synth::{generator_name, Dataset, ImageSample, SessionData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkKind {
    Odd,
    Cdd1,
    Cdd2,
    Cdd3,
    Jdd,
}

impl BenchmarkKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchmarkKind::Odd => "odd",
            BenchmarkKind::Cdd1 => "cdd1",
            BenchmarkKind::Cdd2 => "cdd2",
            BenchmarkKind::Cdd3 => "cdd3",
            BenchmarkKind::Jdd => "jdd",
        }
    }

    pub fn is_continual(self) -> bool {
        matches!(self, BenchmarkKind::Cdd1 | BenchmarkKind::Cdd2 | BenchmarkKind::Cdd3)
    }
}

impl fmt::Display for BenchmarkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "odd" => Ok(BenchmarkKind::Odd),
            "cdd1" => Ok(BenchmarkKind::Cdd1),
            "cdd2" => Ok(BenchmarkKind::Cdd2),
            "cdd3" => Ok(BenchmarkKind::Cdd3),
            "jdd" => Ok(BenchmarkKind::Jdd),
            other => Err(Error::Config(format!("unknown benchmark `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseMethod {
    NaiveFt,
    Lwf,
    Ewc,
    SPromptsStyle,
    Replay,
}

impl BaseMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BaseMethod::NaiveFt => "naive-ft",
            BaseMethod::Lwf => "lwf",
            BaseMethod::Ewc => "ewc",
            BaseMethod::SPromptsStyle => "s-prompts-style",
            BaseMethod::Replay => "replay",
        }
    }
}

impl fmt::Display for BaseMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "naive-ft" | "naive" | "ft" => Ok(BaseMethod::NaiveFt),
            "lwf" => Ok(BaseMethod::Lwf),
            "ewc" => Ok(BaseMethod::Ewc),
            "s-prompts-style" | "s-prompts" | "sprompts" => Ok(BaseMethod::SPromptsStyle),
            "replay" => Ok(BaseMethod::Replay),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// The three framework steps, toggled individually for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameworkFlags {
    pub kd: bool,
    pub cn: bool,
    pub pt: bool,
}

impl FrameworkFlags {
    pub const ALL: Self = Self {
        kd: true,
        cn: true,
        pt: true,
    };

    pub fn any(&self) -> bool {
        self.kd || self.cn || self.pt
    }

    /// The eight on/off combinations, all-off first and all-on last.
    pub fn grid() -> Vec<Self> {
        (0..8)
            .map(|b| Self {
                kd: b & 1 != 0,
                cn: b & 2 != 0,
                pt: b & 4 != 0,
            })
            .collect()
    }
}

/// What a method does in non-base sessions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Recipe {
    pub tuning: TuningMode,
    pub head: HeadKind,
    pub kd: bool,
    pub ewc: bool,
    /// One prompt set per session, chosen at test time by nearest centroid.
    pub session_prompts: bool,
}

pub fn base_recipe(method: BaseMethod) -> Recipe {
    let plain = Recipe {
        tuning: TuningMode::FullFinetune,
        head: HeadKind::Linear,
        kd: false,
        ewc: false,
        session_prompts: false,
    };
    match method {
        BaseMethod::NaiveFt | BaseMethod::Replay => plain,
        BaseMethod::Lwf => Recipe { kd: true, ..plain },
        BaseMethod::Ewc => Recipe { ewc: true, ..plain },
        BaseMethod::SPromptsStyle => Recipe {
            tuning: TuningMode::PromptTune,
            session_prompts: true,
            ..plain
        },
    }
}

/// Freeze the backbone and tune prompts, normalize the heads, add
/// distillation; each step only if flagged and not already present.
pub fn transform_method(recipe: Recipe, flags: FrameworkFlags) -> Recipe {
    let mut r = recipe;
    if flags.pt && r.tuning == TuningMode::FullFinetune {
        r.tuning = TuningMode::PromptTune;
    }
    if flags.cn && r.head != HeadKind::Cosine {
        r.head = HeadKind::Cosine;
    }
    if flags.kd && !r.kd {
        r.kd = true;
    }
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    /// Base-session (and joint) training, which stands in for pretraining.
    pub base_epochs: usize,
    pub base_lr: f64,
    pub base_tuning: TuningMode,
    /// Non-base sessions; unset means the reference schedule
    /// (see [`TrainConfig::session_schedule`]).
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub momentum: f64,
    pub tau: f64,
    pub lambda_kd: f64,
    pub lambda_ewc: f64,
    /// Fixed factor applied to cosine-head logits inside the training
    /// losses; predictions use the raw cosines.
    pub cosine_scale: f64,
    /// Keep updating earlier sessions' heads in later sessions.
    pub old_heads_trainable: bool,
    /// Samples per session used for the diagonal Fisher.
    pub fisher_samples: usize,
    pub kmeans_k: usize,
    pub kmeans_iters: usize,
    pub score_mode: ScoreMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            base_epochs: 10,
            base_lr: 0.05,
            base_tuning: TuningMode::FullFinetune,
            epochs: None,
            lr: None,
            batch_size: 128,
            momentum: 0.9,
            tau: 2.0,
            lambda_kd: 1.0,
            lambda_ewc: 100.0,
            cosine_scale: 16.0,
            old_heads_trainable: false,
            fisher_samples: 256,
            kmeans_k: 5,
            kmeans_iters: 50,
            score_mode: ScoreMode::Sum,
        }
    }
}

impl TrainConfig {
    /// Epochs and initial learning rate for non-base sessions: 30 / 0.1 for
    /// framework-transformed runs, 10 / 0.001 otherwise, unless set.
    pub fn session_schedule(&self, framework: bool) -> (usize, f64) {
        let (e, lr) = if framework { (30, 0.1) } else { (10, 0.001) };
        (self.epochs.unwrap_or(e), self.lr.unwrap_or(lr))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.batch_size == 0 || self.kmeans_k == 0 {
            return Err(Error::Config("batch size and k must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.lr.map_or(true, |v| v > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.tau > 0.0 && self.cosine_scale > 0.0) || self.lambda_kd < 0.0 || self.lambda_ewc < 0.0 {
            return Err(Error::Config("τ must be positive and loss weights non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub kind: BenchmarkKind,
    pub buffer: usize,
    /// Dataset indices of the non-base sessions in learning order.
    pub order: Vec<usize>,
    pub method: BaseMethod,
    pub flags: FrameworkFlags,
    pub seed: u64,
}

impl BenchmarkConfig {
    pub fn recipe(&self) -> Recipe {
        transform_method(base_recipe(self.method), self.flags)
    }

    pub fn validate(&self, num_datasets: usize) -> Result<()> {
        match self.kind {
            BenchmarkKind::Cdd3 | BenchmarkKind::Odd | BenchmarkKind::Jdd if self.buffer != 0 => {
                return Err(Error::Config(format!("{} allows no rehearsal buffer, got M = {}", self.kind, self.buffer)));
            }
            _ => {}
        }
        if self.kind == BenchmarkKind::Odd && !self.order.is_empty() {
            return Err(Error::Config("odd trains on the base session only".into()));
        }
        let mut seen = vec![false; num_datasets];
        for &d in &self.order {
            if d == 0 || d >= num_datasets || seen[d] {
                return Err(Error::Config(format!("session order {:?} is not a permutation of 1..{num_datasets}", self.order)));
            }
            seen[d] = true;
        }
        if self.kind.is_continual() && self.order.len() + 1 != num_datasets {
            return Err(Error::Config(format!("session order {:?} is not a permutation of 1..{num_datasets}", self.order)));
        }
        Ok(())
    }
}

/// Non-base datasets `1..n` shuffled by the run seed.
pub fn default_session_order(seed: u64, num_datasets: usize) -> Vec<usize> {
    if num_datasets <= 1 {
        return Vec::new();
    }
    stream(seed, Stream::Order, 0)
        .permutation(num_datasets - 1)
        .into_iter()
        .map(|i| i + 1)
        .collect()
}

#[derive(Clone, Copy)]
enum Stream {
    Order = 1,
    Model = 2,
    Head = 3,
    Prompt = 4,
    Shuffle = 5,
    Buffer = 6,
    Fisher = 7,
    Kmeans = 8,
}

fn stream(seed: u64, tag: Stream, index: u64) -> Rng {
    Rng::derive(seed, ((tag as u64) << 40) | index)
}

/// A reference to one training image and the class it is trained as.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub sample: &'a ImageSample,
    pub class: usize,
    /// Learning position of the session the sample came from.
    pub origin: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub dataset: usize,
    pub index: usize,
    pub class: usize,
    pub origin: usize,
    pub id: u64,
}

/// Counts of training reads per `(session, origin session)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessLog {
    pub reads: BTreeMap<(usize, usize), usize>,
}

impl AccessLog {
    pub fn record(&mut self, session: usize, origin: usize) {
        *self.reads.entry((session, origin)).or_default() += 1;
    }

    /// Reads during non-base session `p` of samples from sessions `< p`.
    pub fn historical_reads(&self) -> usize {
        self.reads
            .iter()
            .filter(|(&(s, o), _)| s > 0 && o < s)
            .map(|(_, &n)| n)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("session,origin_session,reads\n");
        for (&(a, b), &n) in &self.reads {
            s += &format!("{a},{b},{n}\n");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RehearsalBuffer {
    pub capacity: usize,
    pub entries: Vec<BufferEntry>,
}

impl RehearsalBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_class(&self, class: usize) -> usize {
        self.entries.iter().filter(|e| e.class == class).count()
    }
}

/// The session's own samples plus replayed buffer samples: stored conarts
/// under CDD2, everything stored under CDD1. Rejected under CDD3.
pub fn share_negatives<'a>(
    kind: BenchmarkKind,
    buffer: &RehearsalBuffer,
    session: &[TrainItem<'a>],
    data: &'a Dataset,
) -> Result<Vec<TrainItem<'a>>> {
    if !matches!(kind, BenchmarkKind::Cdd1 | BenchmarkKind::Cdd2) {
        return Err(Error::Protocol(format!("{kind} does not allow replaying stored samples")));
    }
    let mut out = session.to_vec();
    for e in &buffer.entries {
        if kind == BenchmarkKind::Cdd2 && e.class != CONART_CLASS {
            return Err(Error::Protocol("cdd2 buffer holds a deepart".into()));
        }
        out.push(TrainItem {
            sample: &data.train[e.dataset].samples[e.index],
            class: e.class,
            origin: e.origin,
        });
    }
    Ok(out)
}

/// Stratified uniform retention: capacity split evenly over eligible
/// classes (remainder to the lowest class ids), uniform within a class.
pub fn update_buffer(
    buffer: &mut RehearsalBuffer,
    new_entries: &[BufferEntry],
    kind: BenchmarkKind,
    rng: &mut Rng,
) -> Result<()> {
    let m = buffer.capacity;
    if m == 0 || !matches!(kind, BenchmarkKind::Cdd1 | BenchmarkKind::Cdd2) {
        buffer.entries.clear();
        return Ok(());
    }
    let eligible = |class: usize| kind == BenchmarkKind::Cdd1 || class == CONART_CLASS;
    let mut pools: BTreeMap<usize, Vec<BufferEntry>> = BTreeMap::new();
    for e in buffer.entries.iter().chain(new_entries) {
        if eligible(e.class) {
            pools.entry(e.class).or_default().push(*e);
        }
    }
    let n = pools.len();
    let mut kept = Vec::new();
    for (k, (_, pool)) in pools.into_iter().enumerate() {
        let quota = m / n + usize::from(k < m % n);
        let mut idx = rng.permutation(pool.len());
        idx.truncate(quota);
        idx.sort_unstable();
        kept.extend(idx.into_iter().map(|i| pool[i]));
    }
    buffer.entries = kept;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionCentroids {
    pub session: usize,
    pub centroids: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with `k` distinct seeded starting points and a fixed
/// number of iterations. Empty clusters keep their previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!("k = {k} with {} points", points.len())));
    }
    let dim = points[0].len();
    let mut centroids: Vec<Vec<f64>> = rng.permutation(points.len())[..k].iter().map(|&i| points[i].clone()).collect();
    let mut assign = vec![0usize; points.len()];
    for _ in 0..iters {
        for (a, p) in assign.iter_mut().zip(points) {
            *a = nearest(p, &centroids);
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(centroids)
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Session whose nearest centroid is closest to `feature`; ties go to the
/// lower session id.
pub fn infer_session(feature: &[f64], all: &[SessionCentroids]) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    let mut sorted: Vec<&SessionCentroids> = all.iter().collect();
    sorted.sort_by_key(|s| s.session);
    for s in sorted {
        for c in &s.centroids {
            let d = sq_dist(feature, c);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, s.session));
            }
        }
    }
    best.map(|(_, s)| s).ok_or_else(|| Error::Protocol("no session centroids fitted".into()))
}

/// Frozen copy of the model at the end of a session.
#[derive(Clone, Debug)]
pub struct ModelSnapshot<T> {
    pub detector: Detector<T>,
    pub session: usize,
    pub hash: String,
}

impl<T: Real> ModelSnapshot<T> {
    pub fn take(detector: &Detector<T>, session: usize) -> Self {
        Self {
            detector: detector.clone(),
            session,
            hash: detector.hash_params(None),
        }
    }

    pub fn verify(&self) -> Result<()> {
        if self.detector.hash_params(None) != self.hash {
            return Err(Error::Protocol(format!("snapshot of session {} was modified", self.session)));
        }
        Ok(())
    }
}

fn to_real<T: Real>(px: &[f32]) -> Vec<T> {
    px.iter().map(|&v| T::of(v as f64)).collect()
}

/// Per-session diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub position: usize,
    pub dataset: usize,
    pub train_size: usize,
    /// Mean training loss over the last epoch; absent without training steps.
    pub final_loss: Option<f64>,
    pub num_classes: usize,
    pub backbone_hash: String,
    pub snapshot_hash: Option<String>,
}

/// Everything a continual run carries from session to session.
#[derive(Clone, Debug)]
pub struct ContinualState<T> {
    pub detector: Detector<T>,
    pub recipe: Recipe,
    pub bench: BenchmarkConfig,
    pub train: TrainConfig,
    pub buffer: RehearsalBuffer,
    pub snapshot: Option<ModelSnapshot<T>>,
    pub fisher: Vec<FisherEntry<T>>,
    pub centroids: Vec<SessionCentroids>,
    pub sessions_done: usize,
    /// Dataset index learned at each position.
    pub learned: Vec<usize>,
    pub access_log: AccessLog,
    pub logs: Vec<SessionLog>,
    base_backbone_hash: Option<String>,
}

impl<T: Real> ContinualState<T> {
    pub fn new(bench: BenchmarkConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let recipe = bench.recipe();
        let detector = Detector::new(train.backbone.clone(), recipe.head, &mut stream(bench.seed, Stream::Model, 0))?;
        Ok(Self {
            detector,
            recipe,
            buffer: RehearsalBuffer::new(bench.buffer),
            bench,
            train,
            snapshot: None,
            fisher: Vec::new(),
            centroids: Vec::new(),
            sessions_done: 0,
            learned: Vec::new(),
            access_log: AccessLog::default(),
            logs: Vec::new(),
            base_backbone_hash: None,
        })
    }

    pub fn class_of_position(p: usize) -> usize {
        p + 1
    }

    /// Class a test sample should be assigned, if its source was learned.
    pub fn true_class(&self, s: &ImageSample) -> Option<usize> {
        if !s.is_deepart() {
            return Some(CONART_CLASS);
        }
        self.learned.iter().position(|&d| d == s.session).map(Self::class_of_position)
    }

    fn loss_scale(&self) -> f64 {
        match self.recipe.head {
            HeadKind::Cosine => self.train.cosine_scale,
            HeadKind::Linear => 1.0,
        }
    }

    fn prompt_index(&self, session: usize) -> Option<usize> {
        self.detector.prompts.iter().position(|p| p.session == session)
    }

    /// Prompt set used to train position `p`.
    fn training_prompt(&self, p: usize) -> Option<usize> {
        if self.recipe.session_prompts {
            self.prompt_index(p)
        } else {
            self.prompt_index(0)
        }
    }

    /// Train the session at the next position on dataset `d`.
    pub fn run_session(&mut self, data: &Dataset, d: usize) -> Result<()> {
        let p = self.sessions_done;
        if p == 0 && d != 0 {
            return Err(Error::Protocol(format!("base session must be dataset 0, got {d}")));
        }
        if p > 0 {
            let expected = self.bench.order.get(p - 1).copied();
            if expected != Some(d) {
                return Err(Error::Protocol(format!("session {p} expected dataset {expected:?}, got {d}")));
            }
        }
        let set = data
            .train
            .get(d)
            .ok_or_else(|| Error::Protocol(format!("dataset {d} missing")))?;
        if p > 0 && set.count_conarts() > 0 {
            return Err(Error::Protocol(format!("non-base session {p} contains conarts")));
        }
        self.learned.push(d);
        let seed = self.bench.seed;

        // heads and prompts for the new classes
        if p == 0 {
            self.detector.add_prompt_set(0, &mut stream(seed, Stream::Prompt, 0))?;
            self.detector.add_head(0, 2, &mut stream(seed, Stream::Head, 0))?;
        } else {
            if self.recipe.session_prompts {
                self.detector.add_prompt_set(p, &mut stream(seed, Stream::Prompt, p as u64))?;
            }
            self.detector.add_head(p, 1, &mut stream(seed, Stream::Head, p as u64))?;
        }
        let own: Vec<TrainItem> = set
            .samples
            .iter()
            .map(|s| TrainItem {
                sample: s,
                class: if s.is_deepart() { Self::class_of_position(p) } else { CONART_CLASS },
                origin: p,
            })
            .collect();
        let items = if p > 0 && matches!(self.bench.kind, BenchmarkKind::Cdd1 | BenchmarkKind::Cdd2) {
            share_negatives(self.bench.kind, &self.buffer, &own, data)?
        } else {
            own.clone()
        };
        for it in &items {
            self.access_log.record(p, it.origin);
        }
        if self.bench.kind == BenchmarkKind::Cdd3 && p > 0 {
            if !self.buffer.is_empty() || items.iter().any(|it| it.origin < p) {
                return Err(Error::Protocol(format!("cdd3 session {p} read stored samples")));
            }
        }

        let prompt = self.training_prompt(p);
        let (mode, epochs, lr) = if p == 0 {
            (self.train.base_tuning, self.train.base_epochs, self.train.base_lr)
        } else {
            let (e, lr) = self.train.session_schedule(self.bench.flags.any());
            (self.recipe.tuning, e, lr)
        };
        self.detector.set_trainable(mode, prompt);
        if p > 0 && !self.train.old_heads_trainable {
            for h in &self.detector.heads.heads {
                if h.session != p {
                    for id in std::iter::once(h.weight).chain(h.bias) {
                        self.detector.store.set_trainable(id, false);
                    }
                }
            }
        }

        let kd = if p > 0 && self.recipe.kd {
            Some(self.kd_targets(&items)?)
        } else {
            None
        };
        let final_loss = self.fit(&items, kd.as_ref(), epochs, lr, prompt, p)?;

        if self.recipe.ewc {
            self.accumulate_fisher(&own, prompt, p)?;
        }
        if self.recipe.session_prompts {
            self.fit_centroids(&own, p)?;
        }
        let new_entries: Vec<BufferEntry> = own
            .iter()
            .enumerate()
            .map(|(i, it)| BufferEntry {
                dataset: d,
                index: i,
                class: it.class,
                origin: p,
                id: it.sample.id,
            })
            .collect();
        update_buffer(&mut self.buffer, &new_entries, self.bench.kind, &mut stream(seed, Stream::Buffer, p as u64))?;

        let backbone_hash = self.detector.hash_params(Some(&self.detector.backbone_ids()));
        match &self.base_backbone_hash {
            None => self.base_backbone_hash = Some(backbone_hash.clone()),
            Some(h) if self.recipe.tuning != TuningMode::FullFinetune && *h != backbone_hash => {
                return Err(Error::Protocol(format!("backbone changed in frozen session {p}")));
            }
            _ => {}
        }
        let snapshot_hash = self.snapshot.as_ref().map(|s| s.hash.clone());
        self.snapshot = Some(ModelSnapshot::take(&self.detector, p));
        self.sessions_done += 1;
        let expected = 2 + p;
        if self.detector.num_classes() != expected {
            return Err(Error::Protocol(format!(
                "{} classes after session {p}, expected {expected}",
                self.detector.num_classes()
            )));
        }
        self.logs.push(SessionLog {
            position: p,
            dataset: d,
            train_size: items.len(),
            final_loss,
            num_classes: self.detector.num_classes(),
            backbone_hash,
            snapshot_hash,
        });
        Ok(())
    }

    /// Previous model's logits on every training item, `[n, C_old]`.
    fn kd_targets(&self, items: &[TrainItem]) -> Result<Tensor<T>> {
        let snap = self
            .snapshot
            .as_ref()
            .ok_or_else(|| Error::Protocol("distillation without a previous model".into()))?;
        snap.verify()?;
        let prompt = if self.recipe.session_prompts {
            snap.detector.prompts.iter().position(|ps| ps.session == snap.session)
        } else {
            snap.detector.prompts.iter().position(|ps| ps.session == 0)
        };
        let c_old = snap.detector.num_classes();
        let scale = T::of(self.loss_scale());
        let mut out = Vec::with_capacity(items.len() * c_old);
        for chunk in items.chunks(256) {
            let imgs: Vec<Vec<T>> = chunk.iter().map(|it| to_real(&it.sample.pixels)).collect();
            let refs: Vec<&[T]> = imgs.iter().map(|v| v.as_slice()).collect();
            out.extend(snap.detector.infer_logits(&refs, prompt)?.data().iter().map(|&v| v * scale));
        }
        Tensor::new(&[items.len(), c_old], out)
    }

    fn fit(
        &mut self,
        items: &[TrainItem],
        kd: Option<&Tensor<T>>,
        epochs: usize,
        lr: f64,
        prompt: Option<usize>,
        p: usize,
    ) -> Result<Option<f64>> {
        let bs = self.train.batch_size;
        let steps_per_epoch = items.len().div_ceil(bs);
        let horizon = epochs * steps_per_epoch;
        if horizon == 0 {
            return Ok(None);
        }
        let mut opt = OptimState::new(&self.detector.store, lr, self.train.momentum, horizon)?;
        let c_old = kd.map_or(0, |t| t.last_dim());
        let scale = T::of(self.loss_scale());
        let mut last = 0.0;
        for epoch in 0..epochs {
            let order = stream(self.bench.seed, Stream::Shuffle, ((p as u64) << 20) | epoch as u64).permutation(items.len());
            let mut total = 0.0;
            for batch in order.chunks(bs) {
                let imgs: Vec<Vec<T>> = batch.iter().map(|&i| to_real(&items[i].sample.pixels)).collect();
                let refs: Vec<&[T]> = imgs.iter().map(|v| v.as_slice()).collect();
                let labels: Vec<usize> = batch.iter().map(|&i| items[i].class).collect();
                self.detector.store.zero_grad();
                let mut g = Graph::new();
                let z = self.detector.logits(&mut g, &refs, prompt)?;
                let z = g.scale(z, scale);
                let mut loss = cross_entropy(&mut g, z, &labels)?;
                if let Some(t) = kd {
                    let mut rows = Vec::with_capacity(batch.len() * c_old);
                    for &i in batch {
                        rows.extend_from_slice(t.row(i));
                    }
                    let old = Tensor::new(&[batch.len(), c_old], rows)?;
                    let k = kd_loss(&mut g, z, &old, self.train.tau)?;
                    let k = g.scale(k, T::of(self.train.lambda_kd));
                    loss = g.add(loss, k)?;
                }
                if self.recipe.ewc {
                    if let Some(pen) = ewc_penalty(&mut g, &self.detector.store, &self.fisher, self.train.lambda_ewc)? {
                        loss = g.add(loss, pen)?;
                    }
                }
                total += g.value(loss).item().f64() * batch.len() as f64;
                g.backward(loss, &mut self.detector.store)?;
                opt.step(&mut self.detector.store)?;
            }
            last = total / items.len() as f64;
            if !last.is_finite() {
                return Err(Error::Protocol(format!("loss diverged in session {p}, epoch {epoch}")));
            }
        }
        Ok(Some(last))
    }

    fn accumulate_fisher(&mut self, own: &[TrainItem], prompt: Option<usize>, p: usize) -> Result<()> {
        let n = own.len().min(self.train.fisher_samples).max(1);
        let idx = &stream(self.bench.seed, Stream::Fisher, p as u64).permutation(own.len())[..n.min(own.len())];
        let imgs: Vec<(Vec<T>, usize)> = idx.iter().map(|&i| (to_real(&own[i].sample.pixels), own[i].class)).collect();
        let data: Vec<(&[T], usize)> = imgs.iter().map(|(v, c)| (v.as_slice(), *c)).collect();
        let fresh = self.detector.estimate_fisher(&data, prompt, self.loss_scale())?;
        for e in fresh {
            match self.fisher.iter_mut().find(|f| f.param == e.param) {
                Some(f) => {
                    f.fisher.add_assign(&e.fisher);
                    f.anchor = e.anchor;
                }
                None => self.fisher.push(e),
            }
        }
        Ok(())
    }

    fn fit_centroids(&mut self, own: &[TrainItem], p: usize) -> Result<()> {
        let feats = self.promptless_features(own.iter().map(|it| it.sample))?;
        let centroids = kmeans(
            &feats,
            self.train.kmeans_k,
            self.train.kmeans_iters,
            &mut stream(self.bench.seed, Stream::Kmeans, p as u64),
        )?;
        self.centroids.push(SessionCentroids { session: p, centroids });
        Ok(())
    }

    fn promptless_features<'a>(&self, samples: impl Iterator<Item = &'a ImageSample>) -> Result<Vec<Vec<f64>>> {
        let samples: Vec<&ImageSample> = samples.collect();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let imgs: Vec<Vec<T>> = chunk.iter().map(|s| to_real(&s.pixels)).collect();
            let refs: Vec<&[T]> = imgs.iter().map(|v| v.as_slice()).collect();
            let f = self.detector.infer_features(&refs, None)?;
            out.extend((0..chunk.len()).map(|r| f.row(r).iter().map(|v| v.f64()).collect()));
        }
        Ok(out)
    }

    /// Predict every sample of a test set.
    pub fn evaluate(&self, set: &SessionData) -> Result<Evaluation> {
        let mut records = Vec::with_capacity(set.len());
        let mut session_hits = (0usize, 0usize);
        for chunk in set.samples.chunks(256) {
            let imgs: Vec<Vec<T>> = chunk.iter().map(|s| to_real(&s.pixels)).collect();
            let refs: Vec<&[T]> = imgs.iter().map(|v| v.as_slice()).collect();
            let rows: Vec<(Vec<f64>, Option<usize>)> = if self.recipe.session_prompts {
                self.session_routed_logits(chunk, &refs)?
            } else {
                let z = self.detector.infer_logits(&refs, self.prompt_index(0))?;
                (0..chunk.len()).map(|r| (z.row(r).iter().map(|v| v.f64()).collect(), None)).collect()
            };
            for (s, (z, routed)) in chunk.iter().zip(rows) {
                let pred = predict(&z, self.train.score_mode)?;
                if let (Some(r), true) = (routed, s.is_deepart()) {
                    session_hits.1 += 1;
                    let truth = self.learned.iter().position(|&d| d == s.session);
                    session_hits.0 += usize::from(truth == Some(r));
                }
                records.push(PredRecord::new(s, self.true_class(s), pred));
            }
        }
        Evaluation::from_records(set.session, records, self.recipe.session_prompts.then_some(session_hits))
    }

    /// Route each sample to a session by nearest centroid, then score it
    /// with that session's prompts over the conart class and that
    /// session's head.
    fn session_routed_logits(&self, chunk: &[ImageSample], refs: &[&[T]]) -> Result<Vec<(Vec<f64>, Option<usize>)>> {
        let feats = self.promptless_features(chunk.iter())?;
        let routes: Vec<usize> = feats
            .iter()
            .map(|f| infer_session(f, &self.centroids))
            .collect::<Result<_>>()?;
        let mut out = vec![(Vec::new(), None); chunk.len()];
        let mut by_session: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &r) in routes.iter().enumerate() {
            by_session.entry(r).or_default().push(i);
        }
        for (session, members) in by_session {
            let sub: Vec<&[T]> = members.iter().map(|&i| refs[i]).collect();
            let z = self.detector.infer_logits(&sub, self.prompt_index(session))?;
            let head = self
                .detector
                .heads
                .head_for_session(session)
                .ok_or_else(|| Error::Protocol(format!("no head for session {session}")))?;
            for (r, &i) in members.iter().enumerate() {
                let row: Vec<f64> = z
                    .row(r)
                    .iter()
                    .enumerate()
                    .map(|(c, v)| {
                        if c == CONART_CLASS || head.classes.contains(&c) {
                            v.f64()
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                out[i] = (row, Some(session));
            }
        }
        Ok(out)
    }
}

/// One test-set prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredRecord {
    pub sample_id: u64,
    pub dataset: usize,
    pub is_deepart: bool,
    pub true_class: Option<usize>,
    pub pred_class: usize,
    pub pred_deepart: bool,
    pub score: f64,
}

impl PredRecord {
    fn new(s: &ImageSample, true_class: Option<usize>, pred: Prediction) -> Self {
        Self {
            sample_id: s.id,
            dataset: s.session,
            is_deepart: s.is_deepart(),
            true_class,
            pred_class: pred.class,
            pred_deepart: pred.is_deepart(),
            score: pred.score,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub dataset: usize,
    pub accuracy: f64,
    pub ap: f64,
    pub records: Vec<PredRecord>,
    /// `(correct, total)` session routings of deepart samples.
    pub routing: Option<(usize, usize)>,
}

impl Evaluation {
    fn from_records(dataset: usize, records: Vec<PredRecord>, routing: Option<(usize, usize)>) -> Result<Self> {
        let pred: Vec<bool> = records.iter().map(|r| r.pred_deepart).collect();
        let truth: Vec<bool> = records.iter().map(|r| r.is_deepart).collect();
        let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
        Ok(Self {
            dataset,
            accuracy: binary_accuracy(&pred, &truth)?,
            ap: average_precision(&scores, &truth)?,
            records,
            routing,
        })
    }
}

/// CA over prediction records; an unlearned deepart source has no correct
/// class.
pub fn ca_from_records(records: &[PredRecord]) -> Result<f64> {
    let pred: Vec<usize> = records.iter().map(|r| r.pred_class).collect();
    let truth: Vec<usize> = records.iter().map(|r| r.true_class.unwrap_or(usize::MAX)).collect();
    ca(&pred, &truth)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetResult {
    pub dataset: usize,
    pub generator: u8,
    pub name: String,
    pub accuracy: f64,
    pub ap: f64,
}

/// Result of one benchmark run.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkOutcome {
    pub config: BenchmarkConfig,
    pub recipe: Recipe,
    pub matrix: Option<AccuracyMatrix>,
    /// Final results in dataset order.
    pub per_dataset: Vec<DatasetResult>,
    pub aa: f64,
    pub af: Option<f64>,
    pub map: f64,
    pub ca: f64,
    pub session_inference_accuracy: Option<f64>,
    pub access_log: AccessLog,
    pub sessions: Vec<SessionLog>,
    pub predictions: Vec<PredRecord>,
}

/// Trained base-session models keyed by everything they depend on, so
/// ablation cells sharing a seed and head type train the base only once.
#[derive(Default)]
pub struct BaseCache<T> {
    entries: HashMap<String, (Detector<T>, Option<f64>)>,
}

impl<T: Real> BaseCache<T> {
    pub fn new() -> Self {
        Self { entries: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn base_key(data: &Dataset, bench: &BenchmarkConfig, train: &TrainConfig, recipe: &Recipe) -> Result<String> {
    let key = (
        &data.manifest,
        bench.seed,
        recipe.head,
        &train.backbone,
        train.base_epochs,
        train.base_lr,
        train.base_tuning,
        train.batch_size,
        train.momentum,
        train.cosine_scale,
    );
    serde_json::to_string(&key).map_err(|e| Error::Config(e.to_string()))
}

/// Callback after each completed session (checkpointing).
pub type SessionHook<'a, T> = dyn FnMut(&ContinualState<T>) -> Result<()> + 'a;

/// Run a once-for-all or continual benchmark end to end.
pub fn run_benchmark<T: Real>(
    data: &Dataset,
    bench: &BenchmarkConfig,
    train: &TrainConfig,
    cache: Option<&mut BaseCache<T>>,
    hook: &mut SessionHook<'_, T>,
) -> Result<BenchmarkOutcome> {
    if bench.kind == BenchmarkKind::Jdd {
        return run_joint(data, bench, train, hook);
    }
    let n = data.train.len();
    bench.validate(n)?;
    if bench.kind.is_continual() && bench.order.len() + 1 != n {
        return Err(Error::Config(format!(
            "{} needs an order over all {} non-base sessions",
            bench.kind,
            n - 1
        )));
    }
    let mut state = ContinualState::<T>::new(bench.clone(), train.clone())?;
    let key = base_key(data, bench, train, &state.recipe)?;
    let cached = cache.as_ref().and_then(|c| c.entries.get(&key)).cloned();
    match cached {
        Some(det) => run_base_from(&mut state, data, det)?,
        None => {
            let mut trained = state.clone();
            trained.recipe.ewc = false;
            trained.recipe.session_prompts = false;
            // the base session is identical for every recipe with this head
            // type; only the bookkeeping after it differs
            let base = train_base_detector(&mut trained, data)?;
            if let Some(c) = cache {
                c.entries.insert(key, base.clone());
            }
            run_base_from(&mut state, data, base)?;
        }
    }
    hook(&state)?;

    let sessions = 1 + bench.order.len();
    let mut matrix = AccuracyMatrix::new(sessions)?;
    let record_column = |state: &ContinualState<T>, j: usize, matrix: &mut AccuracyMatrix| -> Result<()> {
        for (i, &d) in state.learned.iter().enumerate() {
            matrix.record(i, j, state.evaluate(&data.test[d])?.accuracy)?;
        }
        Ok(())
    };
    record_column(&state, 0, &mut matrix)?;
    for (j, &d) in bench.order.iter().enumerate() {
        state.run_session(data, d)?;
        if bench.kind == BenchmarkKind::Cdd3 && state.access_log.historical_reads() > 0 {
            return Err(Error::Protocol("cdd3 access log shows historical reads".into()));
        }
        hook(&state)?;
        record_column(&state, j + 1, &mut matrix)?;
    }
    finish(state, data, bench.kind.is_continual().then_some(matrix))
}

/// Train only the base session and return the model.
fn train_base_detector<T: Real>(state: &mut ContinualState<T>, data: &Dataset) -> Result<(Detector<T>, Option<f64>)> {
    let mut s = state.clone();
    s.bench.kind = BenchmarkKind::Odd;
    s.bench.buffer = 0;
    s.buffer = RehearsalBuffer::new(0);
    s.run_session(data, 0)?;
    let loss = s.logs[0].final_loss;
    Ok((s.detector, loss))
}

/// Replay the base session's bookkeeping on top of an already trained base
/// model.
fn run_base_from<T: Real>(state: &mut ContinualState<T>, data: &Dataset, (trained, loss): (Detector<T>, Option<f64>)) -> Result<()> {
    let (e, lr) = (state.train.base_epochs, state.train.base_lr);
    state.train.base_epochs = 0;
    let res = state.run_session(data, 0);
    state.train.base_epochs = e;
    state.train.base_lr = lr;
    res?;
    // run_session added the base head and prompts with fresh values; take
    // the trained ones and redo the post-training steps that read them
    state.detector = trained;
    state.fisher.clear();
    state.centroids.clear();
    let own: Vec<TrainItem> = data.train[0]
        .samples
        .iter()
        .map(|s| TrainItem {
            sample: s,
            class: if s.is_deepart() { 1 } else { CONART_CLASS },
            origin: 0,
        })
        .collect();
    let prompt = state.training_prompt(0);
    state.detector.set_trainable(state.train.base_tuning, prompt);
    if state.recipe.ewc {
        state.accumulate_fisher(&own, prompt, 0)?;
    }
    if state.recipe.session_prompts {
        state.fit_centroids(&own, 0)?;
    }
    let backbone_hash = state.detector.hash_params(Some(&state.detector.backbone_ids()));
    state.base_backbone_hash = Some(backbone_hash.clone());
    state.snapshot = Some(ModelSnapshot::take(&state.detector, 0));
    if let Some(log) = state.logs.last_mut() {
        log.backbone_hash = backbone_hash;
        log.final_loss = loss;
    }
    Ok(())
}

fn finish<T: Real>(state: ContinualState<T>, data: &Dataset, matrix: Option<AccuracyMatrix>) -> Result<BenchmarkOutcome> {
    let mut per_dataset = Vec::new();
    let mut predictions = Vec::new();
    let mut routing = (0usize, 0usize);
    let mut routed = false;
    for set in &data.test {
        let ev = state.evaluate(set)?;
        if let Some((c, t)) = ev.routing {
            routed = true;
            routing.0 += c;
            routing.1 += t;
        }
        per_dataset.push(DatasetResult {
            dataset: set.session,
            generator: set.generator,
            name: generator_name(set.generator),
            accuracy: ev.accuracy,
            ap: ev.ap,
        });
        predictions.extend(ev.records);
    }
    let accs: Vec<f64> = per_dataset.iter().map(|r| r.accuracy).collect();
    let aps: Vec<f64> = per_dataset.iter().map(|r| r.ap).collect();
    let (aa_v, af_v) = match &matrix {
        Some(m) => {
            let v = aa(m)?;
            let f = if m.size() >= 2 { Some(af(m)?) } else { None };
            (v, f)
        }
        None => (crate::metrics::mean(&accs), None),
    };
    Ok(BenchmarkOutcome {
        config: state.bench.clone(),
        recipe: state.recipe,
        matrix,
        per_dataset,
        aa: aa_v,
        af: af_v,
        map: map_score(&aps)?,
        ca: ca_from_records(&predictions)?,
        session_inference_accuracy: routed.then(|| routing.0 as f64 / routing.1.max(1) as f64),
        access_log: state.access_log.clone(),
        sessions: state.logs.clone(),
        predictions,
    })
}

/// Joint training on the union of every session: one model, one class per
/// source, no continual constraints.
pub fn run_joint<T: Real>(
    data: &Dataset,
    bench: &BenchmarkConfig,
    train: &TrainConfig,
    hook: &mut SessionHook<'_, T>,
) -> Result<BenchmarkOutcome> {
    let n = data.train.len();
    let mut b = bench.clone();
    b.kind = BenchmarkKind::Jdd;
    b.order = (1..n).collect();
    b.validate(n)?;
    let mut state = ContinualState::<T>::new(b, train.clone())?;
    state.recipe.session_prompts = false;
    state.recipe.ewc = false;
    let seed = bench.seed;
    state.detector.add_prompt_set(0, &mut stream(seed, Stream::Prompt, 0))?;
    state.detector.add_head(0, 2, &mut stream(seed, Stream::Head, 0))?;
    for p in 1..n {
        state.detector.add_head(p, 1, &mut stream(seed, Stream::Head, p as u64))?;
    }
    state.learned = (0..n).collect();
    let items: Vec<TrainItem> = data
        .train
        .iter()
        .flat_map(|set| {
            set.samples.iter().map(move |s| TrainItem {
                sample: s,
                class: if s.is_deepart() { set.session + 1 } else { CONART_CLASS },
                origin: 0,
            })
        })
        .collect();
    for it in &items {
        state.access_log.record(0, it.origin);
    }
    let prompt = state.prompt_index(0);
    state.detector.set_trainable(train.base_tuning, prompt);
    let loss = state.fit(&items, None, train.base_epochs, train.base_lr, prompt, 0)?;
    state.sessions_done = n;
    let backbone_hash = state.detector.hash_params(Some(&state.detector.backbone_ids()));
    state.logs.push(SessionLog {
        position: 0,
        dataset: 0,
        train_size: items.len(),
        final_loss: loss,
        num_classes: state.detector.num_classes(),
        backbone_hash,
        snapshot_hash: None,
    });
    if state.detector.num_classes() != n + 1 {
        return Err(Error::Protocol(format!("joint model has {} classes", state.detector.num_classes())));
    }
    hook(&state)?;
    finish(state, data, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_splits, DatasetManifest};

    #[test]
    fn transform_examples() {
        let lwf = transform_method(base_recipe(BaseMethod::Lwf), FrameworkFlags::ALL);
        assert_eq!(lwf.tuning, TuningMode::PromptTune);
        assert_eq!(lwf.head, HeadKind::Cosine);
        assert!(lwf.kd);
        let naive = transform_method(base_recipe(BaseMethod::NaiveFt), FrameworkFlags::default());
        assert_eq!(naive, base_recipe(BaseMethod::NaiveFt));
        assert_eq!(naive.tuning, TuningMode::FullFinetune);
        assert!(!naive.kd && !naive.ewc);
        for m in [BaseMethod::NaiveFt, BaseMethod::Lwf, BaseMethod::Ewc, BaseMethod::SPromptsStyle, BaseMethod::Replay] {
            for f in FrameworkFlags::grid() {
                let once = transform_method(base_recipe(m), f);
                assert_eq!(transform_method(once, f), once);
            }
        }
        assert!("icarl".parse::<BaseMethod>().is_err());
        assert_eq!(FrameworkFlags::grid().len(), 8);
        assert!(!FrameworkFlags::grid()[0].any());
        assert_eq!(FrameworkFlags::grid()[7], FrameworkFlags::ALL);
    }

    fn entries(class: usize, n: usize, origin: usize) -> Vec<BufferEntry> {
        (0..n)
            .map(|i| BufferEntry {
                dataset: origin,
                index: i,
                class,
                origin,
                id: (origin * 10_000 + class * 1000 + i) as u64,
            })
            .collect()
    }

    #[test]
    fn buffer_stratification() {
        let mut rng = Rng::new(1);
        let mut b = RehearsalBuffer::new(1000);
        let mut base = entries(0, 2000, 0);
        base.extend(entries(1, 2100, 0));
        update_buffer(&mut b, &base, BenchmarkKind::Cdd1, &mut rng).unwrap();
        assert_eq!((b.count_class(0), b.count_class(1)), (500, 500));
        update_buffer(&mut b, &entries(2, 500, 1), BenchmarkKind::Cdd1, &mut rng).unwrap();
        assert_eq!(b.len(), 1000);
        assert!(b.count_class(0) >= 333 && b.count_class(2) >= 333);

        let mut c = RehearsalBuffer::new(500);
        update_buffer(&mut c, &base, BenchmarkKind::Cdd2, &mut rng).unwrap();
        for s in 1..4 {
            update_buffer(&mut c, &entries(s + 1, 500, s), BenchmarkKind::Cdd2, &mut rng).unwrap();
        }
        assert_eq!(c.len(), 500);
        assert_eq!(c.count_class(0), 500);

        let mut z = RehearsalBuffer::new(0);
        update_buffer(&mut z, &base, BenchmarkKind::Cdd1, &mut rng).unwrap();
        assert!(z.is_empty());
    }

    #[test]
    fn buffer_selection_is_seeded() {
        let base = entries(0, 300, 0);
        let mut a = RehearsalBuffer::new(50);
        let mut b = RehearsalBuffer::new(50);
        update_buffer(&mut a, &base, BenchmarkKind::Cdd2, &mut Rng::new(4)).unwrap();
        update_buffer(&mut b, &base, BenchmarkKind::Cdd2, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kmeans_cases() {
        let same = vec![vec![1.0, 2.0]; 6];
        let c = kmeans(&same, 3, 50, &mut Rng::new(0)).unwrap();
        assert!(c.iter().all(|v| v == &vec![1.0, 2.0]));
        assert!(kmeans(&same, 7, 50, &mut Rng::new(0)).is_err());

        let mut rng = Rng::new(5);
        let mut pts = Vec::new();
        for i in 0..20 {
            let (cx, cy) = if i < 10 { (0.0, 0.0) } else { (50.0, 50.0) };
            pts.push(vec![cx + rng.normal() * 0.1, cy + rng.normal() * 0.1]);
        }
        let mean = |r: std::ops::Range<usize>| {
            let n = r.len() as f64;
            let (sx, sy) = pts[r].iter().fold((0.0, 0.0), |a, p| (a.0 + p[0], a.1 + p[1]));
            vec![sx / n, sy / n]
        };
        let (m0, m1) = (mean(0..10), mean(10..20));
        let c = kmeans(&pts, 2, 50, &mut Rng::new(9)).unwrap();
        for m in [&m0, &m1] {
            assert!(c.iter().any(|x| sq_dist(x, m).sqrt() < 1e-3));
        }
        assert_eq!(c, kmeans(&pts, 2, 50, &mut Rng::new(9)).unwrap());
    }

    #[test]
    fn session_inference_rules() {
        let all = vec![
            SessionCentroids {
                session: 1,
                centroids: vec![vec![1.0, 0.0]],
            },
            SessionCentroids {
                session: 0,
                centroids: vec![vec![-1.0, 0.0], vec![5.0, 5.0]],
            },
        ];
        assert_eq!(infer_session(&[5.0, 5.0], &all).unwrap(), 0);
        assert_eq!(infer_session(&[1.0, 0.0], &all).unwrap(), 1);
        assert_eq!(infer_session(&[0.0, 0.0], &all).unwrap(), 0);
        assert!(infer_session(&[0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn order_and_validation() {
        let o = default_session_order(3, 5);
        let mut s = o.clone();
        s.sort_unstable();
        assert_eq!(s, vec![1, 2, 3, 4]);
        assert_eq!(o, default_session_order(3, 5));
        let bad = BenchmarkConfig {
            kind: BenchmarkKind::Cdd3,
            buffer: 10,
            order: o.clone(),
            method: BaseMethod::NaiveFt,
            flags: FrameworkFlags::default(),
            seed: 0,
        };
        assert!(bad.validate(5).is_err());
        let bad = BenchmarkConfig {
            buffer: 0,
            order: vec![1, 1, 2, 3],
            ..bad
        };
        assert!(bad.validate(5).is_err());
    }

    fn tiny_data() -> Dataset {
        make_splits(&DatasetManifest {
            seed: 2,
            height: 16,
            width: 16,
            generators: vec![1, 2, 3],
            base_train_conarts: 12,
            base_train_deeparts: 12,
            session_train_deeparts: 8,
            test_conarts: 4,
            test_deeparts: 4,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            backbone: BackboneConfig {
                height: 16,
                width: 16,
                channels: 1,
                patch: 8,
                dim: 8,
                layers: 1,
                heads: 2,
                mlp_ratio: 2,
                prompt_len: 2,
                prompt_depth: 1,
            },
            base_epochs: 1,
            epochs: Some(1),
            batch_size: 8,
            fisher_samples: 4,
            kmeans_k: 2,
            ..Default::default()
        }
    }

    fn bench(kind: BenchmarkKind, buffer: usize, method: BaseMethod, flags: FrameworkFlags) -> BenchmarkConfig {
        BenchmarkConfig {
            kind,
            buffer,
            order: if kind == BenchmarkKind::Odd { vec![] } else { vec![2, 1] },
            method,
            flags,
            seed: 7,
        }
    }

    #[test]
    fn cdd_sessions_track_invariants() {
        let data = tiny_data();
        let mut hook = |_: &ContinualState<f64>| Ok(());
        for (kind, m) in [(BenchmarkKind::Cdd1, 6), (BenchmarkKind::Cdd2, 6), (BenchmarkKind::Cdd3, 0)] {
            let b = bench(kind, m, BaseMethod::Lwf, FrameworkFlags::ALL);
            let out = run_benchmark::<f64>(&data, &b, &tiny_train(), None, &mut hook).unwrap();
            let mat = out.matrix.as_ref().unwrap();
            assert_eq!(mat.size(), 3);
            assert!(out.af.is_some());
            assert_eq!(out.sessions.last().unwrap().num_classes, 4);
            // frozen backbone across all sessions
            let h = &out.sessions[0].backbone_hash;
            assert!(out.sessions.iter().all(|s| &s.backbone_hash == h));
            if kind == BenchmarkKind::Cdd3 {
                assert_eq!(out.access_log.historical_reads(), 0);
            } else {
                assert!(out.access_log.historical_reads() > 0);
            }
            // each session's distillation source is the previous snapshot
            for w in out.sessions.windows(2) {
                assert!(w[1].snapshot_hash.is_some());
            }
        }
    }

    #[test]
    fn odd_is_cdd_without_sessions() {
        let data = tiny_data();
        let mut hook = |_: &ContinualState<f64>| Ok(());
        let odd = bench(BenchmarkKind::Odd, 0, BaseMethod::NaiveFt, FrameworkFlags::default());
        let a = run_benchmark::<f64>(&data, &odd, &tiny_train(), None, &mut hook).unwrap();
        assert!(a.af.is_none() && a.matrix.is_none());
        assert_eq!(a.per_dataset.len(), 3);
        // the same machinery with a continual kind and no later sessions
        let mut state = ContinualState::<f64>::new(
            BenchmarkConfig {
                kind: BenchmarkKind::Cdd3,
                ..odd.clone()
            },
            tiny_train(),
        )
        .unwrap();
        state.run_session(&data, 0).unwrap();
        for (set, r) in data.test.iter().zip(&a.per_dataset) {
            assert_eq!(state.evaluate(set).unwrap().accuracy, r.accuracy);
        }
    }

    #[test]
    fn base_cache_is_transparent() {
        let data = tiny_data();
        let mut hook = |_: &ContinualState<f64>| Ok(());
        let b = bench(BenchmarkKind::Cdd2, 6, BaseMethod::Ewc, FrameworkFlags::default());
        let plain = run_benchmark::<f64>(&data, &b, &tiny_train(), None, &mut hook).unwrap();
        let mut cache = BaseCache::new();
        let warm = bench(BenchmarkKind::Cdd3, 0, BaseMethod::NaiveFt, FrameworkFlags::default());
        run_benchmark::<f64>(&data, &warm, &tiny_train(), Some(&mut cache), &mut hook).unwrap();
        assert_eq!(cache.len(), 1);
        let cached = run_benchmark::<f64>(&data, &b, &tiny_train(), Some(&mut cache), &mut hook).unwrap();
        assert_eq!(plain, cached);
    }

    #[test]
    fn joint_and_session_prompt_runs() {
        let data = tiny_data();
        let mut hook = |_: &ContinualState<f64>| Ok(());
        let j = bench(BenchmarkKind::Jdd, 0, BaseMethod::NaiveFt, FrameworkFlags::default());
        let out = run_benchmark::<f64>(&data, &j, &tiny_train(), None, &mut hook).unwrap();
        assert_eq!(out.sessions[0].num_classes, 4);
        assert!(out.af.is_none());
        let s = bench(BenchmarkKind::Cdd2, 6, BaseMethod::SPromptsStyle, FrameworkFlags::default());
        let out = run_benchmark::<f64>(&data, &s, &tiny_train(), None, &mut hook).unwrap();
        assert!(out.session_inference_accuracy.is_some());
    }

    #[test]
    fn sessions_out_of_order_rejected() {
        let data = tiny_data();
        let b = bench(BenchmarkKind::Cdd3, 0, BaseMethod::NaiveFt, FrameworkFlags::default());
        let mut state = ContinualState::<f64>::new(b, tiny_train()).unwrap();
        assert!(state.run_session(&data, 1).is_err());
        state.run_session(&data, 0).unwrap();
        assert!(state.run_session(&data, 1).is_err());
        state.run_session(&data, 2).unwrap();
        assert!(share_negatives(BenchmarkKind::Cdd3, &state.buffer, &[], &data).is_err());
    }
}
