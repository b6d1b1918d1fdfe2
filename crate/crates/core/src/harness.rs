//! Run configuration, run directories, reports and the ablation grid.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml              effective configuration
//! checkpoints/session_<p>/ parameters after each session plus model.json
//! accuracy_matrix.csv      continual benchmarks only
//! access_log.csv           training reads per (session, origin session)
//! predictions.csv          final test-set predictions
//! report.json              RunReport
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, PromptSet};
use crate::engine::{checkpoint, Real};
use crate::error::{Error, Result};
use crate::heads::HeadBank;
use crate::metrics::AccuracyMatrix;
use crate::protocol::{
    default_session_order, run_benchmark, BaseCache, BaseMethod, BenchmarkConfig, BenchmarkKind, BenchmarkOutcome,
    ContinualState, DatasetResult, FrameworkFlags, PredRecord, Recipe, SessionLog, TrainConfig,
};
use crate::spectra::{average_spectrum, peak_score, ring_peak_score};
use crate::synth::{generator_freqs, make_splits, read_dataset, source_tag, summary_table, write_dataset, Dataset, DatasetManifest};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory; `{seed}` is replaced by the run seed.
    pub dir: PathBuf,
    /// Parameters used by `gen-data`.
    pub manifest: DatasetManifest,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            manifest: DatasetManifest::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub method: BaseMethod,
    pub kd: bool,
    pub cn: bool,
    pub pt: bool,
    pub buffer: usize,
    /// Dataset indices of the non-base sessions; derived from the seed when
    /// unset.
    pub order: Option<Vec<usize>>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            method: BaseMethod::NaiveFt,
            kd: false,
            cn: false,
            pt: false,
            buffer: 0,
            order: None,
        }
    }
}

impl StrategyConfig {
    pub fn flags(&self) -> FrameworkFlags {
        FrameworkFlags {
            kd: self.kd,
            cn: self.cn,
            pt: self.pt,
        }
    }

    pub fn set_flags(&mut self, f: FrameworkFlags) {
        self.kd = f.kd;
        self.cn = f.cn;
        self.pt = f.pt;
    }
}

/// Everything a run depends on. Files use TOML with sections `[data]`,
/// `[data.manifest]`, `[strategy]`, `[train]` and `[train.backbone]`; every
/// key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub benchmark: BenchmarkKind,
    pub seed: u64,
    pub precision: Precision,
    pub out: PathBuf,
    pub data: DataConfig,
    pub strategy: StrategyConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            benchmark: BenchmarkKind::Cdd3,
            seed: 0,
            precision: Precision::F32,
            out: PathBuf::from("runs/run"),
            data: DataConfig::default(),
            strategy: StrategyConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(self.data.dir.to_string_lossy().replace("{seed}", &self.seed.to_string()))
    }

    /// Number of datasets in the stream as configured.
    pub fn num_datasets(&self) -> usize {
        self.data.manifest.generators.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.manifest.validate()?;
        self.benchmark_config(self.num_datasets()).validate(self.num_datasets())
    }

    pub fn benchmark_config(&self, num_datasets: usize) -> BenchmarkConfig {
        let order = match (self.benchmark, &self.strategy.order) {
            (BenchmarkKind::Odd | BenchmarkKind::Jdd, _) => Vec::new(),
            (_, Some(o)) => o.clone(),
            (_, None) => default_session_order(self.seed, num_datasets),
        };
        BenchmarkConfig {
            kind: self.benchmark,
            buffer: self.strategy.buffer,
            order,
            method: self.strategy.method,
            flags: self.strategy.flags(),
            seed: self.seed,
        }
    }

    /// The configuration as it bears on results: the output location is
    /// cleared.
    pub fn semantic(&self) -> Self {
        Self {
            out: PathBuf::new(),
            ..self.clone()
        }
    }

    /// SHA-256 over the semantic configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.semantic()).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: RunConfig,
    pub dataset: DatasetManifest,
    pub benchmark: BenchmarkKind,
    pub method: BaseMethod,
    pub flags: FrameworkFlags,
    pub recipe: Recipe,
    pub buffer: usize,
    pub order: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    /// Whether epochs and lr are the reference schedule rather than
    /// overrides.
    pub reference_schedule: bool,
    pub per_dataset: Vec<DatasetResult>,
    pub aa: f64,
    pub af: Option<f64>,
    pub map: f64,
    pub ca: f64,
    pub session_inference_accuracy: Option<f64>,
    pub matrix: Option<AccuracyMatrix>,
    pub historical_reads: usize,
    pub sessions: Vec<SessionLog>,
}

impl RunReport {
    fn new(cfg: &RunConfig, data: &Dataset, out: &BenchmarkOutcome) -> Self {
        let framework = cfg.strategy.flags().any();
        let (epochs, lr) = cfg.train.session_schedule(framework);
        Self {
            config_hash: cfg.hash(),
            config: cfg.semantic(),
            dataset: data.manifest.clone(),
            benchmark: out.config.kind,
            method: out.config.method,
            flags: out.config.flags,
            recipe: out.recipe,
            buffer: out.config.buffer,
            order: out.config.order.clone(),
            epochs,
            lr,
            reference_schedule: cfg.train.epochs.is_none() && cfg.train.lr.is_none(),
            per_dataset: out.per_dataset.clone(),
            aa: out.aa,
            af: out.af,
            map: out.map,
            ca: out.ca,
            session_inference_accuracy: out.session_inference_accuracy,
            matrix: out.matrix.clone(),
            historical_reads: out.access_log.historical_reads(),
            sessions: out.sessions.clone(),
        }
    }

    /// Row label such as `lwf +KD+CN+PT`.
    pub fn method_label(&self) -> String {
        let mut s = self.method.to_string();
        for (on, tag) in [(self.flags.kd, "KD"), (self.flags.cn, "CN"), (self.flags.pt, "PT")] {
            if on {
                s += if s.contains('+') { "+" } else { " +" };
                s += tag;
            }
        }
        s
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Refuse to reuse a non-empty directory unless forced.
fn claim_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(Error::Config(format!("{} exists and is not empty (use --force)", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generate the dataset described by the config and return the summary
/// table.
pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<String> {
    let manifest = &cfg.data.manifest;
    manifest.validate()?;
    let dir = cfg.data_dir();
    claim_dir(&dir, force)?;
    for stale in ["data", "manifest.json", "index.csv"] {
        let p = dir.join(stale);
        let res = if p.is_dir() { fs::remove_dir_all(&p) } else if p.exists() { fs::remove_file(&p) } else { Ok(()) };
        res.map_err(|e| Error::io(&p, e))?;
    }
    let data = make_splits(manifest)?;
    write_dataset(&dir, &data)?;
    Ok(summary_table(&data))
}

#[derive(Serialize)]
struct ModelLayout<'a> {
    session: usize,
    backbone: &'a Backbone,
    prompts: &'a [PromptSet],
    heads: &'a HeadBank,
}

fn save_session<T: Real>(dir: &Path, state: &ContinualState<T>) -> Result<()> {
    let p = state.sessions_done.saturating_sub(1);
    let ckpt = dir.join("checkpoints").join(format!("session_{p}"));
    let det = &state.detector;
    checkpoint::save(&det.store, &ckpt)?;
    let layout = ModelLayout {
        session: p,
        backbone: &det.backbone,
        prompts: &det.prompts,
        heads: &det.heads,
    };
    let json = serde_json::to_string_pretty(&layout).map_err(|e| Error::format(&ckpt, e.to_string()))?;
    write(&ckpt.join("model.json"), json)
}

fn predictions_csv(records: &[PredRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "dataset", "is_deepart", "true_class", "pred_class", "pred_deepart", "score"])
        .map_err(|e| Error::format("predictions.csv", e.to_string()))?;
    for r in records {
        w.write_record([
            r.sample_id.to_string(),
            r.dataset.to_string(),
            r.is_deepart.to_string(),
            r.true_class.map_or(String::new(), |c| c.to_string()),
            r.pred_class.to_string(),
            r.pred_deepart.to_string(),
            format!("{:.17e}", r.score),
        ])
        .map_err(|e| Error::format("predictions.csv", e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("predictions.csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Load the configured dataset and check it matches the stream the config
/// describes.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let data = read_dataset(&cfg.data_dir())?;
    if data.train.is_empty() {
        return Err(Error::format(cfg.data_dir(), "dataset has no sessions"));
    }
    Ok(data)
}

fn run_in<T: Real>(cfg: &RunConfig, data: &Dataset, dir: &Path, cache: Option<&mut BaseCache<T>>) -> Result<RunReport> {
    let bench = cfg.benchmark_config(data.train.len());
    bench.validate(data.train.len())?;
    write(&dir.join("config.toml"), cfg.to_toml()?)?;
    let mut hook = |state: &ContinualState<T>| save_session(dir, state);
    let outcome = run_benchmark::<T>(data, &bench, &cfg.train, cache, &mut hook)?;
    if bench.kind == BenchmarkKind::Cdd3 && outcome.access_log.historical_reads() > 0 {
        return Err(Error::Protocol("cdd3 run read stored samples".into()));
    }
    if let Some(m) = &outcome.matrix {
        write(&dir.join("accuracy_matrix.csv"), m.to_csv())?;
    }
    write(&dir.join("access_log.csv"), outcome.access_log.to_csv())?;
    write(&dir.join("predictions.csv"), predictions_csv(&outcome.predictions)?)?;
    let report = RunReport::new(cfg, data, &outcome);
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::format(dir.join("report.json"), e.to_string()))?;
    write(&dir.join("report.json"), json)?;
    Ok(report)
}

/// Run one benchmark end to end into `cfg.out`.
pub fn bench(cfg: &RunConfig, force: bool) -> Result<RunReport> {
    cfg.train.validate()?;
    let data = load_data(cfg)?;
    claim_dir(&cfg.out, force)?;
    match cfg.precision {
        Precision::F32 => run_in::<f32>(cfg, &data, &cfg.out, None),
        Precision::F64 => run_in::<f64>(cfg, &data, &cfg.out, None),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub flags: FrameworkFlags,
    pub seeds: Vec<u64>,
    pub aa: Vec<f64>,
    pub af: Vec<f64>,
}

impl AblationCell {
    pub fn mean_aa(&self) -> f64 {
        self.aa.iter().sum::<f64>() / self.aa.len() as f64
    }

    pub fn mean_af(&self) -> f64 {
        self.af.iter().sum::<f64>() / self.af.len() as f64
    }
}

/// The eight KD/CN/PT cells on CDD3, each over the same seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub method: BaseMethod,
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| KD | CN | PT | AA | AF |\n|:--:|:--:|:--:|---:|---:|\n");
        let mark = |b: bool| if b { "✓" } else { "" };
        for c in &self.cells {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.2} | {:.2} |",
                mark(c.flags.kd),
                mark(c.flags.cn),
                mark(c.flags.pt),
                100.0 * c.mean_aa(),
                100.0 * c.mean_af()
            );
        }
        s
    }
}

/// Run the ablation grid. Cell `(flags, seed)` goes to
/// `out/seed_<s>/kd<0|1>_cn<0|1>_pt<0|1>`.
pub fn ablate(cfg: &RunConfig, seeds: &[u64], force: bool) -> Result<AblationReport> {
    cfg.train.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    claim_dir(&cfg.out, force)?;
    let mut cells: Vec<AblationCell> = FrameworkFlags::grid()
        .into_iter()
        .map(|flags| AblationCell {
            flags,
            seeds: seeds.to_vec(),
            aa: Vec::new(),
            af: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        let mut base = cfg.clone();
        base.seed = seed;
        base.data.manifest.seed = seed;
        base.benchmark = BenchmarkKind::Cdd3;
        base.strategy.buffer = 0;
        let data = load_data(&base)?;
        match cfg.precision {
            Precision::F32 => ablate_seed::<f32>(&base, &data, &mut cells)?,
            Precision::F64 => ablate_seed::<f64>(&base, &data, &mut cells)?,
        }
    }
    let report = AblationReport {
        method: cfg.strategy.method,
        cells,
    };
    write(&cfg.out.join("ablation.md"), report.to_markdown())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::format(cfg.out.join("ablation.json"), e.to_string()))?;
    write(&cfg.out.join("ablation.json"), json)?;
    Ok(report)
}

fn ablate_seed<T: Real>(base: &RunConfig, data: &Dataset, cells: &mut [AblationCell]) -> Result<()> {
    let mut cache = BaseCache::<T>::new();
    for cell in cells.iter_mut() {
        let f = cell.flags;
        let mut c = base.clone();
        c.strategy.set_flags(f);
        c.out = base.out.join(format!("seed_{}", base.seed)).join(format!(
            "kd{}_cn{}_pt{}",
            u8::from(f.kd),
            u8::from(f.cn),
            u8::from(f.pt)
        ));
        fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
        let r = run_in::<T>(&c, data, &c.out, Some(&mut cache))?;
        cell.aa.push(r.aa);
        cell.af.push(r.af.ok_or_else(|| Error::Protocol("cdd3 run without forgetting".into()))?);
    }
    Ok(())
}

fn kind_rank(k: BenchmarkKind) -> u8 {
    match k {
        BenchmarkKind::Odd => 0,
        BenchmarkKind::Cdd1 => 1,
        BenchmarkKind::Cdd2 => 2,
        BenchmarkKind::Cdd3 => 3,
        BenchmarkKind::Jdd => 4,
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Markdown table over run reports grouped by benchmark and buffer size:
/// per-dataset accuracy, AA, AF (NA when undefined), mAP and CA.
pub fn render_table(reports: &[RunReport]) -> Result<String> {
    let first = reports.first().ok_or_else(|| Error::Config("no reports to render".into()))?;
    let names: Vec<String> = first.per_dataset.iter().map(|r| r.name.clone()).collect();
    for r in reports {
        let these: Vec<&String> = r.per_dataset.iter().map(|d| &d.name).collect();
        if these.len() != names.len() || these.iter().zip(&names).any(|(a, b)| *a != b) {
            return Err(Error::Config("reports cover different dataset streams".into()));
        }
        let mean = r.per_dataset.iter().map(|d| d.accuracy).sum::<f64>() / r.per_dataset.len() as f64;
        if (mean - r.aa).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "report {}: AA {} disagrees with its per-dataset mean {}",
                r.config_hash, r.aa, mean
            )));
        }
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by_key(|&i| (kind_rank(reports[i].benchmark), std::cmp::Reverse(reports[i].buffer)));

    let mut s = String::from("| Benchmark | M | Method |");
    for n in &names {
        let _ = write!(s, " {n} |");
    }
    s += " AA | AF | mAP | CA |\n|---|--:|---|";
    s += &"--:|".repeat(names.len() + 4);
    s.push('\n');
    for i in order {
        let r = &reports[i];
        let _ = write!(s, "| {} | {} | {} |", r.benchmark.as_str().to_uppercase(), r.buffer, r.method_label());
        for d in &r.per_dataset {
            let _ = write!(s, " {} |", pct(d.accuracy));
        }
        let af = r.af.map_or("NA".to_string(), pct);
        let _ = writeln!(s, " {} | {} | {} | {} |", pct(r.aa), af, pct(r.map), pct(r.ca));
    }
    Ok(s)
}

/// Load reports from run directories and render them.
pub fn report(dirs: &[PathBuf]) -> Result<String> {
    let reports: Vec<RunReport> = dirs.iter().map(|d| RunReport::load(d)).collect::<Result<_>>()?;
    render_table(&reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakRow {
    pub source: String,
    pub samples: usize,
    pub target: String,
    pub peak_score: f64,
    pub ring_score: f64,
}

/// Average spectrum per source tag (written as `<tag>.pgm` and
/// `<tag>.csv`) and peak scores of every source at every registered
/// generator's frequencies (`peaks.csv`). At most `limit` samples per
/// source are used, in dataset order.
pub fn spectra(corpus: &Path, out: &Path, limit: Option<usize>) -> Result<Vec<PeakRow>> {
    let data = read_dataset(corpus)?;
    let (h, w) = (data.manifest.height, data.manifest.width);
    let mut sources: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for s in data.all_samples() {
        let tag = source_tag(s.generator);
        let pos = match sources.iter().position(|(t, _)| *t == tag) {
            Some(p) => p,
            None => {
                sources.push((tag, Vec::new()));
                sources.len() - 1
            }
        };
        let bucket = &mut sources[pos].1;
        if limit.is_none_or(|l| bucket.len() < l) {
            bucket.push(s.pixels.iter().map(|&v| v as f64).collect());
        }
    }
    if sources.iter().all(|(_, v)| v.is_empty()) {
        return Err(Error::invalid(format!("corpus {} is empty", corpus.display())));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let targets: Vec<(String, Vec<(i64, i64)>)> = data
        .manifest
        .generators
        .iter()
        .map(|&g| Ok((source_tag(Some(g)), generator_freqs(g, h, w)?)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (tag, imgs) in &sources {
        let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
        let spec = average_spectrum(&refs, h, w, 1, tag.clone())?;
        let file = tag.replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_");
        write(&out.join(format!("{file}.pgm")), spec.to_pgm())?;
        write(&out.join(format!("{file}.csv")), spec.to_csv())?;
        for (target, freqs) in &targets {
            rows.push(PeakRow {
                source: tag.clone(),
                samples: imgs.len(),
                target: target.clone(),
                peak_score: peak_score(&spec, freqs)?,
                ring_score: ring_peak_score(&spec, freqs)?,
            });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Error::format(out.join("peaks.csv"), e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(out.join("peaks.csv"), e.to_string()))?;
    write(&out.join("peaks.csv"), bytes)?;
    Ok(rows)
}
