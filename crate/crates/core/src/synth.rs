//! Synthetic conart/deepart stream.
//!
//! Conarts are smooth random fields. A deepart is a conart plus a faint
//! cosine grid at frequencies unique to its generator, so each generator
//! leaves periodic peaks in the averaged spectrum. Every sample is produced
//! from an rng stream derived from `(seed, sample id)`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::Rng;
use crate::error::{Error, Result};
use crate::spectra::{fft2_complex, ifft2};

/// Frequencies below are given for a 32×32 image and scale with the size.
const REFERENCE_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub id: u8,
    pub name: String,
    /// `(fx, fy)` pairs in cycles per image at the reference size.
    pub freqs: Vec<(i64, i64)>,
}

pub fn registered_generators() -> Vec<GeneratorSpec> {
    let g = |id, name: &str, freqs: &[(i64, i64)]| GeneratorSpec {
        id,
        name: name.into(),
        freqs: freqs.to_vec(),
    };
    vec![
        g(1, "StableDiff", &[(10, 10), (-10, 10)]),
        g(2, "DALL-E2", &[(12, -6)]),
        g(3, "Imagen", &[(-6, 12)]),
        g(4, "Midjourney", &[(6, 12), (12, 6)]),
        g(5, "Parti", &[(14, 4), (4, 14)]),
    ]
}

pub fn generator(id: u8) -> Result<GeneratorSpec> {
    registered_generators()
        .into_iter()
        .find(|g| g.id == id)
        .ok_or_else(|| Error::invalid(format!("unknown generator id {id}")))
}

/// Generator `id`'s fingerprint frequencies at size `h × w`.
pub fn generator_freqs(id: u8, h: usize, w: usize) -> Result<Vec<(i64, i64)>> {
    let spec = generator(id)?;
    if h < REFERENCE_SIZE / 2 || w < REFERENCE_SIZE / 2 {
        return Err(Error::invalid(format!("deepart images need at least 16x16, got {h}x{w}")));
    }
    Ok(spec
        .freqs
        .iter()
        .map(|&(fx, fy)| (fx * w as i64 / REFERENCE_SIZE as i64, fy * h as i64 / REFERENCE_SIZE as i64))
        .collect())
}

pub fn source_tag(generator: Option<u8>) -> String {
    match generator {
        None => "conart".into(),
        Some(g) => generator_name(g),
    }
}

pub fn generator_name(id: u8) -> String {
    generator(id).map(|g| g.name).unwrap_or_else(|_| format!("gen{id}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One grayscale (or interleaved multi-channel) image. `label` is 0 for
/// conarts and the generator id otherwise; `session` is the dataset index
/// of the stream (0 = base).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: u64,
    pub pixels: Vec<f32>,
    pub label: usize,
    pub session: usize,
    pub generator: Option<u8>,
    pub split: Split,
}

impl ImageSample {
    pub fn is_deepart(&self) -> bool {
        self.generator.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionData {
    pub session: usize,
    pub generator: u8,
    pub split: Split,
    pub samples: Vec<ImageSample>,
}

impl SessionData {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_conarts(&self) -> usize {
        self.samples.iter().filter(|s| !s.is_deepart()).count()
    }
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::invalid(format!("image size {h}x{w} must be powers of two")));
    }
    Ok(())
}

fn normalize_unit(x: &mut [f64]) {
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    for v in x.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
    }
}

/// Smooth periodic random field: Gaussian-low-passed white noise plus one to four
/// soft-edged ellipses, min-max normalized to `[0, 1]`.
pub fn gen_conart(rng: &mut Rng, h: usize, w: usize) -> Result<Vec<f64>> {
    check_dims(h, w)?;
    let cutoff = 1.5 + 2.5 * rng.uniform();
    let mut field: Vec<Complex64> = (0..h * w).map(|_| Complex64::new(rng.normal(), 0.0)).collect();
    fft2_complex(&mut field, h, w)?;
    for y in 0..h {
        let fy = if y <= h / 2 { y as f64 } else { y as f64 - h as f64 };
        for x in 0..w {
            let fx = if x <= w / 2 { x as f64 } else { x as f64 - w as f64 };
            let r2 = (fx * fx + fy * fy) / (cutoff * cutoff);
            field[y * w + x] *= (-0.5 * r2).exp();
        }
    }
    let field = ifft2(&field, h, w)?;
    let mut img: Vec<f64> = field.iter().map(|z| z.re).collect();
    let std = (img.iter().map(|v| v * v).sum::<f64>() / img.len() as f64).sqrt().max(1e-12);
    img.iter_mut().for_each(|v| *v /= std);

    let n_ellipses = 1 + rng.below(4);
    for _ in 0..n_ellipses {
        let cx = rng.uniform() * w as f64;
        let cy = rng.uniform() * h as f64;
        let ra = (0.1 + 0.25 * rng.uniform()) * w as f64;
        let rb = (0.1 + 0.25 * rng.uniform()) * h as f64;
        let theta = rng.uniform() * std::f64::consts::PI;
        let amp = (rng.uniform() * 2.0 - 1.0) * 1.5;
        let soft = 1.0 + 2.0 * rng.uniform();
        let (s, c) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                // summing the nearest periodic copies keeps the field
                // periodic, so the spectrum has no boundary cross
                let mut acc = 0.0;
                for ky in -1..=1 {
                    for kx in -1..=1 {
                        let dx = x as f64 - cx + (kx * w as i64) as f64;
                        let dy = y as f64 - cy + (ky * h as i64) as f64;
                        let u = (c * dx + s * dy) / ra;
                        let v = (-s * dx + c * dy) / rb;
                        let d = (u * u + v * v).sqrt();
                        let edge = (1.0 - d) * ra.min(rb) / soft;
                        acc += 1.0 / (1.0 + (-edge).exp());
                    }
                }
                img[y * w + x] += amp * acc;
            }
        }
    }
    normalize_unit(&mut img);
    Ok(img)
}

/// Conart base drawn from `rng`, then generator `g`'s cosine grid with
/// amplitude `amplitude` and a random phase per frequency, clipped to
/// `[0, 1]`.
pub fn gen_deepart(rng: &mut Rng, g: u8, h: usize, w: usize, amplitude: f64) -> Result<Vec<f64>> {
    let freqs = generator_freqs(g, h, w)?;
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return Err(Error::invalid(format!("amplitude {amplitude} must be non-negative")));
    }
    let mut img = gen_conart(rng, h, w)?;
    let phases: Vec<f64> = freqs.iter().map(|_| rng.uniform() * std::f64::consts::TAU).collect();
    add_fingerprint(&mut img, &freqs, &phases, h, w, amplitude);
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(img)
}

fn add_fingerprint(img: &mut [f64], freqs: &[(i64, i64)], phases: &[f64], h: usize, w: usize, amplitude: f64) {
    if amplitude == 0.0 {
        return;
    }
    for (&(fx, fy), &ph) in freqs.iter().zip(phases) {
        for y in 0..h {
            for x in 0..w {
                let t = std::f64::consts::TAU * (fx as f64 * x as f64 / w as f64 + fy as f64 * y as f64 / h as f64);
                img[y * w + x] += amplitude * (t + ph).cos();
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Independent probability of blurring and of compressing.
    pub prob: f64,
    pub blur_sigma: (f64, f64),
    pub quality: (u32, u32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            prob: 0.0,
            blur_sigma: (0.0, 3.0),
            quality: (30, 100),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.blur_sigma;
        let (q0, q1) = self.quality;
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::Config(format!("augment probability {} outside [0, 1]", self.prob)));
        }
        if !(s0 >= 0.0 && s1 >= s0) {
            return Err(Error::Config(format!("blur sigma range ({s0}, {s1}) invalid")));
        }
        if !(1 <= q0 && q0 <= q1 && q1 <= 100) {
            return Err(Error::Config(format!("quality range ({q0}, {q1}) invalid")));
        }
        Ok(())
    }
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * img[y * w + reflect(x as i64 + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[reflect(y as i64 + d, h) * w + x])
                .sum();
        }
    }
    out
}

const LUMA_TABLE: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51,
    87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quality-scaled luminance quantization table (IJG scaling).
pub fn quant_table(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0.0; 64];
    for (o, &b) in t.iter_mut().zip(&LUMA_TABLE) {
        *o = ((b * scale + 50) / 100).clamp(1, 255) as f64;
    }
    t
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Round to the nearest of 256 levels, as when an image is stored with
/// 8 bits per sample.
pub fn quantize_8bit(img: &mut [f64]) {
    img.iter_mut().for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

/// 8×8 block DCT on 8-bit samples, quantize with the quality table,
/// dequantize, invert and round back to 8-bit samples.
pub fn block_dct_compress(img: &[f64], h: usize, w: usize, quality: u32) -> Result<Vec<f64>> {
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid(format!("block compression needs multiples of 8, got {h}x{w}")));
    }
    let c = dct_basis();
    let table = quant_table(quality);
    let mut out = vec![0.0; h * w];
    let mut block = [0.0; 64];
    let mut coef = [0.0; 64];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = (img[(by + y) * w + bx + x] * 255.0).round() - 128.0;
                }
            }
            for v in 0..8 {
                for u in 0..8 {
                    let mut s = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            s += c[v][y] * c[u][x] * block[y * 8 + x];
                        }
                    }
                    let t = table[v * 8 + u];
                    coef[v * 8 + u] = (s / t).round() * t;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    let mut s = 0.0;
                    for v in 0..8 {
                        for u in 0..8 {
                            s += c[v][y] * c[u][x] * coef[v * 8 + u];
                        }
                    }
                    out[(by + y) * w + bx + x] = (s + 128.0).round().clamp(0.0, 255.0) / 255.0;
                }
            }
        }
    }
    Ok(out)
}

/// With probability `prob` blur (σ uniform in range), independently with
/// probability `prob` block-compress (quality uniform in range); clip.
pub fn blur_jpeg_augment(img: &[f64], h: usize, w: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    let blur = rng.uniform() < cfg.prob;
    let sigma = cfg.blur_sigma.0 + (cfg.blur_sigma.1 - cfg.blur_sigma.0) * rng.uniform();
    let compress = rng.uniform() < cfg.prob;
    let quality = cfg.quality.0 + rng.below((cfg.quality.1 - cfg.quality.0 + 1) as usize) as u32;
    if !blur && !compress {
        return Ok(img.to_vec());
    }
    let mut out = img.to_vec();
    if blur {
        out = gaussian_blur(&out, h, w, sigma);
    }
    if compress {
        out = block_dct_compress(&out, h, w, quality)?;
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetManifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub amplitude: f64,
    /// Generator ids in stream order; the first one is the base session.
    pub generators: Vec<u8>,
    pub base_train_conarts: usize,
    pub base_train_deeparts: usize,
    pub session_train_deeparts: usize,
    pub test_conarts: usize,
    pub test_deeparts: usize,
    pub augment: AugmentConfig,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 32,
            width: 32,
            amplitude: 0.08,
            generators: vec![1, 2, 3, 4, 5],
            base_train_conarts: 2000,
            // the base generator's deepart/conart train ratio 65,556 / 62,154
            base_train_deeparts: 2109,
            session_train_deeparts: 500,
            test_conarts: 200,
            test_deeparts: 200,
            augment: AugmentConfig::default(),
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.height, self.width)?;
        if self.height % 8 != 0 || self.width % 8 != 0 || self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "image size {}x{} must be at least 16 and a multiple of 8",
                self.height, self.width
            )));
        }
        if self.generators.is_empty() || self.generators.len() > 5 {
            return Err(Error::Config(format!(
                "need between 1 and 5 generators, got {}",
                self.generators.len()
            )));
        }
        for (i, &g) in self.generators.iter().enumerate() {
            generator(g).map_err(|e| Error::Config(e.to_string()))?;
            if self.generators[..i].contains(&g) {
                return Err(Error::Config(format!("generator {g} listed twice")));
            }
        }
        let counts = [
            self.base_train_conarts,
            self.base_train_deeparts,
            self.session_train_deeparts,
            self.test_conarts,
            self.test_deeparts,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config(format!("amplitude {} must be positive", self.amplitude)));
        }
        self.augment.validate()
    }

    pub fn num_sessions(&self) -> usize {
        self.generators.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// `(split, session, generator or None for conarts, count)` in id order.
    fn layout(&self) -> Vec<(Split, usize, Option<u8>, usize)> {
        let mut out = Vec::new();
        for (s, &g) in self.generators.iter().enumerate() {
            if s == 0 {
                out.push((Split::Train, s, None, self.base_train_conarts));
                out.push((Split::Train, s, Some(g), self.base_train_deeparts));
            } else {
                out.push((Split::Train, s, Some(g), self.session_train_deeparts));
            }
            out.push((Split::Test, s, None, self.test_conarts));
            out.push((Split::Test, s, Some(g), self.test_deeparts));
        }
        out
    }
}

/// Generate one sample from its id-derived stream.
pub fn gen_sample(m: &DatasetManifest, id: u64, split: Split, session: usize, generator: Option<u8>) -> Result<ImageSample> {
    let mut rng = Rng::derive(m.seed, id);
    let (h, w) = (m.height, m.width);
    let img = match generator {
        None => gen_conart(&mut rng, h, w)?,
        Some(g) => gen_deepart(&mut rng, g, h, w, m.amplitude)?,
    };
    let mut img = blur_jpeg_augment(&img, h, w, &m.augment, &mut rng)?;
    quantize_8bit(&mut img);
    Ok(ImageSample {
        id,
        pixels: img.iter().map(|&v| v as f32).collect(),
        label: generator.map_or(0, usize::from),
        session,
        generator,
        split,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<SessionData>,
    pub test: Vec<SessionData>,
}

impl Dataset {
    pub fn all_samples(&self) -> impl Iterator<Item = &ImageSample> {
        self.train.iter().chain(&self.test).flat_map(|s| &s.samples)
    }
}

/// Materialize every session's train and test set.
pub fn make_splits(m: &DatasetManifest) -> Result<Dataset> {
    m.validate()?;
    let mut jobs = Vec::new();
    let mut id = 0u64;
    for (split, session, g, count) in m.layout() {
        for _ in 0..count {
            jobs.push((id, split, session, g));
            id += 1;
        }
    }
    let samples: Vec<ImageSample> = jobs
        .par_iter()
        .map(|&(id, split, session, g)| gen_sample(m, id, split, session, g))
        .collect::<Result<_>>()?;
    let mut train: Vec<SessionData> = Vec::new();
    let mut test: Vec<SessionData> = Vec::new();
    for (s, &g) in m.generators.iter().enumerate() {
        for (split, list) in [(Split::Train, &mut train), (Split::Test, &mut test)] {
            list.push(SessionData {
                session: s,
                generator: g,
                split,
                samples: Vec::new(),
            });
        }
    }
    for sample in samples {
        let list = match sample.split {
            Split::Train => &mut train,
            Split::Test => &mut test,
        };
        list[sample.session].samples.push(sample);
    }
    Ok(Dataset {
        manifest: m.clone(),
        train,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexRow {
    path: String,
    row: usize,
    id: u64,
    label: usize,
    session: usize,
    generator: u8,
    split: Split,
}

const MANIFEST: &str = "manifest.json";
const INDEX: &str = "index.csv";

/// Write `manifest.json`, `index.csv` and one raw little-endian `f32` file
/// per (session, split).
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("data")).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(&data.manifest).map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))?;
    fs::write(dir.join(MANIFEST), manifest).map_err(|e| Error::io(dir.join(MANIFEST), e))?;
    let index_path = dir.join(INDEX);
    let mut index = csv::Writer::from_path(&index_path).map_err(|e| Error::format(&index_path, e.to_string()))?;
    for set in data.train.iter().chain(&data.test) {
        let rel = format!("data/s{}_{}.bin", set.session, set.split.as_str());
        let mut bytes = Vec::with_capacity(set.len() * data.manifest.pixels() * 4);
        for (row, s) in set.samples.iter().enumerate() {
            for &v in &s.pixels {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            index
                .serialize(IndexRow {
                    path: rel.clone(),
                    row,
                    id: s.id,
                    label: s.label,
                    session: s.session,
                    generator: s.generator.unwrap_or(0),
                    split: s.split,
                })
                .map_err(|e| Error::format(&index_path, e.to_string()))?;
        }
        let path = dir.join(&rel);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    manifest.validate()?;
    let px = manifest.pixels();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (s, &g) in manifest.generators.iter().enumerate() {
        for (split, list) in [(Split::Train, &mut train), (Split::Test, &mut test)] {
            list.push(SessionData {
                session: s,
                generator: g,
                split,
                samples: Vec::new(),
            });
        }
    }
    let index_path = dir.join(INDEX);
    let mut reader = csv::Reader::from_path(&index_path).map_err(|e| Error::format(&index_path, e.to_string()))?;
    let mut cache: std::collections::HashMap<String, Vec<u8>> = Default::default();
    for row in reader.deserialize::<IndexRow>() {
        let row = row.map_err(|e| Error::format(&index_path, e.to_string()))?;
        if !cache.contains_key(&row.path) {
            let p = dir.join(&row.path);
            cache.insert(row.path.clone(), fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
        let bytes = &cache[&row.path];
        let start = row.row * px * 4;
        let chunk = bytes
            .get(start..start + px * 4)
            .ok_or_else(|| Error::format(dir.join(&row.path), format!("row {} out of range", row.row)))?;
        let pixels = chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let list = match row.split {
            Split::Train => &mut train,
            Split::Test => &mut test,
        };
        let set = list
            .get_mut(row.session)
            .ok_or_else(|| Error::format(&index_path, format!("session {} not in manifest", row.session)))?;
        set.samples.push(ImageSample {
            id: row.id,
            pixels,
            label: row.label,
            session: row.session,
            generator: (row.generator != 0).then_some(row.generator),
            split: row.split,
        });
    }
    Ok(Dataset { manifest, train, test })
}

/// Plain-text table of per-session counts.
pub fn summary_table(data: &Dataset) -> String {
    let mut s = format!(
        "{:<12} {:>13} {:>13} {:>12} {:>12}\n",
        "Generator", "train conart", "train deepart", "test conart", "test deepart"
    );
    for (tr, te) in data.train.iter().zip(&data.test) {
        let tc = tr.count_conarts();
        let ec = te.count_conarts();
        let tc_txt = if tc == 0 { "-".to_string() } else { tc.to_string() };
        s += &format!(
            "{:<12} {:>13} {:>13} {:>12} {:>12}\n",
            generator_name(tr.generator),
            tc_txt,
            tr.len() - tc,
            ec,
            te.len() - ec
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::high_frequency_energy;

    #[test]
    fn conart_is_deterministic_and_in_range() {
        let a = gen_conart(&mut Rng::new(3), 32, 32).unwrap();
        let b = gen_conart(&mut Rng::new(3), 32, 32).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(gen_conart(&mut Rng::new(3), 24, 32).is_err());
    }

    #[test]
    fn zero_amplitude_deepart_equals_conart() {
        let a = gen_conart(&mut Rng::new(9), 32, 32).unwrap();
        let b = gen_deepart(&mut Rng::new(9), 2, 32, 32, 0.0).unwrap();
        assert_eq!(a, b);
        assert!(gen_deepart(&mut Rng::new(9), 6, 32, 32, 0.1).is_err());
        assert!(gen_deepart(&mut Rng::new(9), 0, 32, 32, 0.1).is_err());
    }

    #[test]
    fn generators_differ_only_by_fingerprint() {
        // unclipped difference between two generators on the same base is
        // exactly the difference of their cosine grids
        let (h, w, eps) = (32, 32, 0.05);
        let base = gen_conart(&mut Rng::new(4), h, w).unwrap();
        let mut r1 = Rng::new(4);
        let mut r2 = Rng::new(4);
        let a = gen_deepart(&mut r1, 2, h, w, eps).unwrap();
        let b = gen_deepart(&mut r2, 3, h, w, eps).unwrap();
        let mut differs = 0;
        for i in 0..h * w {
            let fa = a[i] - base[i];
            let fb = b[i] - base[i];
            if a[i] > 0.0 && a[i] < 1.0 && b[i] > 0.0 && b[i] < 1.0 {
                assert!(fa.abs() <= eps + 1e-12 && fb.abs() <= eps + 1e-12);
                differs += usize::from((fa - fb).abs() > 1e-9);
            }
        }
        assert!(differs > h * w / 2);
    }

    #[test]
    fn frequencies_scale_with_size() {
        assert_eq!(generator_freqs(2, 32, 32).unwrap(), vec![(12, -6)]);
        assert_eq!(generator_freqs(2, 16, 16).unwrap(), vec![(6, -3)]);
        assert_eq!(generator_freqs(5, 64, 64).unwrap(), vec![(28, 8), (8, 28)]);
        assert!(generator_freqs(1, 8, 8).is_err());
        let all: Vec<(i64, i64)> = (1..=5).flat_map(|g| generator_freqs(g, 32, 32).unwrap()).collect();
        for (i, f) in all.iter().enumerate() {
            assert!(!all[..i].contains(f));
        }
    }

    #[test]
    fn augment_identity_at_zero_probability() {
        let img = gen_conart(&mut Rng::new(1), 32, 32).unwrap();
        let cfg = AugmentConfig::default();
        let out = blur_jpeg_augment(&img, 32, 32, &cfg, &mut Rng::new(2)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn blur_removes_high_frequencies() {
        let cfg = AugmentConfig {
            prob: 1.0,
            blur_sigma: (0.5, 3.0),
            quality: (100, 100),
        };
        for seed in 0..10 {
            let img = gen_deepart(&mut Rng::new(seed), 5, 32, 32, 0.08).unwrap();
            let out = blur_jpeg_augment(&img, 32, 32, &cfg, &mut Rng::new(100 + seed)).unwrap();
            assert!(high_frequency_energy(&out, 32, 32).unwrap() < high_frequency_energy(&img, 32, 32).unwrap());
        }
    }

    #[test]
    fn max_quality_roundtrip_within_one_level() {
        let cfg = AugmentConfig {
            prob: 1.0,
            blur_sigma: (0.0, 0.0),
            quality: (100, 100),
        };
        for seed in 0..10 {
            let mut img = gen_deepart(&mut Rng::new(seed), 1, 32, 32, 0.08).unwrap();
            quantize_8bit(&mut img);
            let out = blur_jpeg_augment(&img, 32, 32, &cfg, &mut Rng::new(seed)).unwrap();
            let err = img.iter().zip(&out).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1.0 / 255.0 + 1e-12, "max error {err}");
        }
    }

    #[test]
    fn quality_tables() {
        assert!(quant_table(100).iter().all(|&v| v == 1.0));
        assert_eq!(quant_table(50)[0], 16.0);
        assert!(quant_table(10)[0] > quant_table(90)[0]);
    }

    fn small_manifest() -> DatasetManifest {
        DatasetManifest {
            seed: 11,
            height: 16,
            width: 16,
            base_train_conarts: 6,
            base_train_deeparts: 7,
            session_train_deeparts: 3,
            test_conarts: 2,
            test_deeparts: 2,
            ..Default::default()
        }
    }

    #[test]
    fn splits_have_table_shape() {
        let d = make_splits(&small_manifest()).unwrap();
        assert_eq!(d.train.len(), 5);
        assert_eq!(d.train[0].count_conarts(), 6);
        assert_eq!(d.train[0].len(), 13);
        for s in &d.train[1..] {
            assert_eq!(s.count_conarts(), 0);
            assert_eq!(s.len(), 3);
        }
        for t in &d.test {
            assert_eq!(t.count_conarts(), 2);
            assert_eq!(t.len(), 4);
        }
        for s in d.all_samples() {
            assert_eq!(s.label, s.generator.map_or(0, usize::from));
        }
        let mut ids: Vec<u64> = d.all_samples().map(|s| s.id).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn default_counts_keep_base_balance() {
        let m = DatasetManifest::default();
        assert_eq!(m.base_train_conarts, 2000);
        let ratio = m.base_train_deeparts as f64 / m.base_train_conarts as f64;
        assert!((ratio - 65_556.0 / 62_154.0).abs() < 1e-3);
    }

    #[test]
    fn manifest_validation() {
        let mut m = small_manifest();
        m.generators = vec![1, 2, 3, 4, 5, 1];
        assert!(m.validate().is_err());
        let mut m = small_manifest();
        m.test_conarts = 0;
        assert!(make_splits(&m).is_err());
        let mut m = small_manifest();
        m.generators = vec![1, 9];
        assert!(m.validate().is_err());
    }

    #[test]
    fn dataset_roundtrip_and_determinism() {
        let m = small_manifest();
        let d = make_splits(&m).unwrap();
        assert_eq!(d, make_splits(&m).unwrap());
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
        let one = gen_sample(&m, 5, Split::Train, 0, None).unwrap();
        assert_eq!(one, d.train[0].samples[5]);
    }
}
