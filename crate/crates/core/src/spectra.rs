//! Radix-2 Fourier transforms and averaged log-magnitude spectra.
//!
//! Frequencies are addressed as signed pairs `(fx, fy)` in cycles per image,
//! with `fx` along the width. A centered [`Spectrum`] stores bin `(fx, fy)` at
//! row `fy + H/2`, column `fx + W/2` (both taken modulo the size).

use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pow2(h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::invalid(format!("transform size {h}x{w} is not a power of two")));
    }
    Ok(())
}

/// In-place iterative radix-2 transform of one line. `inverse` flips the
/// twiddle sign; no scaling is applied.
fn fft1(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let step = Complex64::from_polar(1.0, sign * 2.0 * std::f64::consts::PI / len as f64);
        for start in (0..n).step_by(len) {
            let mut tw = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let a = buf[start + k];
                let b = buf[start + k + len / 2] * tw;
                buf[start + k] = a + b;
                buf[start + k + len / 2] = a - b;
                tw *= step;
            }
        }
        len <<= 1;
    }
}

fn transform(data: &mut [Complex64], h: usize, w: usize, inverse: bool) -> Result<()> {
    check_pow2(h, w)?;
    if data.len() != h * w {
        return Err(Error::shape("fft2", format!("{} values for {h}x{w}", data.len())));
    }
    for row in data.chunks_mut(w) {
        fft1(row, inverse);
    }
    let mut col = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        fft1(&mut col, inverse);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    Ok(())
}

/// Forward 2-D DFT of a real row-major `h × w` image (unnormalized).
pub fn fft2(image: &[f64], h: usize, w: usize) -> Result<Vec<Complex64>> {
    let mut data: Vec<Complex64> = image.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut data, h, w, false)?;
    Ok(data)
}

pub fn fft2_complex(data: &mut [Complex64], h: usize, w: usize) -> Result<()> {
    transform(data, h, w, false)
}

/// Inverse 2-D DFT, scaled by `1/(h·w)`.
pub fn ifft2(spectrum: &[Complex64], h: usize, w: usize) -> Result<Vec<Complex64>> {
    let mut data = spectrum.to_vec();
    transform(&mut data, h, w, true)?;
    let s = 1.0 / (h * w) as f64;
    data.iter_mut().for_each(|v| *v *= s);
    Ok(data)
}

/// Wrap a signed frequency into `[0, n)`.
pub fn wrap_freq(f: i64, n: usize) -> usize {
    f.rem_euclid(n as i64) as usize
}

/// DC-centered magnitude spectrum averaged over a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub source: String,
    pub count: usize,
}

impl Spectrum {
    pub fn at(&self, fx: i64, fy: i64) -> f64 {
        let r = wrap_freq(fy + (self.height / 2) as i64, self.height);
        let c = wrap_freq(fx + (self.width / 2) as i64, self.width);
        self.data[r * self.width + c]
    }

    /// Signed frequency of a centered bin.
    pub fn freq_of(&self, row: usize, col: usize) -> (i64, i64) {
        (col as i64 - (self.width / 2) as i64, row as i64 - (self.height / 2) as i64)
    }

    /// Magnitudes of every bin except DC.
    pub fn off_dc(&self) -> Vec<f64> {
        let dc = (self.height / 2) * self.width + self.width / 2;
        self.data
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != dc)
            .map(|(_, &v)| v)
            .collect()
    }

    pub fn median_off_dc(&self) -> f64 {
        median(self.off_dc())
    }

    /// 8-bit binary PGM, scaled so the largest magnitude maps to 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let max = self.data.iter().copied().fold(0.0, f64::max);
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| {
            if max > 0.0 {
                (v / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
        out
    }

    /// One CSV row per bin: `fx,fy,magnitude`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fx,fy,magnitude\n");
        for row in 0..self.height {
            for col in 0..self.width {
                let (fx, fy) = self.freq_of(row, col);
                writeln!(s, "{fx},{fy},{:e}", self.data[row * self.width + col]).unwrap();
            }
        }
        s
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per image: zero-mean, `|FFT|`, `ln(1 + ·)`; then the plain mean over the
/// corpus in input order, shifted so DC sits at the center. Multi-channel
/// images (`channels` interleaved values per pixel) are averaged to gray
/// first.
pub fn average_spectrum(
    corpus: &[&[f64]],
    h: usize,
    w: usize,
    channels: usize,
    source: impl Into<String>,
) -> Result<Spectrum> {
    check_pow2(h, w)?;
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mut acc = vec![0.0; h * w];
    for (i, img) in corpus.iter().enumerate() {
        if img.len() != h * w * channels {
            return Err(Error::shape(
                "average_spectrum",
                format!("image {i} has {} values, expected {}", img.len(), h * w * channels),
            ));
        }
        let mut gray: Vec<f64> = img.chunks(channels).map(|p| p.iter().sum::<f64>() / channels as f64).collect();
        let mean = gray.iter().sum::<f64>() / gray.len() as f64;
        gray.iter_mut().for_each(|v| *v -= mean);
        let f = fft2(&gray, h, w)?;
        for (a, z) in acc.iter_mut().zip(&f) {
            *a += z.norm().ln_1p();
        }
    }
    let n = corpus.len() as f64;
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let r = (y + h / 2) % h;
            let c = (x + w / 2) % w;
            data[r * w + c] = acc[y * w + x] / n;
        }
    }
    Ok(Spectrum {
        height: h,
        width: w,
        data,
        source: source.into(),
        count: corpus.len(),
    })
}

fn check_nyquist(s: &Spectrum, freqs: &[(i64, i64)]) -> Result<()> {
    if freqs.is_empty() {
        return Err(Error::invalid("empty frequency set"));
    }
    for &(fx, fy) in freqs {
        if fx.unsigned_abs() as usize > s.width / 2 || fy.unsigned_abs() as usize > s.height / 2 {
            return Err(Error::invalid(format!("frequency ({fx}, {fy}) beyond Nyquist")));
        }
    }
    Ok(())
}

/// Mean magnitude at `freqs` over the median off-DC magnitude.
pub fn peak_score(s: &Spectrum, freqs: &[(i64, i64)]) -> Result<f64> {
    check_nyquist(s, freqs)?;
    let mean = freqs.iter().map(|&(fx, fy)| s.at(fx, fy)).sum::<f64>() / freqs.len() as f64;
    Ok(mean / s.median_off_dc())
}

/// Like [`peak_score`] but against the median of the bins sharing each
/// queried bin's radius (rounded), which factors out the smooth radial
/// fall-off of natural-image spectra.
pub fn ring_peak_score(s: &Spectrum, freqs: &[(i64, i64)]) -> Result<f64> {
    check_nyquist(s, freqs)?;
    let radius = |fx: i64, fy: i64| ((fx * fx + fy * fy) as f64).sqrt().round() as i64;
    let mut total = 0.0;
    for &(fx, fy) in freqs {
        let r = radius(fx, fy);
        let mut ring = Vec::new();
        for row in 0..s.height {
            for col in 0..s.width {
                let (gx, gy) = s.freq_of(row, col);
                if radius(gx, gy) == r {
                    ring.push(s.data[row * s.width + col]);
                }
            }
        }
        total += s.at(fx, fy) / median(ring);
    }
    Ok(total / freqs.len() as f64)
}

/// Fraction of spectral energy `Σ|X|²` in bins whose radius lies in the top
/// quarter of the radial range.
pub fn high_frequency_energy(image: &[f64], h: usize, w: usize) -> Result<f64> {
    let f = fft2(image, h, w)?;
    let rmax = (((h / 2).pow(2) + (w / 2).pow(2)) as f64).sqrt();
    let mut e = 0.0;
    for y in 0..h {
        for x in 0..w {
            let fy = if y < h / 2 { y as f64 } else { y as f64 - h as f64 };
            let fx = if x < w / 2 { x as f64 } else { x as f64 - w as f64 };
            if (fx * fx + fy * fy).sqrt() >= 0.75 * rmax {
                e += f[y * w + x].norm_sqr();
            }
        }
    }
    Ok(e)
}
