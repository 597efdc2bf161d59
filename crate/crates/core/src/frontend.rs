//! Audio front-end: log-mel spectrograms, patch grids, positional encodings
//! and the frame/clip summaries of encoder outputs.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Result};
use crate::tensor::Matrix;

pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms analysis window.
pub const WIN_LENGTH: usize = 400;
pub const N_FFT: usize = 400;
/// 10 ms hop.
pub const HOP_LENGTH: usize = 160;
pub const N_MELS: usize = 80;
pub const F_MIN: f64 = 50.0;
pub const F_MAX: f64 = 8000.0;
/// Added to mel power before the natural log.
pub const LOG_FLOOR: f64 = 1e-7;
pub const PATCH: usize = 16;
pub const PATCH_DIM: usize = PATCH * PATCH;
/// Dataset statistics used to standardize log-mel values.
pub const NORM_MEAN: f64 = -7.26;
pub const NORM_STD: f64 = 4.35;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `[n_mels × frames]` log-mel values.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Matrix,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.cols()
    }

    pub fn bins(&self) -> usize {
        self.values.rows()
    }
}

/// A spectrogram cut into flattened 16×16 patches, frequency-major:
/// patch `(f, t)` sits at index `f * n_t + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patches: Matrix,
    pub n_f: usize,
    pub n_t: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.n_f * self.n_t
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Log-mel extractor with a cached FFT plan, window and filterbank.
pub struct LogMel {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: Matrix,
}

impl Default for LogMel {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMel {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        // periodic Hann
        let window = (0..WIN_LENGTH)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / WIN_LENGTH as f64).cos())
            .collect();
        Self {
            fft,
            window,
            filterbank: mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE as f64, F_MIN, F_MAX),
        }
    }

    pub fn filterbank(&self) -> &Matrix {
        &self.filterbank
    }

    /// `[N_FFT/2+1 × frames]` power spectrogram with reflect-centered frames;
    /// frame `t` is centred on sample `t * HOP_LENGTH`.
    pub fn power_spectrogram(&self, w: &Waveform) -> Result<Matrix> {
        if w.is_empty() {
            return invalid("empty waveform");
        }
        if w.sample_rate != SAMPLE_RATE {
            return invalid(format!("sample rate {} != {SAMPLE_RATE}", w.sample_rate));
        }
        let n = w.len();
        let frames = n.div_ceil(HOP_LENGTH);
        let bins = N_FFT / 2 + 1;
        let half = N_FFT as isize / 2;
        let mut out = Matrix::zeros(bins, frames);
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        for t in 0..frames {
            let start = (t * HOP_LENGTH) as isize - half;
            for (k, b) in buf.iter_mut().enumerate() {
                let s = w.samples[reflect_index(start + k as isize, n)] as f64;
                *b = Complex::new(s * self.window[k], 0.0);
            }
            self.fft.process(&mut buf);
            for (k, c) in buf.iter().take(bins).enumerate() {
                out.set(k, t, c.norm_sqr());
            }
        }
        Ok(out)
    }

    pub fn compute(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let power = self.power_spectrogram(w)?;
        let mel = self.filterbank.matmul(&power);
        Ok(MelSpectrogram {
            values: mel.map(|v| (v + LOG_FLOOR).ln()),
        })
    }
}

/// Mirror an out-of-range index back into `0..n` (no edge repeat).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

fn hz_to_mel(f: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= MIN_LOG_HZ {
        min_log_mel + (f / MIN_LOG_HZ).ln() / logstep
    } else {
        f / F_SP
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        MIN_LOG_HZ * (logstep * (m - min_log_mel)).exp()
    } else {
        F_SP * m
    }
}

/// Slaney-style triangular filters with area normalization, `[n_mels × n_fft/2+1]`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sr: f64, fmin: f64, fmax: f64) -> Matrix {
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Matrix::zeros(n_mels, bins);
    for m in 0..n_mels {
        let (left, center, right) = (pts[m], pts[m + 1], pts[m + 2]);
        let enorm = 2.0 / (right - left);
        for k in 0..bins {
            let f = k as f64 * sr / n_fft as f64;
            let lower = (f - left) / (center - left);
            let upper = (right - f) / (right - center);
            let w = lower.min(upper).max(0.0);
            fb.set(m, k, w * enorm);
        }
    }
    fb
}

/// `80 × ceil(len/160)` natural-log mel spectrogram.
pub fn compute_logmel(w: &Waveform) -> Result<MelSpectrogram> {
    LogMel::new().compute(w)
}

pub fn standardize(m: &MelSpectrogram, mean: f64, std: f64) -> Result<MelSpectrogram> {
    if !(std > 0.0) {
        return invalid(format!("standard deviation must be positive, got {std}"));
    }
    Ok(MelSpectrogram {
        values: m.values.map(|v| (v - mean) / std),
    })
}

pub fn unstandardize(m: &MelSpectrogram, mean: f64, std: f64) -> MelSpectrogram {
    MelSpectrogram {
        values: m.values.map(|v| v * std + mean),
    }
}

/// Zero-pads on the right or crops `target_frames` columns starting at `offset`.
pub fn pad_or_crop_to_grid(m: &MelSpectrogram, target_frames: usize, offset: usize) -> Result<MelSpectrogram> {
    if target_frames == 0 || target_frames % PATCH != 0 {
        return invalid(format!("target frames {target_frames} not a positive multiple of {PATCH}"));
    }
    let frames = m.frames();
    let mut out = Matrix::zeros(m.bins(), target_frames);
    if frames <= target_frames {
        for r in 0..m.bins() {
            out.row_mut(r)[..frames].copy_from_slice(m.values.row(r));
        }
    } else {
        if offset + target_frames > frames {
            return invalid(format!("crop offset {offset} overruns {frames} frames"));
        }
        for r in 0..m.bins() {
            out.row_mut(r)
                .copy_from_slice(&m.values.row(r)[offset..offset + target_frames]);
        }
    }
    Ok(MelSpectrogram { values: out })
}

pub fn patchify(m: &MelSpectrogram) -> Result<PatchGrid> {
    let (rows, cols) = m.values.shape();
    if rows == 0 || cols == 0 || rows % PATCH != 0 || cols % PATCH != 0 {
        return invalid(format!("{rows}x{cols} spectrogram is not divisible into {PATCH}x{PATCH} patches"));
    }
    let (n_f, n_t) = (rows / PATCH, cols / PATCH);
    let mut patches = Matrix::zeros(n_f * n_t, PATCH_DIM);
    for f in 0..n_f {
        for t in 0..n_t {
            let dst = patches.row_mut(f * n_t + t);
            for i in 0..PATCH {
                let src = &m.values.row(f * PATCH + i)[t * PATCH..(t + 1) * PATCH];
                dst[i * PATCH..(i + 1) * PATCH].copy_from_slice(src);
            }
        }
    }
    Ok(PatchGrid { patches, n_f, n_t })
}

pub fn unpatchify(grid: &PatchGrid) -> MelSpectrogram {
    let mut values = Matrix::zeros(grid.n_f * PATCH, grid.n_t * PATCH);
    for f in 0..grid.n_f {
        for t in 0..grid.n_t {
            let src = grid.patches.row(f * grid.n_t + t);
            for i in 0..PATCH {
                values.row_mut(f * PATCH + i)[t * PATCH..(t + 1) * PATCH]
                    .copy_from_slice(&src[i * PATCH..(i + 1) * PATCH]);
            }
        }
    }
    MelSpectrogram { values }
}

/// Standardized, padded/cropped patch grid for one waveform.
pub fn waveform_to_grid(logmel: &LogMel, w: &Waveform, target_frames: usize, offset: usize) -> Result<PatchGrid> {
    let mel = standardize(&logmel.compute(w)?, NORM_MEAN, NORM_STD)?;
    patchify(&pad_or_crop_to_grid(&mel, target_frames, offset)?)
}

/// Frame features `[n_t × n_f·D]` for each batch item and the clip features
/// `[B × n_f·D]` (time average of the frame features).
pub fn summarize_features(z: &[Matrix], n_f: usize, n_t: usize) -> Result<(Vec<Matrix>, Matrix)> {
    let d = z.first().map_or(0, Matrix::cols);
    let mut frames = Vec::with_capacity(z.len());
    let mut clip = Matrix::zeros(z.len(), n_f * d);
    for (b, item) in z.iter().enumerate() {
        if item.rows() != n_f * n_t || item.cols() != d {
            return invalid(format!(
                "feature shape {:?} does not match n_f*n_t={} x {d}",
                item.shape(),
                n_f * n_t
            ));
        }
        let mut frame = Matrix::zeros(n_t, n_f * d);
        for t in 0..n_t {
            let dst = frame.row_mut(t);
            for f in 0..n_f {
                dst[f * d..(f + 1) * d].copy_from_slice(item.row(f * n_t + t));
            }
        }
        let clip_row = clip.row_mut(b);
        for t in 0..n_t {
            for (c, v) in clip_row.iter_mut().zip(frame.row(t)) {
                *c += v;
            }
        }
        clip_row.iter_mut().for_each(|c| *c /= n_t as f64);
        frames.push(frame);
    }
    Ok((frames, clip))
}

/// Fixed 2-D sinusoidal positional encoding, `[n_f·n_t × dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    pub table: Matrix,
    pub n_f: usize,
    pub n_t: usize,
}

impl PositionalEncoding {
    /// First half of the channels encodes the frequency index, second half
    /// the time index; `dim` must be divisible by 4.
    pub fn sincos_2d(n_f: usize, n_t: usize, dim: usize) -> Result<Self> {
        if dim == 0 || dim % 4 != 0 {
            return invalid(format!("positional encoding dim {dim} must be a positive multiple of 4"));
        }
        let half = dim / 2;
        let mut table = Matrix::zeros(n_f * n_t, dim);
        for f in 0..n_f {
            for t in 0..n_t {
                let row = table.row_mut(f * n_t + t);
                fill_sincos(&mut row[..half], f as f64);
                fill_sincos(&mut row[half..], t as f64);
            }
        }
        Ok(Self { table, n_f, n_t })
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// Linear interpolation along time (end points aligned).
    pub fn interpolate(&self, new_n_t: usize) -> Result<Self> {
        if new_n_t < 1 {
            return invalid("new time length must be at least 1");
        }
        if new_n_t == self.n_t {
            return Ok(self.clone());
        }
        let dim = self.dim();
        let mut table = Matrix::zeros(self.n_f * new_n_t, dim);
        for f in 0..self.n_f {
            for t in 0..new_n_t {
                let pos = if new_n_t == 1 {
                    0.0
                } else {
                    t as f64 * (self.n_t - 1) as f64 / (new_n_t - 1) as f64
                };
                let lo = (pos.floor() as usize).min(self.n_t - 1);
                let hi = (lo + 1).min(self.n_t - 1);
                let frac = pos - lo as f64;
                let (a, b) = (self.table.row(f * self.n_t + lo), self.table.row(f * self.n_t + hi));
                let dst = table.row_mut(f * new_n_t + t);
                for c in 0..dim {
                    dst[c] = a[c] * (1.0 - frac) + b[c] * frac;
                }
            }
        }
        Ok(Self {
            table,
            n_f: self.n_f,
            n_t: new_n_t,
        })
    }
}

fn fill_sincos(out: &mut [f64], pos: f64) {
    let quarter = out.len() / 2;
    for i in 0..quarter {
        let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
        out[i] = (pos * omega).sin();
        out[quarter + i] = (pos * omega).cos();
    }
}

pub fn interpolate_posenc(pe: &PositionalEncoding, new_n_t: usize) -> Result<PositionalEncoding> {
    pe.interpolate(new_n_t)
}
