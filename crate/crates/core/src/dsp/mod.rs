//! Front-end feature extraction.
//!
//! Audio is framed (Hamming window, zero-padded FFT) into a power
//! spectrogram, from which two representations are derived:
//!
//! - log mel filterbank energies, the network input;
//! - log magnitude spectra, the reconstruction target.
//!
//! Both are carried in a [`FeatureMatrix`], which is also the on-disk
//! feature format (see [`crate::io`]).

mod mel;
mod wav;

use std::sync::Arc;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, MelFilterbank};
pub use wav::{read_wav, write_wav};

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Invalid("audio contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Framing and filterbank parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfig {
    pub sample_rate: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub fft_size: usize,
    pub n_mels: usize,
    pub log_floor: f64,
    pub low_freq_hz: f64,
    /// Pre-emphasis coefficient; 0 disables it.
    pub preemphasis: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            fft_size: 256,
            n_mels: 40,
            log_floor: 1e-10,
            low_freq_hz: 20.0,
            preemphasis: 0.0,
        }
    }
}

impl FrameConfig {
    pub fn frame_len_samples(&self) -> usize {
        (self.frame_length_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift_samples(&self) -> usize {
        (self.frame_shift_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let flen = self.frame_len_samples();
        let shift = self.frame_shift_samples();
        if self.sample_rate == 0 || flen == 0 || shift == 0 {
            return Err(Error::Invalid("frame length, shift and sample rate must be positive".into()));
        }
        if self.frame_shift_ms > self.frame_length_ms {
            return Err(Error::Invalid("frame shift exceeds frame length".into()));
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < flen {
            return Err(Error::Invalid(format!(
                "fft_size {} must be a power of two >= frame length {flen}",
                self.fft_size
            )));
        }
        if self.n_mels == 0 || self.n_mels > self.fft_size / 2 {
            return Err(Error::Invalid(format!(
                "n_mels {} must be in 1..={}",
                self.n_mels,
                self.fft_size / 2
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Invalid("log_floor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return Err(Error::Invalid("preemphasis must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    LogFbank,
    LogSpectrum,
    Spliced,
    Conditioned,
}

impl FeatureKind {
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::LogFbank => 0,
            FeatureKind::LogSpectrum => 1,
            FeatureKind::Spliced => 2,
            FeatureKind::Conditioned => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => FeatureKind::LogFbank,
            1 => FeatureKind::LogSpectrum,
            2 => FeatureKind::Spliced,
            3 => FeatureKind::Conditioned,
            _ => return None,
        })
    }
}

/// Row-major `frames x dim` matrix of per-frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
    pub frame_shift_ms: f64,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(
        frames: usize,
        dim: usize,
        data: Vec<f64>,
        frame_shift_ms: f64,
        kind: FeatureKind,
    ) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Empty("feature matrix needs at least one frame and one dim".into()));
        }
        if data.len() != frames * dim {
            return Err(Error::Shape(format!(
                "feature data length {} != {frames}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("feature matrix contains non-finite values".into()));
        }
        Ok(Self {
            frames,
            dim,
            data,
            frame_shift_ms,
            kind,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Frames `start..end` as a new matrix of the same kind.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::Invalid(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames
            )));
        }
        Self::new(
            end - start,
            self.dim,
            self.data[start * self.dim..end * self.dim].to_vec(),
            self.frame_shift_ms,
            self.kind,
        )
    }
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

fn frame_count(n_samples: usize, flen: usize, shift: usize) -> Result<usize> {
    if n_samples < flen {
        return Err(Error::TooShort {
            samples: n_samples,
            needed: flen,
        });
    }
    Ok(1 + (n_samples - flen) / shift)
}

/// `|FFT|^2` of each Hamming-windowed, zero-padded frame.
pub fn power_spectrogram(audio: &AudioBuffer, cfg: &FrameConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    if audio.sample_rate != cfg.sample_rate {
        return Err(Error::Invalid(format!(
            "audio sample rate {} does not match configured {}",
            audio.sample_rate, cfg.sample_rate
        )));
    }
    let flen = cfg.frame_len_samples();
    let shift = cfg.frame_shift_samples();
    let n_frames = frame_count(audio.samples.len(), flen, shift)?;
    let n_bins = cfg.n_bins();

    let signal: Vec<f64> = if cfg.preemphasis > 0.0 {
        let s = &audio.samples;
        (0..s.len())
            .map(|i| if i == 0 { s[0] } else { s[i] - cfg.preemphasis * s[i - 1] })
            .collect()
    } else {
        audio.samples.clone()
    };

    let window = hamming(flen);
    let fft: Arc<dyn rustfft::Fft<f64>> = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut out = Vec::with_capacity(n_frames * n_bins);
    for f in 0..n_frames {
        let frame = &signal[f * shift..f * shift + flen];
        for (slot, (x, w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *slot = Complex::new(x * w, 0.0);
        }
        for slot in buf.iter_mut().skip(flen) {
            *slot = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..n_bins].iter().map(|c| c.norm_sqr()));
    }
    FeatureMatrix::new(n_frames, n_bins, out, cfg.frame_shift_ms, FeatureKind::LogSpectrum)
}

/// Log mel energies of an existing power spectrogram.
pub fn log_fbank_from_power(
    power: &FeatureMatrix,
    bank: &MelFilterbank,
    log_floor: f64,
    frame_shift_ms: f64,
) -> Result<FeatureMatrix> {
    if power.dim() != bank.n_bins() {
        return Err(Error::Shape(format!(
            "power spectrogram has {} bins, filterbank expects {}",
            power.dim(),
            bank.n_bins()
        )));
    }
    let mut out = Vec::with_capacity(power.frames() * bank.n_mels());
    for row in power.rows() {
        out.extend(bank.apply(row).into_iter().map(|e| e.max(log_floor).ln()));
    }
    FeatureMatrix::new(
        power.frames(),
        bank.n_mels(),
        out,
        frame_shift_ms,
        FeatureKind::LogFbank,
    )
}

pub fn log_fbank(audio: &AudioBuffer, cfg: &FrameConfig) -> Result<FeatureMatrix> {
    let power = power_spectrogram(audio, cfg)?;
    let bank = mel_filterbank(cfg)?;
    log_fbank_from_power(&power, &bank, cfg.log_floor, cfg.frame_shift_ms)
}

/// Natural-log magnitude spectrum, `0.5 ln(max(power, floor^2))`.
pub fn log_spectrum(audio: &AudioBuffer, cfg: &FrameConfig) -> Result<FeatureMatrix> {
    let power = power_spectrogram(audio, cfg)?;
    let floor2 = cfg.log_floor * cfg.log_floor;
    let (t, d) = (power.frames(), power.dim());
    let data = power
        .into_data()
        .into_iter()
        .map(|p| 0.5 * p.max(floor2).ln())
        .collect();
    FeatureMatrix::new(t, d, data, cfg.frame_shift_ms, FeatureKind::LogSpectrum)
}

/// Appends to `out` the rows `t+o` for `o` in `-left..=right`, clamped to the
/// valid frame range.
pub fn splice_row_into(feat: &FeatureMatrix, t: usize, left: usize, right: usize, out: &mut Vec<f64>) {
    let last = feat.frames() as isize - 1;
    for o in -(left as isize)..=(right as isize) {
        let src = (t as isize + o).clamp(0, last) as usize;
        out.extend_from_slice(feat.row(src));
    }
}

/// Concatenates each frame with its `left`/`right` neighbours; edge frames
/// are replicated so the frame count is unchanged.
pub fn splice(feat: &FeatureMatrix, left: usize, right: usize) -> FeatureMatrix {
    let width = left + right + 1;
    let mut data = Vec::with_capacity(feat.frames() * feat.dim() * width);
    for t in 0..feat.frames() {
        splice_row_into(feat, t, left, right, &mut data);
    }
    FeatureMatrix {
        frames: feat.frames(),
        dim: feat.dim() * width,
        data,
        frame_shift_ms: feat.frame_shift_ms,
        kind: FeatureKind::Spliced,
    }
}

/// Per-column mean and standard deviation of a set of feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CmvnStats {
    pub fn accumulate<'a>(feats: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut n = 0usize;
        let mut mats = Vec::new();
        for f in feats {
            if sum.is_empty() {
                sum = vec![0.0; f.dim()];
            } else if sum.len() != f.dim() {
                return Err(Error::Shape("inconsistent feature dims in CMVN accumulation".into()));
            }
            for row in f.rows() {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
            }
            n += f.frames();
            mats.push(f);
        }
        if n == 0 {
            return Err(Error::Empty("no frames for CMVN statistics".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; mean.len()];
        for f in mats {
            for row in f.rows() {
                for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }

    /// Per-column factors applied after centring: `1 / std`, or 0 for a
    /// zero-variance column.
    pub fn inverse_std(&self) -> Vec<f64> {
        self.std.iter().map(|&d| if d > 1e-12 { 1.0 / d } else { 0.0 }).collect()
    }

    /// Subtracts the mean and divides by the deviation; zero-variance columns
    /// become zero.
    pub fn apply(&self, feat: &FeatureMatrix) -> Result<FeatureMatrix> {
        if feat.dim() != self.mean.len() {
            return Err(Error::Shape(format!(
                "CMVN stats have dim {}, features {}",
                self.mean.len(),
                feat.dim()
            )));
        }
        let d = feat.dim();
        let inv = self.inverse_std();
        let data = feat
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| (x - self.mean[i % d]) * inv[i % d])
            .collect();
        Ok(FeatureMatrix {
            data,
            ..feat.clone()
        })
    }
}

/// Per-utterance mean and variance normalisation.
pub fn cmvn(feat: &FeatureMatrix) -> FeatureMatrix {
    CmvnStats::accumulate([feat])
        .and_then(|s| s.apply(feat))
        .expect("stats computed from the same matrix")
}
