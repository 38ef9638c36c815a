//! Waveforms, framing, log-mel filterbank features and instance normalization.
//!
//! Fixed choices: 512-point FFT for 25 ms frames at 16 kHz, 40 triangular
//! filters on the HTK mel scale spanning 0 Hz to Nyquist, natural log with a
//! `1e-10` floor, no pre-emphasis and no voice activity detection.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const NUM_MELS: usize = 40;
pub const FFT_SIZE: usize = 512;
pub const WINDOW_SECS: f64 = 0.025;
pub const HOP_SECS: f64 = 0.010;
/// Added to every filter energy before the log.
pub const LOG_FLOOR: f64 = 1e-10;
/// Variance floor of instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument(
                "sample rate must be positive".into(),
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Number of samples spanned by `secs` at this rate.
    pub fn samples_for(&self, secs: f64) -> usize {
        secs_to_samples(secs, self.sample_rate)
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        peak(&self.samples)
    }

    /// Copies `len` samples starting at `start`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Waveform> {
        let end = start
            .checked_add(len)
            .filter(|&e| e <= self.samples.len())
            .ok_or(Error::TooShort {
                got: self.samples.len(),
                need: start.saturating_add(len),
            })?;
        Ok(Waveform {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Waveform {
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

pub fn secs_to_samples(secs: f64, sample_rate: u32) -> usize {
    (secs * sample_rate as f64).round() as usize
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn peak(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Overlapping, Hamming-windowed analysis frames (`T x W`).
#[derive(Debug, Clone)]
pub struct Frames {
    pub data: Array2<f64>,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Frames {
    pub fn count(&self) -> usize {
        self.data.nrows()
    }

    pub fn window_len(&self) -> usize {
        self.data.ncols()
    }
}

/// Symmetric Hamming window, `0.54 - 0.46 cos(2 pi n / (W - 1))`.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / denom).cos())
        .collect()
}

/// Number of frames for `len` samples, window `window` and hop `hop` (all in samples).
pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window || hop == 0 {
        0
    } else {
        (len - window) / hop + 1
    }
}

/// Slices `w` into Hamming-windowed frames of `window_secs` every `hop_secs`.
pub fn frame_signal(w: &Waveform, window_secs: f64, hop_secs: f64) -> Result<Frames> {
    if hop_secs.is_nan() || hop_secs <= 0.0 || window_secs < hop_secs {
        return Err(Error::InvalidArgument(format!(
            "need window >= hop > 0, got window {window_secs} s, hop {hop_secs} s"
        )));
    }
    let window = w.samples_for(window_secs);
    let hop = w.samples_for(hop_secs);
    if hop == 0 {
        return Err(Error::InvalidArgument(
            "hop is shorter than one sample".into(),
        ));
    }
    if w.len() < window {
        return Err(Error::TooShort {
            got: w.len(),
            need: window,
        });
    }
    let count = frame_count(w.len(), window, hop);
    let win = hamming(window);
    let samples = w.samples();
    let data = Array2::from_shape_fn((count, window), |(t, n)| samples[t * hop + n] * win[n]);
    Ok(Frames {
        data,
        hop,
        sample_rate: w.sample_rate(),
    })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters over the bins of a real FFT.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels x (fft_size / 2 + 1)`
    pub weights: Array2<f64>,
    /// Edge frequencies, `n_mels + 2` of them; filter `k` peaks at `edges_hz[k + 1]`.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_size: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Self {
        let n_bins = fft_size / 2 + 1;
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let weights = Array2::from_shape_fn((n_mels, n_bins), |(k, b)| {
            let f = b as f64 * bin_hz;
            let (lo, mid, hi) = (edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]);
            if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            }
        });
        Self { weights, edges_hz }
    }

    pub fn center_hz(&self, k: usize) -> f64 {
        self.edges_hz[k + 1]
    }

    pub fn n_mels(&self) -> usize {
        self.weights.nrows()
    }
}

/// Time x mel-band log energies.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    /// Seconds between consecutive rows.
    pub frame_shift: f64,
    pub normalized: bool,
}

impl FeatureMatrix {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bands(&self) -> usize {
        self.values.ncols()
    }

    /// Writes one CSV row per frame.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let header: Vec<String> = (0..self.bands()).map(|k| format!("mel{k}")).collect();
        let write = |out: &mut std::io::BufWriter<std::fs::File>, line: String| {
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))
        };
        write(&mut out, header.join(","))?;
        for row in self.values.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            write(&mut out, line.join(","))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Power spectrum + mel filterbank + log, with a cached FFT plan.
#[derive(Clone)]
pub struct LogMelExtractor {
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
    sample_rate: u32,
}

impl std::fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor")
            .field("n_mels", &self.filterbank.n_mels())
            .field("sample_rate", &self.sample_rate)
            .finish()
    }
}

impl Default for LogMelExtractor {
    fn default() -> Self {
        Self::new(DEFAULT_SAMPLE_RATE)
    }
}

impl LogMelExtractor {
    pub fn new(sample_rate: u32) -> Self {
        let filterbank = MelFilterbank::new(
            NUM_MELS,
            FFT_SIZE,
            sample_rate,
            0.0,
            sample_rate as f64 / 2.0,
        );
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        Self {
            filterbank,
            fft,
            sample_rate,
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// `|FFT|^2` of one zero-padded frame, bins `0..=FFT_SIZE/2`.
    pub fn power_spectrum(&self, frame: &[f64]) -> Array1<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for (slot, &x) in buf.iter_mut().zip(frame) {
            slot.re = x;
        }
        self.fft.process(&mut buf);
        buf[..FFT_SIZE / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr())
            .collect()
    }

    pub fn log_mel(&self, frames: &Frames) -> Result<FeatureMatrix> {
        if frames.sample_rate != self.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "extractor runs at {} Hz, frames are {} Hz",
                self.sample_rate, frames.sample_rate
            )));
        }
        if frames.window_len() > FFT_SIZE {
            return Err(Error::InvalidArgument(format!(
                "frame of {} samples exceeds FFT size {FFT_SIZE}",
                frames.window_len()
            )));
        }
        let n_bins = FFT_SIZE / 2 + 1;
        let mut power = Array2::zeros((frames.count(), n_bins));
        for (frame, mut out) in frames.data.rows().into_iter().zip(power.rows_mut()) {
            let frame = frame.to_vec();
            out.assign(&self.power_spectrum(&frame));
        }
        let mut values = power.dot(&self.filterbank.weights.t());
        values.mapv_inplace(|e| (e + LOG_FLOOR).ln());
        Ok(FeatureMatrix {
            values,
            frame_shift: frames.hop as f64 / frames.sample_rate as f64,
            normalized: false,
        })
    }

    /// Framing, log-mel and instance normalization in one call.
    pub fn features(&self, w: &Waveform) -> Result<FeatureMatrix> {
        let frames = frame_signal(w, WINDOW_SECS, HOP_SECS)?;
        Ok(instance_normalize(&self.log_mel(&frames)?))
    }
}

/// Log-mel with a freshly planned default extractor.
pub fn log_mel(frames: &Frames) -> Result<FeatureMatrix> {
    LogMelExtractor::new(frames.sample_rate).log_mel(frames)
}

/// Standardizes every band over time: `(x - mean) / sqrt(var + 1e-5)`.
pub fn instance_normalize(f: &FeatureMatrix) -> FeatureMatrix {
    let t = f.frames().max(1) as f64;
    let mean = f.values.sum_axis(Axis(0)) / t;
    let centered = &f.values - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / t;
    let scale = var.mapv(|v| 1.0 / (v + INSTANCE_NORM_EPS).sqrt());
    FeatureMatrix {
        values: centered * &scale,
        frame_shift: f.frame_shift,
        normalized: true,
    }
}

/// Reads a 16-bit PCM mono WAV file at 16 kHz.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let unsupported = |reason: String| Error::UnsupportedAudio {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(unsupported(format!(
            "expected mono, found {} channels",
            spec.channels
        )));
    }
    if spec.sample_rate != DEFAULT_SAMPLE_RATE {
        return Err(unsupported(format!(
            "expected {DEFAULT_SAMPLE_RATE} Hz, found {} Hz",
            spec.sample_rate
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "expected 16-bit PCM, found {:?} with {} bits",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono; samples are clipped to `[-1, 1]`.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}
