//! Synthetic multi-speaker corpus, two-view cropping and SNR-controlled
//! augmentation.
//!
//! A speaker is a fundamental frequency, a vocal tract scale that shifts the
//! formants of five reference vowels, and three resonance gains. Every
//! utterance is a band-limited harmonic source with its own intonation,
//! cut into syllables that each take a random vowel, and mixed with white
//! noise at 25 dB SNR. Labels live in the manifest and are
//! only reachable through [`Corpus`]; training consumes a [`TrainingSet`],
//! which carries utterance ids and audio and nothing else.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, read_wav, write_wav, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::seed;

pub const F0_RANGE_HZ: (f64, f64) = (90.0, 250.0);
pub const GAIN_RANGE: (f64, f64) = (0.2, 3.0);
/// Multiplies every formant frequency; models vocal tract length.
pub const TRACT_SCALE_RANGE: (f64, f64) = (0.8, 1.2);
/// First three formants of five reference vowels (a, e, i, o, u).
pub const VOWEL_FORMANTS_HZ: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [530.0, 1840.0, 2480.0],
    [270.0, 2290.0, 3010.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
];
pub const FORMANT_BANDWIDTH_HZ: [f64; 3] = [90.0, 120.0, 160.0];
/// Syllables per second, drawn per utterance.
pub const SYLLABLE_RATE_HZ: (f64, f64) = (2.5, 5.0);
/// Background noise level of every clean utterance.
pub const CLEAN_SNR_DB: f64 = 25.0;
pub const DEFAULT_CROP_SECS: f64 = 2.0;
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SPEAKERS_FILE: &str = "speakers.csv";

/// Latent identity of a synthetic speaker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakerParams {
    pub f0: f64,
    pub tract_scale: f64,
    pub formant_gains: [f64; 3],
}

impl SpeakerParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let f0 = rng.random_range(F0_RANGE_HZ.0..F0_RANGE_HZ.1);
        let tract_scale = rng.random_range(TRACT_SCALE_RANGE.0..TRACT_SCALE_RANGE.1);
        let formant_gains = std::array::from_fn(|_| rng.random_range(GAIN_RANGE.0..GAIN_RANGE.1));
        Self {
            f0,
            tract_scale,
            formant_gains,
        }
    }

    /// Formant frequencies of `vowel` for this speaker.
    pub fn formants(&self, vowel: usize) -> [f64; 3] {
        VOWEL_FORMANTS_HZ[vowel].map(|f| f * self.tract_scale)
    }
}

/// Two-pole resonator, unit gain at DC scaled by `1 - r`.
struct Resonator {
    a1: f64,
    a2: f64,
    b0: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, sample_rate: f64) -> Self {
        let mut r = Self {
            a1: 0.0,
            a2: 0.0,
            b0: 0.0,
            y1: 0.0,
            y2: 0.0,
        };
        r.tune(freq, bandwidth, sample_rate);
        r
    }

    /// Moves the pole pair, keeping the filter state.
    fn tune(&mut self, freq: f64, bandwidth: f64, sample_rate: f64) {
        let r = (-PI * bandwidth / sample_rate).exp();
        let theta = 2.0 * PI * freq / sample_rate;
        self.a1 = 2.0 * r * theta.cos();
        self.a2 = -r * r;
        self.b0 = 1.0 - r;
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Sum of `harmonics` equal-amplitude cosines at phase `phase` (Dirichlet kernel).
fn harmonic_sum(phase: f64, harmonics: usize) -> f64 {
    let half = (phase / 2.0).sin();
    if half.abs() < 1e-9 {
        harmonics as f64
    } else {
        ((harmonics as f64 + 0.5) * phase).sin() / (2.0 * half) - 0.5
    }
}

/// Voiced signal for `speaker`, before the background noise is added.
///
/// The utterance is a run of syllables, each a random vowel under a
/// raised-cosine loudness envelope, with slow intonation drift and a faster
/// wobble on the pitch.
pub fn synthesize_voice<R: Rng + ?Sized>(
    speaker: &SpeakerParams,
    secs: f64,
    sample_rate: u32,
    rng: &mut R,
) -> Vec<f64> {
    let sr = sample_rate as f64;
    let n = dsp::secs_to_samples(secs, sample_rate);
    let (drift_rate, drift_phase) = (rng.random_range(0.3..1.5), rng.random_range(0.0..2.0 * PI));
    let (wobble_rate, wobble_phase) = (rng.random_range(3.0..6.0), rng.random_range(0.0..2.0 * PI));
    let drift_depth = rng.random_range(0.02..0.08);
    let wobble_depth = rng.random_range(0.005..0.02);
    let syllable_rate = rng.random_range(SYLLABLE_RATE_HZ.0..SYLLABLE_RATE_HZ.1);
    let mut phase: f64 = rng.random_range(0.0..2.0 * PI);

    let max_f0 = speaker.f0 * (1.0 + drift_depth + wobble_depth);
    let harmonics = ((0.45 * sr / max_f0).floor() as usize).max(1);
    let mut vowel = rng.random_range(0..VOWEL_FORMANTS_HZ.len());
    let mut resonators: Vec<Resonator> = speaker
        .formants(vowel)
        .iter()
        .zip(FORMANT_BANDWIDTH_HZ)
        .map(|(&f, b)| Resonator::new(f, b, sr))
        .collect();
    let mut syllable_start = 0usize;
    let mut syllable_len = syllable_samples(syllable_rate, sr, rng);

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i - syllable_start >= syllable_len {
            syllable_start = i;
            syllable_len = syllable_samples(syllable_rate, sr, rng);
            vowel = rng.random_range(0..VOWEL_FORMANTS_HZ.len());
            for ((r, f), b) in resonators
                .iter_mut()
                .zip(speaker.formants(vowel))
                .zip(FORMANT_BANDWIDTH_HZ)
            {
                r.tune(f, b, sr);
            }
        }
        let t = i as f64 / sr;
        let f0 = speaker.f0
            * (1.0
                + drift_depth * (2.0 * PI * drift_rate * t + drift_phase).sin()
                + wobble_depth * (2.0 * PI * wobble_rate * t + wobble_phase).sin());
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
        let source = harmonic_sum(phase, harmonics) / harmonics as f64;
        let progress = (i - syllable_start) as f64 / syllable_len as f64;
        let envelope = 0.15 + 0.85 * (PI * progress).sin().powi(2);
        let x = envelope * source;
        let shaped: f64 = resonators
            .iter_mut()
            .zip(speaker.formant_gains)
            .map(|(r, g)| g * r.tick(x))
            .sum();
        out.push(shaped + 0.05 * x);
    }
    let p = dsp::peak(&out);
    if p > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / p);
    }
    out
}

/// Syllable length in samples, jittered by up to 30% around `1 / rate`.
fn syllable_samples<R: Rng + ?Sized>(rate: f64, sample_rate: f64, rng: &mut R) -> usize {
    ((sample_rate / rate) * rng.random_range(0.7..1.3))
        .round()
        .max(1.0) as usize
}

fn white_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// One clean corpus utterance: voice plus white noise at [`CLEAN_SNR_DB`].
pub fn synthesize_utterance<R: Rng + ?Sized>(
    speaker: &SpeakerParams,
    secs: f64,
    sample_rate: u32,
    rng: &mut R,
) -> Result<Waveform> {
    let voice = Waveform::new(
        synthesize_voice(speaker, secs, sample_rate, rng),
        sample_rate,
    )?;
    let noise = Waveform::new(white_noise(voice.len(), rng), sample_rate)?;
    mix_at_snr(&voice, &noise, CLEAN_SNR_DB)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusParams {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub utterance_secs: f64,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            speakers: 32,
            utterances_per_speaker: 4,
            utterance_secs: 5.0,
            seed: 0,
        }
    }
}

impl CorpusParams {
    pub fn validate(&self, crop_secs: f64) -> Result<()> {
        if self.speakers < 2 {
            return Err(Error::Config(format!(
                "need at least 2 speakers, got {}",
                self.speakers
            )));
        }
        if self.utterances_per_speaker < 2 {
            return Err(Error::Config(format!(
                "need at least 2 utterances per speaker, got {}",
                self.utterances_per_speaker
            )));
        }
        if !(self.utterance_secs > 0.0 && self.utterance_secs >= 2.0 * crop_secs) {
            return Err(Error::Config(format!(
                "utterances of {} s cannot hold two disjoint {crop_secs} s crops",
                self.utterance_secs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub relative_path: String,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub entry: ManifestEntry,
    pub audio: Waveform,
}

/// Labeled utterances. Labels are for corpus bookkeeping and evaluation.
#[derive(Debug, Clone)]
pub struct Corpus {
    /// Speaker id to latent parameters, when known.
    pub speakers: Vec<(String, SpeakerParams)>,
    pub utterances: Vec<Utterance>,
}

pub fn speaker_id(index: usize) -> String {
    format!("spk{index:03}")
}

/// Builds the corpus in memory. Deterministic in `params.seed`.
pub fn synthesize_corpus(params: &CorpusParams) -> Result<Corpus> {
    params.validate(0.0)?;
    let mut speakers = Vec::with_capacity(params.speakers);
    let mut utterances = Vec::new();
    for s in 0..params.speakers {
        let spk = SpeakerParams::sample(&mut seed::stream(params.seed, &[0, s as u64]));
        let sid = speaker_id(s);
        for u in 0..params.utterances_per_speaker {
            let mut rng = seed::stream(params.seed, &[1, s as u64, u as u64]);
            let audio =
                synthesize_utterance(&spk, params.utterance_secs, DEFAULT_SAMPLE_RATE, &mut rng)?;
            let utterance_id = format!("{sid}-utt{u:03}");
            utterances.push(Utterance {
                entry: ManifestEntry {
                    relative_path: format!("wav/{sid}/{utterance_id}.wav"),
                    utterance_id,
                    speaker_id: sid.clone(),
                },
                audio,
            });
        }
        speakers.push((sid, spk));
    }
    Ok(Corpus {
        speakers,
        utterances,
    })
}

/// Synthesizes the corpus and writes WAVs, `speakers.csv` and `manifest.csv`
/// under `dir`. The manifest is written last, so a failed run leaves none.
pub fn generate_corpus(dir: &Path, params: &CorpusParams) -> Result<Corpus> {
    let corpus = synthesize_corpus(params)?;
    corpus.write(dir)?;
    Ok(corpus)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

impl Corpus {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for u in &self.utterances {
            let path = dir.join(&u.entry.relative_path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_wav(&path, &u.audio)?;
        }
        let mut speakers = String::from("speaker_id,f0,tract_scale,gain1,gain2,gain3\n");
        for (id, p) in &self.speakers {
            let [g1, g2, g3] = p.formant_gains;
            speakers.push_str(&format!("{id},{},{},{g1},{g2},{g3}\n", p.f0, p.tract_scale));
        }
        write_text(&dir.join(SPEAKERS_FILE), &speakers)?;

        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        write_text(&tmp, &manifest_to_csv(self.entries()))?;
        let manifest = dir.join(MANIFEST_FILE);
        std::fs::rename(&tmp, &manifest).map_err(|e| Error::io(&manifest, e))
    }

    pub fn entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.utterances.iter().map(|u| &u.entry)
    }

    pub fn speaker_params(&self, speaker_id: &str) -> Option<&SpeakerParams> {
        self.speakers
            .iter()
            .find(|(id, _)| id == speaker_id)
            .map(|(_, p)| p)
    }

    pub fn audio(&self, utterance_id: &str) -> Option<&Waveform> {
        self.utterances
            .iter()
            .find(|u| u.entry.utterance_id == utterance_id)
            .map(|u| &u.audio)
    }

    /// Drops the labels.
    pub fn unlabeled(&self) -> TrainingSet {
        TrainingSet {
            items: self
                .utterances
                .iter()
                .map(|u| (u.entry.utterance_id.clone(), u.audio.clone()))
                .collect(),
        }
    }
}

pub fn manifest_to_csv<'a>(entries: impl Iterator<Item = &'a ManifestEntry>) -> String {
    let mut out = String::from("utterance_id,speaker_id,relative_path\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{}\n",
            e.utterance_id, e.speaker_id, e.relative_path
        ));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == "utterance_id,speaker_id,relative_path" => {}
        other => {
            return Err(Error::Format {
                what: "manifest",
                reason: format!("unexpected header {other:?}"),
            })
        }
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            match fields.as_slice() {
                [u, s, p] if !u.is_empty() && !s.is_empty() && !p.is_empty() => Ok(ManifestEntry {
                    utterance_id: u.to_string(),
                    speaker_id: s.to_string(),
                    relative_path: p.to_string(),
                }),
                _ => Err(Error::Format {
                    what: "manifest",
                    reason: format!("line {}: expected 3 fields, got `{line}`", i + 2),
                }),
            }
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Parses `speakers.csv`, if present.
pub fn read_speakers(path: &Path) -> Result<Vec<(String, SpeakerParams)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| Error::Format {
                    what: "speakers file",
                    reason: format!("`{line}`: {e}"),
                })
            };
            if f.len() != 6 {
                return Err(Error::Format {
                    what: "speakers file",
                    reason: format!("expected 6 fields in `{line}`"),
                });
            }
            Ok((
                f[0].to_string(),
                SpeakerParams {
                    f0: num(f[1])?,
                    tract_scale: num(f[2])?,
                    formant_gains: [num(f[3])?, num(f[4])?, num(f[5])?],
                },
            ))
        })
        .collect()
}

/// Loads a corpus directory written by [`generate_corpus`] (or any directory
/// with a manifest and 16 kHz mono WAVs).
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let entries = read_manifest(&dir.join(MANIFEST_FILE))?;
    let speakers_path = dir.join(SPEAKERS_FILE);
    let speakers = if speakers_path.exists() {
        read_speakers(&speakers_path)?
    } else {
        Vec::new()
    };
    let utterances = entries
        .into_iter()
        .map(|entry| {
            let audio = read_wav(&dir.join(&entry.relative_path))?;
            Ok(Utterance { entry, audio })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        speakers,
        utterances,
    })
}

/// Unlabeled audio for self-supervised training: ids and samples only.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    items: Vec<(String, Waveform)>,
}

impl TrainingSet {
    pub fn new(items: Vec<(String, Waveform)>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.items[i].0
    }

    pub fn audio(&self, i: usize) -> &Waveform {
        &self.items[i].1
    }
}

/// Two augmented crops of one utterance, with their source intervals in samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: Waveform,
    pub view_b: Waveform,
    pub interval_a: (usize, usize),
    pub interval_b: (usize, usize),
    pub utterance_id: String,
}

impl ViewPair {
    pub fn disjoint(&self) -> bool {
        self.interval_a.1 <= self.interval_b.0 || self.interval_b.1 <= self.interval_a.0
    }
}

/// Draws two non-overlapping crops uniformly among all disjoint placements.
///
/// Placements `(first, second)` with `second - first >= crop` are in
/// bijection with pairs `u < v` drawn from `0..=slack` (`second = v - 1 +
/// crop`), so only the `u == v` draw is ever rejected.
pub fn sample_view_pair<R: Rng + ?Sized>(
    utterance: &Waveform,
    utterance_id: &str,
    crop_secs: f64,
    rng: &mut R,
) -> Result<ViewPair> {
    let crop = utterance.samples_for(crop_secs);
    if crop == 0 {
        return Err(Error::InvalidArgument(
            "crop is shorter than one sample".into(),
        ));
    }
    if utterance.len() < 2 * crop {
        return Err(Error::TooShort {
            got: utterance.len(),
            need: 2 * crop,
        });
    }
    // number of valid `first` offsets for the earlier crop
    let slack = utterance.len() - 2 * crop + 1;
    let (u, v) = loop {
        let u = rng.random_range(0..=slack);
        let v = rng.random_range(0..=slack);
        if u != v {
            break (u.min(v), u.max(v));
        }
    };
    let first = u;
    let second = v - 1 + crop;
    let (a, b) = if rng.random_bool(0.5) {
        (first, second)
    } else {
        (second, first)
    };
    Ok(ViewPair {
        view_a: utterance.slice(a, crop)?,
        view_b: utterance.slice(b, crop)?,
        interval_a: (a, a + crop),
        interval_b: (b, b + crop),
        utterance_id: utterance_id.to_string(),
    })
}

/// Returns `signal + alpha * noise` with `alpha` chosen so the power ratio
/// is exactly `snr_db`. The noise is looped or cropped to the signal length.
pub fn mix_at_snr(signal: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    let (alpha, noise) = snr_gain(signal, noise, snr_db)?;
    let mixed = signal
        .samples()
        .iter()
        .zip(&noise)
        .map(|(s, n)| s + alpha * n)
        .collect();
    Ok(signal.with_samples(mixed))
}

/// `alpha` and the length-matched noise used by [`mix_at_snr`].
pub fn snr_gain(signal: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(f64, Vec<f64>)> {
    if noise.is_empty() {
        return Err(Error::ZeroRms("noise"));
    }
    let looped: Vec<f64> = noise
        .samples()
        .iter()
        .copied()
        .cycle()
        .take(signal.len())
        .collect();
    let (rs, rn) = (signal.rms(), dsp::rms(&looped));
    if rs == 0.0 {
        return Err(Error::ZeroRms("signal"));
    }
    if rn == 0.0 {
        return Err(Error::ZeroRms("noise"));
    }
    Ok((rs / rn * 10f64.powf(-snr_db / 20.0), looped))
}

/// Smallest `2^a 3^b 5^c` that is at least `n`.
fn fast_fft_len(n: usize) -> usize {
    let mut best = n.next_power_of_two();
    let mut p5 = 1;
    while p5 < best {
        let mut p35 = p5;
        while p35 < best {
            let mut m = p35;
            while m < n {
                m *= 2;
            }
            best = best.min(m);
            p35 *= 3;
        }
        p5 *= 5;
    }
    best
}

/// Causal convolution of `x` with `h`, truncated to `x.len()`.
pub fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    if h.len() <= 64 || x.len() <= 64 {
        return (0..x.len())
            .map(|n| {
                let kmax = h.len().min(n + 1);
                (0..kmax).map(|k| h[k] * x[n - k]).sum()
            })
            .collect();
    }
    let len = fast_fft_len(x.len() + h.len() - 1);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let pad = |v: &[f64]| {
        let mut buf = vec![Complex::new(0.0, 0.0); len];
        buf.iter_mut().zip(v).for_each(|(b, &s)| b.re = s);
        buf
    };
    let (mut xf, mut hf) = (pad(x), pad(h));
    fwd.process(&mut xf);
    fwd.process(&mut hf);
    xf.iter_mut().zip(&hf).for_each(|(a, b)| *a *= b);
    inv.process(&mut xf);
    let scale = 1.0 / len as f64;
    xf[..x.len()].iter().map(|c| c.re * scale).collect()
}

/// Convolves with `rir`, truncates to the input length and restores the input peak.
pub fn apply_reverb(signal: &Waveform, rir: &Waveform) -> Result<Waveform> {
    if rir.is_empty() {
        return Err(Error::InvalidArgument("empty room impulse response".into()));
    }
    if rir.len() > signal.len() {
        return Err(Error::InvalidArgument(format!(
            "impulse response ({} samples) longer than signal ({})",
            rir.len(),
            signal.len()
        )));
    }
    let mut out = convolve_truncated(signal.samples(), rir.samples());
    let (p_in, p_out) = (signal.peak(), dsp::peak(&out));
    if p_out > 0.0 && p_in != p_out {
        let g = p_in / p_out;
        out.iter_mut().for_each(|v| *v *= g);
    }
    Ok(signal.with_samples(out))
}

pub const T60_RANGE_SECS: (f64, f64) = (0.1, 0.5);

/// Exponentially decaying white-noise tail after a unit direct path; the
/// tail amplitude falls by 60 dB at `t60` and carries the same energy as
/// the direct path.
pub fn synthetic_rir<R: Rng + ?Sized>(t60: f64, sample_rate: u32, rng: &mut R) -> Result<Waveform> {
    let len = dsp::secs_to_samples(t60, sample_rate).max(1);
    let decay = |n: usize| 10f64.powf(-3.0 * n as f64 / len as f64);
    let mut h: Vec<f64> = (0..len)
        .map(|n| {
            if n == 0 {
                0.0
            } else {
                decay(n) * rng.sample::<f64, _>(StandardNormal)
            }
        })
        .collect();
    let tail_energy: f64 = h.iter().map(|v| v * v).sum();
    if tail_energy > 0.0 {
        let g = tail_energy.sqrt().recip();
        h.iter_mut().for_each(|v| *v *= g);
    }
    h[0] = 1.0;
    Waveform::new(h, sample_rate)
}

pub fn random_rir<R: Rng + ?Sized>(sample_rate: u32, rng: &mut R) -> Result<Waveform> {
    let t60 = rng.random_range(T60_RANGE_SECS.0..=T60_RANGE_SECS.1);
    synthetic_rir(t60, sample_rate, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseClass {
    Speech,
    Music,
    Noise,
}

impl NoiseClass {
    pub const ALL: [NoiseClass; 3] = [NoiseClass::Speech, NoiseClass::Music, NoiseClass::Noise];
}

impl fmt::Display for NoiseClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseClass::Speech => "speech",
            NoiseClass::Music => "music",
            NoiseClass::Noise => "noise",
        })
    }
}

impl FromStr for NoiseClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speech" => Ok(NoiseClass::Speech),
            "music" => Ok(NoiseClass::Music),
            "noise" => Ok(NoiseClass::Noise),
            _ => Err(Error::InvalidArgument(format!("unknown noise class `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub speech_snr_db: (f64, f64),
    pub music_snr_db: (f64, f64),
    pub noise_snr_db: (f64, f64),
    /// Classes drawn from, uniformly.
    pub noise_classes: Vec<NoiseClass>,
    pub reverb_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            speech_snr_db: (13.0, 20.0),
            music_snr_db: (5.0, 15.0),
            noise_snr_db: (0.0, 15.0),
            noise_classes: NoiseClass::ALL.to_vec(),
            reverb_prob: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn snr_range(&self, class: NoiseClass) -> (f64, f64) {
        match class {
            NoiseClass::Speech => self.speech_snr_db,
            NoiseClass::Music => self.music_snr_db,
            NoiseClass::Noise => self.noise_snr_db,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for class in NoiseClass::ALL {
            let (lo, hi) = self.snr_range(class);
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("bad {class} SNR range [{lo}, {hi}]")));
            }
        }
        if !(0.0..=1.0).contains(&self.reverb_prob) {
            return Err(Error::Config(format!(
                "reverb_prob {} outside [0, 1]",
                self.reverb_prob
            )));
        }
        if self.enabled && self.noise_classes.is_empty() {
            return Err(Error::Config(
                "augmentation enabled with no noise classes".into(),
            ));
        }
        Ok(())
    }
}

/// Pre-generated noise clips per class.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    speech: Vec<Waveform>,
    music: Vec<Waveform>,
    noise: Vec<Waveform>,
}

pub const NOISE_CLIP_SECS: f64 = 4.0;

/// Three simultaneous random talkers.
pub fn babble<R: Rng + ?Sized>(secs: f64, sample_rate: u32, rng: &mut R) -> Vec<f64> {
    let n = dsp::secs_to_samples(secs, sample_rate);
    let mut out = vec![0.0; n];
    for _ in 0..3 {
        let spk = SpeakerParams::sample(rng);
        let v = synthesize_voice(&spk, secs, sample_rate, rng);
        out.iter_mut().zip(v).for_each(|(o, s)| *o += s);
    }
    out
}

/// Slowly changing chords of a few partials each.
pub fn music<R: Rng + ?Sized>(secs: f64, sample_rate: u32, rng: &mut R) -> Vec<f64> {
    let sr = sample_rate as f64;
    let n = dsp::secs_to_samples(secs, sample_rate);
    let mut out = Vec::with_capacity(n);
    let mut notes: Vec<(f64, f64)> = Vec::new();
    let (mut chord_start, mut chord_len) = (0usize, 0usize);
    for i in 0..n {
        if i == chord_start + chord_len {
            let voices = rng.random_range(3..=4);
            notes = (0..voices)
                .map(|_| {
                    // semitones above 110 Hz
                    let k = rng.random_range(0..36) as f64;
                    (110.0 * 2f64.powf(k / 12.0), rng.random_range(0.0..2.0 * PI))
                })
                .collect();
            chord_start = i;
            chord_len = dsp::secs_to_samples(rng.random_range(0.25..0.75), sample_rate).max(1);
        }
        let t = i as f64 / sr;
        let into = (i - chord_start) as f64 / chord_len as f64;
        let env = (PI * into).sin().max(0.0).sqrt();
        let v: f64 = notes
            .iter()
            .map(|&(f, ph)| (2.0 * PI * f * t + ph).sin() + 0.4 * (4.0 * PI * f * t + ph).sin())
            .sum();
        out.push(env * v);
    }
    out
}

/// White noise, or pink noise from a Kellet-style filter, at random.
pub fn broadband_noise<R: Rng + ?Sized>(secs: f64, sample_rate: u32, rng: &mut R) -> Vec<f64> {
    let n = dsp::secs_to_samples(secs, sample_rate);
    let white = white_noise(n, rng);
    if rng.random_bool(0.5) {
        return white;
    }
    let mut b = [0.0f64; 7];
    white
        .into_iter()
        .map(|w| {
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.153852;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let pink = b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + w * 0.5362;
            b[6] = w * 0.115926;
            pink
        })
        .collect()
}

impl NoiseBank {
    pub fn generate(clips_per_class: usize, sample_rate: u32, seed: u64) -> Result<Self> {
        let make = |class: u64, f: fn(f64, u32, &mut rand_chacha::ChaCha8Rng) -> Vec<f64>| {
            (0..clips_per_class.max(1))
                .map(|i| {
                    let mut rng = seed::stream(seed, &[2, class, i as u64]);
                    Waveform::new(f(NOISE_CLIP_SECS, sample_rate, &mut rng), sample_rate)
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            speech: make(0, babble)?,
            music: make(1, music)?,
            noise: make(2, broadband_noise)?,
        })
    }

    pub fn clips(&self, class: NoiseClass) -> &[Waveform] {
        match class {
            NoiseClass::Speech => &self.speech,
            NoiseClass::Music => &self.music,
            NoiseClass::Noise => &self.noise,
        }
    }

    /// A random clip of `class`, rotated to a random start.
    pub fn draw<R: Rng + ?Sized>(&self, class: NoiseClass, rng: &mut R) -> Waveform {
        let clips = self.clips(class);
        let clip = &clips[rng.random_range(0..clips.len())];
        let offset = rng.random_range(0..clip.len());
        let mut s = clip.samples()[offset..].to_vec();
        s.extend_from_slice(&clip.samples()[..offset]);
        clip.with_samples(s)
    }
}

/// What [`Augmenter::augment_waveform`] did to one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRecord {
    pub class: NoiseClass,
    pub snr_db: f64,
    pub reverb: bool,
}

#[derive(Debug, Clone)]
pub struct Augmenter {
    pub policy: AugmentPolicy,
    pub bank: NoiseBank,
}

impl Augmenter {
    pub fn new(policy: AugmentPolicy, bank: NoiseBank) -> Result<Self> {
        policy.validate()?;
        Ok(Self { policy, bank })
    }

    /// Noise at a random SNR from a random class, then reverb with `reverb_prob`.
    pub fn augment_waveform<R: Rng + ?Sized>(
        &self,
        w: &Waveform,
        rng: &mut R,
    ) -> Result<(Waveform, Option<AugmentRecord>)> {
        if !self.policy.enabled {
            return Ok((w.clone(), None));
        }
        let classes = &self.policy.noise_classes;
        let class = classes[rng.random_range(0..classes.len())];
        let (lo, hi) = self.policy.snr_range(class);
        let snr_db = if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        };
        let noise = self.bank.draw(class, rng);
        let mut out = mix_at_snr(w, &noise, snr_db)?;
        let reverb = rng.random_bool(self.policy.reverb_prob);
        if reverb {
            let mut rir = random_rir(w.sample_rate(), rng)?;
            if rir.len() > out.len() {
                rir = rir.slice(0, out.len())?;
            }
            out = apply_reverb(&out, &rir)?;
        }
        Ok((
            out,
            Some(AugmentRecord {
                class,
                snr_db,
                reverb,
            }),
        ))
    }

    /// Augments both views independently.
    pub fn augment<R: Rng + ?Sized>(&self, pair: ViewPair, rng: &mut R) -> Result<ViewPair> {
        if !self.policy.enabled {
            return Ok(pair);
        }
        let (view_a, _) = self.augment_waveform(&pair.view_a, rng)?;
        let (view_b, _) = self.augment_waveform(&pair.view_b, rng)?;
        Ok(ViewPair {
            view_a,
            view_b,
            ..pair
        })
    }
}

/// Held-out audio corrupted for noisy-condition trials: every utterance gets
/// one noise class at an SNR from the default ranges, without reverb. The
/// noise bank and streams come from `seed` alone.
pub fn noisy_copies<'a>(
    audio: impl IntoIterator<Item = &'a Waveform>,
    seed: u64,
) -> Result<Vec<Waveform>> {
    let audio: Vec<&Waveform> = audio.into_iter().collect();
    let Some(first) = audio.first() else {
        return Ok(Vec::new());
    };
    let policy = AugmentPolicy {
        reverb_prob: 0.0,
        ..AugmentPolicy::default()
    };
    let bank = NoiseBank::generate(4, first.sample_rate(), seed::derive_seed(seed, &[0]))?;
    let corrupt = Augmenter::new(policy, bank)?;
    audio
        .iter()
        .enumerate()
        .map(|(i, w)| {
            Ok(corrupt
                .augment_waveform(w, &mut seed::stream(seed, &[1, i as u64]))?
                .0)
        })
        .collect()
}
