//! Verification scoring: utterance embeddings, cosine trials, EER, minDCF
//! and score-distribution statistics.
//!
//! Threshold conventions: a trial is accepted when `score >= t`, so
//! `FAR(t) = P(nontarget >= t)` and `FRR(t) = P(target < t)`. The sweep
//! visits every distinct score plus `+inf` (accept nothing).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array1;

use crate::dsp::{LogMelExtractor, Waveform};
use crate::error::{Error, Result};
use crate::losses::cosine_similarity;
use crate::model::Model;

pub const DEFAULT_EVAL_FRAMES: usize = 6;
pub const DEFAULT_EVAL_FRAME_SECS: f64 = 2.0;
pub const HISTOGRAM_BIN_WIDTH: f64 = 0.02;

/// Start offsets of `count` evenly spaced windows of `window` samples in `len`.
pub fn crop_starts(len: usize, window: usize, count: usize) -> Vec<usize> {
    let slack = len.saturating_sub(window);
    match count {
        0 => Vec::new(),
        1 => vec![slack / 2],
        _ => (0..count)
            .map(|k| ((k * slack) as f64 / (count - 1) as f64).round() as usize)
            .collect(),
    }
}

/// Averages the representation over evenly spaced crops, then l2-normalizes.
pub fn embed_utterance(
    w: &Waveform,
    model: &Model,
    extractor: &LogMelExtractor,
    num_frames: usize,
    frame_secs: f64,
) -> Result<Array1<f64>> {
    let window = w.samples_for(frame_secs);
    if window == 0 || num_frames == 0 {
        return Err(Error::InvalidArgument(
            "need at least one non-empty crop".into(),
        ));
    }
    if w.len() < window {
        return Err(Error::TooShort {
            got: w.len(),
            need: window,
        });
    }
    let mut sum = Array1::zeros(model.dims.representation);
    let starts = crop_starts(w.len(), window, num_frames);
    for &s in &starts {
        let crop = w.slice(s, window)?;
        sum += &model.represent(&extractor.features(&crop)?)?;
    }
    let mean = sum / starts.len() as f64;
    let norm = mean.dot(&mean).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(mean / norm)
}

/// [`embed_utterance`] over `(utterance_id, audio)` pairs.
pub fn embed_all<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a Waveform)>,
    model: &Model,
    extractor: &LogMelExtractor,
    num_frames: usize,
    frame_secs: f64,
) -> Result<HashMap<String, Array1<f64>>> {
    items
        .into_iter()
        .map(|(id, w)| {
            Ok((
                id.to_string(),
                embed_utterance(w, model, extractor, num_frames, frame_secs)?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    /// Every unordered pair of utterances; target when speakers match.
    pub fn all_pairs<'a>(items: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let items: Vec<(&str, &str)> = items.into_iter().collect();
        let mut trials = Vec::new();
        for (i, (ui, si)) in items.iter().enumerate() {
            for (uj, sj) in &items[i + 1..] {
                trials.push(Trial {
                    target: si == sj,
                    enroll: ui.to_string(),
                    test: uj.to_string(),
                });
            }
        }
        Self { trials }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Utterance ids in order of first appearance.
    pub fn utterances(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for t in &self.trials {
            for id in [t.enroll.as_str(), t.test.as_str()] {
                if seen.insert(id) {
                    out.push(id);
                }
            }
        }
        out
    }

    /// `label enroll test` per line, label 1 (target) or 0.
    pub fn parse(text: &str) -> Result<Self> {
        let trials = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                let f: Vec<&str> = line.split_whitespace().collect();
                let bad = |reason: &str| Error::Format {
                    what: "trial list",
                    reason: format!("line {}: {reason}: `{line}`", i + 1),
                };
                match f.as_slice() {
                    [label, enroll, test] => Ok(Trial {
                        target: match *label {
                            "1" => true,
                            "0" => false,
                            _ => return Err(bad("label must be 1 or 0")),
                        },
                        enroll: enroll.to_string(),
                        test: test.to_string(),
                    }),
                    _ => Err(bad("expected 3 fields")),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { trials })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.trials {
            let _ = writeln!(out, "{} {} {}", u8::from(t.target), t.enroll, t.test);
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub scores: Vec<ScoredTrial>,
}

impl ScoreSet {
    /// Builds a score set from bare target and nontarget scores.
    pub fn from_scores(targets: &[f64], nontargets: &[f64]) -> Self {
        let mk = |target: bool, (i, &score): (usize, &f64)| ScoredTrial {
            trial: Trial {
                target,
                enroll: format!("{}{i}", if target { "t" } else { "n" }),
                test: "x".into(),
            },
            score,
        };
        let scores = targets
            .iter()
            .enumerate()
            .map(|p| mk(true, p))
            .chain(nontargets.iter().enumerate().map(|p| mk(false, p)))
            .collect();
        Self { scores }
    }

    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut tar = Vec::new();
        let mut non = Vec::new();
        for s in &self.scores {
            if s.trial.target {
                tar.push(s.score);
            } else {
                non.push(s.score);
            }
        }
        (tar, non)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("enroll_id,test_id,label,score\n");
        for s in &self.scores {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                s.trial.enroll,
                s.trial.test,
                u8::from(s.trial.target),
                s.score
            );
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("enroll_id,test_id,label,score") {
            return Err(Error::Format {
                what: "scores file",
                reason: "missing `enroll_id,test_id,label,score` header".into(),
            });
        }
        let scores = lines
            .map(|line| {
                let bad = |reason: String| Error::Format {
                    what: "scores file",
                    reason: format!("`{line}`: {reason}"),
                };
                let f: Vec<&str> = line.split(',').map(str::trim).collect();
                if f.len() != 4 {
                    return Err(bad("expected 4 fields".into()));
                }
                let target = match f[2] {
                    "1" => true,
                    "0" => false,
                    other => return Err(bad(format!("bad label `{other}`"))),
                };
                let score: f64 = f[3].parse().map_err(|e| bad(format!("{e}")))?;
                if !score.is_finite() {
                    return Err(bad("score is not finite".into()));
                }
                Ok(ScoredTrial {
                    trial: Trial {
                        target,
                        enroll: f[0].to_string(),
                        test: f[1].to_string(),
                    },
                    score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scores })
    }
}

/// Cosine score for every trial.
pub fn score_trials(
    trials: &TrialSet,
    embeddings: &HashMap<String, Array1<f64>>,
) -> Result<ScoreSet> {
    let get = |id: &str| {
        embeddings
            .get(id)
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    };
    let scores = trials
        .trials
        .iter()
        .map(|t| {
            let score = cosine_similarity(get(&t.enroll)?.view(), get(&t.test)?.view())?;
            Ok(ScoredTrial {
                trial: t.clone(),
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet { scores })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// FAR/FRR at every distinct score and at `+inf`, in increasing threshold order.
pub fn operating_points(targets: &[f64], nontargets: &[f64]) -> Result<Vec<OperatingPoint>> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::DegenerateTrials);
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let mut tar = targets.to_vec();
    let mut non = nontargets.to_vec();
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = tar.iter().chain(&non).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();

    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    let (mut below_t, mut below_n) = (0usize, 0usize);
    let mut points = Vec::with_capacity(all.len() + 1);
    for &t in &all {
        while below_t < tar.len() && tar[below_t] < t {
            below_t += 1;
        }
        while below_n < non.len() && non[below_n] < t {
            below_n += 1;
        }
        points.push(OperatingPoint {
            threshold: t,
            far: (non.len() - below_n) as f64 / nn,
            frr: below_t as f64 / nt,
        });
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

/// Where FAR meets FRR along a sweep; linear interpolation between the two
/// bracketing points when no point lies exactly on the diagonal.
pub fn eer_from_points(points: &[OperatingPoint]) -> (f64, f64) {
    let k = points
        .iter()
        .position(|p| p.far - p.frr <= 0.0)
        .expect("the +inf point has FAR - FRR = -1");
    let b = points[k];
    if b.far == b.frr || k == 0 {
        return (b.far, b.threshold);
    }
    let a = points[k - 1];
    let (da, db) = (a.far - a.frr, b.far - b.frr);
    let alpha = da / (da - db);
    let eer = a.far + alpha * (b.far - a.far);
    let threshold = if b.threshold.is_finite() {
        a.threshold + alpha * (b.threshold - a.threshold)
    } else {
        a.threshold
    };
    (eer, threshold)
}

/// `(eer, threshold)`.
pub fn compute_eer(s: &ScoreSet) -> Result<(f64, f64)> {
    let (tar, non) = s.split();
    Ok(eer_from_points(&operating_points(&tar, &non)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn raw_cost(&self, far: f64, frr: f64) -> f64 {
        self.c_miss * frr * self.p_target + self.c_fa * far * (1.0 - self.p_target)
    }

    /// Cost of the better trivial system (accept all or reject all).
    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub fn normalized_cost(&self, far: f64, frr: f64) -> f64 {
        self.raw_cost(far, frr) / self.normalizer()
    }
}

/// `(min normalized DCF, threshold)` over a sweep; first minimum wins.
pub fn min_dcf_from_points(points: &[OperatingPoint], p: &DcfParams) -> (f64, f64) {
    let mut best = (f64::INFINITY, f64::INFINITY);
    for pt in points {
        let c = p.raw_cost(pt.far, pt.frr);
        if c < best.0 {
            best = (c, pt.threshold);
        }
    }
    (best.0 / p.normalizer(), best.1)
}

pub fn compute_min_dcf(s: &ScoreSet, p: &DcfParams) -> Result<(f64, f64)> {
    if !(p.p_target > 0.0 && p.p_target < 1.0 && p.c_miss > 0.0 && p.c_fa > 0.0) {
        return Err(Error::InvalidArgument(
            "DCF needs 0 < p_target < 1 and positive costs".into(),
        ));
    }
    let (tar, non) = s.split();
    Ok(min_dcf_from_points(&operating_points(&tar, &non)?, p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetMetrics {
    pub eer: f64,
    pub threshold_at_eer: f64,
    pub min_dcf: f64,
    pub threshold_at_min_dcf: f64,
    pub roc: Vec<OperatingPoint>,
}

pub fn det_metrics(s: &ScoreSet, p: &DcfParams) -> Result<DetMetrics> {
    let (tar, non) = s.split();
    let roc = operating_points(&tar, &non)?;
    let (eer, threshold_at_eer) = eer_from_points(&roc);
    let (min_dcf, threshold_at_min_dcf) = min_dcf_from_points(&roc, p);
    Ok(DetMetrics {
        eer,
        threshold_at_eer,
        min_dcf,
        threshold_at_min_dcf,
        roc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub left: f64,
    pub pos: usize,
    pub neg: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreStats {
    pub mean_pos: f64,
    pub mean_neg: f64,
    pub gap: f64,
    pub histogram: Vec<HistogramBin>,
}

impl ScoreStats {
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_left,pos_count,neg_count\n");
        for b in &self.histogram {
            let _ = writeln!(out, "{:.2},{},{}", b.left, b.pos, b.neg);
        }
        out
    }
}

/// Per-label means, their gap and a `[-1, 1]` histogram with 0.02-wide bins.
pub fn score_stats(s: &ScoreSet) -> Result<ScoreStats> {
    let (tar, non) = s.split();
    if tar.is_empty() || non.is_empty() {
        return Err(Error::DegenerateTrials);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mean_pos, mean_neg) = (mean(&tar), mean(&non));
    let bins = (2.0 / HISTOGRAM_BIN_WIDTH).round() as usize;
    let mut histogram: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            left: -1.0 + i as f64 * HISTOGRAM_BIN_WIDTH,
            pos: 0,
            neg: 0,
        })
        .collect();
    let bin_of =
        |x: f64| (((x + 1.0) / HISTOGRAM_BIN_WIDTH).floor().max(0.0) as usize).min(bins - 1);
    for &x in &tar {
        histogram[bin_of(x)].pos += 1;
    }
    for &x in &non {
        histogram[bin_of(x)].neg += 1;
    }
    Ok(ScoreStats {
        mean_pos,
        mean_neg,
        gap: mean_pos - mean_neg,
        histogram,
    })
}
