//! WebAssembly bindings for the static demo page in `www/`. Each export
//! returns a JSON string for the page to plot.

use mcsv::data::{synthesize_utterance, SpeakerParams};
use mcsv::dsp::{frame_signal, LogMelExtractor, DEFAULT_SAMPLE_RATE, HOP_SECS, WINDOW_SECS};
use mcsv::eval::{det_metrics, score_stats, DcfParams, ScoreSet};
use mcsv::losses::{loss_with_margin, EmbeddingBatch, LossVariant};
use mcsv::seed::stream;
use mcsv::Result;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// Two views of `n` items: shared random directions plus per-view noise
/// scaled by `spread`.
fn view_pair(
    n: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<(EmbeddingBatch, EmbeddingBatch)> {
    let mut rng = stream(seed, &[0]);
    let base = Array2::from_shape_fn((n, dim), |_| rng.sample::<f64, _>(StandardNormal));
    let view = |k: u64| {
        let mut rng = stream(seed, &[1, k]);
        let noisy = &base
            + &Array2::from_shape_fn((n, dim), |_| spread * rng.sample::<f64, _>(StandardNormal));
        EmbeddingBatch::new(noisy)
    };
    Ok((view(0)?, view(1)?))
}

/// Loss of each variant as the margin sweeps `0..=max_margin`.
pub fn loss_curves_json(
    n: usize,
    dim: usize,
    spread: f64,
    tau: f64,
    max_margin: f64,
    points: usize,
    seed: u64,
) -> Result<String> {
    let (z, zp) = view_pair(n, dim, spread, seed)?;
    let points = points.max(2);
    let margins: Vec<f64> = (0..points)
        .map(|i| max_margin * i as f64 / (points - 1) as f64)
        .collect();
    let mut curves = serde_json::Map::new();
    for v in LossVariant::ALL {
        let losses = margins
            .iter()
            .map(|&m| Ok(loss_with_margin(&z, &zp, v, tau, m)?.loss))
            .collect::<Result<Vec<f64>>>()?;
        curves.insert(v.to_string(), json!(losses));
    }
    Ok(json!({ "margins": margins, "curves": curves }).to_string())
}

#[wasm_bindgen]
pub fn loss_curves(
    n: usize,
    dim: usize,
    spread: f64,
    tau: f64,
    max_margin: f64,
    points: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    js(loss_curves_json(
        n,
        dim,
        spread,
        tau,
        max_margin,
        points,
        seed.into(),
    ))
}

/// Raw log-mel of one synthetic utterance, frames by bands.
pub fn speaker_logmel_json(f0: f64, tract_scale: f64, secs: f64, seed: u64) -> Result<String> {
    let speaker = SpeakerParams {
        f0,
        tract_scale,
        formant_gains: [1.0, 1.0, 1.0],
    };
    let w = synthesize_utterance(&speaker, secs, DEFAULT_SAMPLE_RATE, &mut stream(seed, &[2]))?;
    let feats = LogMelExtractor::new(DEFAULT_SAMPLE_RATE).log_mel(&frame_signal(
        &w,
        WINDOW_SECS,
        HOP_SECS,
    )?)?;
    Ok(json!({
        "frames": feats.frames(),
        "bands": feats.bands(),
        "frame_shift": feats.frame_shift,
        "values": feats.values.iter().copied().collect::<Vec<f64>>(),
    })
    .to_string())
}

#[wasm_bindgen]
pub fn speaker_logmel(
    f0: f64,
    tract_scale: f64,
    secs: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    js(speaker_logmel_json(f0, tract_scale, secs, seed.into()))
}

/// EER, minDCF and a histogram for Gaussian target and nontarget scores.
pub fn score_metrics_json(
    mean_pos: f64,
    mean_neg: f64,
    std: f64,
    n_target: usize,
    n_nontarget: usize,
    p_target: f64,
    seed: u64,
) -> Result<String> {
    let draw = |mu: f64, count: usize, k: u64| {
        let mut rng = stream(seed, &[3, k]);
        (0..count)
            .map(|_| (mu + std * rng.sample::<f64, _>(StandardNormal)).clamp(-1.0, 1.0))
            .collect::<Vec<f64>>()
    };
    let scores = ScoreSet::from_scores(
        &draw(mean_pos, n_target, 0),
        &draw(mean_neg, n_nontarget, 1),
    );
    let p = DcfParams {
        p_target,
        ..DcfParams::default()
    };
    let det = det_metrics(&scores, &p)?;
    let stats = score_stats(&scores)?;
    let hist: Vec<[f64; 3]> = stats
        .histogram
        .iter()
        .map(|b| [b.left, b.pos as f64, b.neg as f64])
        .collect();
    Ok(json!({
        "eer": det.eer,
        "threshold_at_eer": det.threshold_at_eer,
        "min_dcf": det.min_dcf,
        "threshold_at_min_dcf": det.threshold_at_min_dcf,
        "gap": stats.gap,
        "histogram": hist,
        "roc": det.roc.iter().map(|o| [o.far, o.frr]).collect::<Vec<_>>(),
    })
    .to_string())
}

#[wasm_bindgen]
pub fn score_metrics(
    mean_pos: f64,
    mean_neg: f64,
    std: f64,
    n_target: usize,
    n_nontarget: usize,
    p_target: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    js(score_metrics_json(
        mean_pos,
        mean_neg,
        std,
        n_target,
        n_nontarget,
        p_target,
        seed.into(),
    ))
}
