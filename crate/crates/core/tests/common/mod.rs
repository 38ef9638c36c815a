#![allow(dead_code)]

use mcsv::losscheck::fd_noise;
use mcsv::losses::{loss_with_margin, EmbeddingBatch, LossVariant};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
}

pub fn batch(a: &Array2<f64>) -> EmbeddingBatch {
    EmbeddingBatch::new(a.clone()).unwrap()
}

/// Reference loss: views stacked as `[z; z']`, anchors enumerated one at a
/// time, every similarity recomputed from the raw rows. The angular margin
/// is applied to the angle itself.
pub fn oracle_loss(
    z: &Array2<f64>,
    zp: &Array2<f64>,
    variant: LossVariant,
    tau: f64,
    m: f64,
) -> f64 {
    let n = z.nrows();
    let all: Vec<Array1<f64>> = z
        .rows()
        .into_iter()
        .chain(zp.rows())
        .map(|r| r.to_owned())
        .collect();
    let cosine = |a: usize, b: usize| {
        all[a].dot(&all[b]) / (all[a].dot(&all[a]).sqrt() * all[b].dot(&all[b]).sqrt())
    };
    let ell_minus = |a: usize, b: usize| (cosine(a, b) / tau).exp();
    let ell_plus = |a: usize, b: usize| match variant {
        LossVariant::SntXentAm => ((cosine(a, b) - m) / tau).exp(),
        LossVariant::SntXentAam => {
            let theta = cosine(a, b).clamp(-1.0 + 1e-7, 1.0 - 1e-7).acos();
            ((theta + m).cos() / tau).exp()
        }
        _ => ell_minus(a, b),
    };
    let mut terms = Vec::new();
    if variant == LossVariant::NtXent {
        for i in 0..n {
            let denom: f64 = (n..2 * n).map(|k| ell_minus(i, k)).sum();
            terms.push(-(ell_minus(i, i + n) / denom).ln());
        }
    } else {
        for i in 0..2 * n {
            let j = (i + n) % (2 * n);
            let negatives: f64 = (0..2 * n)
                .filter(|&k| k != i && k != j)
                .map(|k| ell_minus(i, k))
                .sum();
            let pos = ell_plus(i, j);
            terms.push(-(pos / (pos + negatives)).ln());
        }
    }
    terms.iter().sum::<f64>() / terms.len() as f64
}

/// Worst relative error of analytic against central-difference gradients,
/// `(gated, strict)`. The gated form floors the denominator at the rounding
/// noise of the difference quotient divided by `tol`.
pub fn gradcheck(
    z: &Array2<f64>,
    zp: &Array2<f64>,
    variant: LossVariant,
    tau: f64,
    m: f64,
    h: f64,
    tol: f64,
) -> (f64, f64) {
    let out = loss_with_margin(&batch(z), &batch(zp), variant, tau, m).unwrap();
    let (mut gated, mut strict): (f64, f64) = (0.0, 0.0);
    for side in 0..2 {
        let grad = if side == 0 { &out.grad_z } else { &out.grad_zp };
        for ((r, c), &g) in grad.indexed_iter() {
            let shifted = |delta: f64| {
                let (mut a, mut b) = (z.clone(), zp.clone());
                if side == 0 {
                    a[(r, c)] += delta;
                } else {
                    b[(r, c)] += delta;
                }
                loss_with_margin(&batch(&a), &batch(&b), variant, tau, m)
                    .unwrap()
                    .loss
            };
            let (up, down) = (shifted(h), shifted(-h));
            let numeric = (up - down) / (2.0 * h);
            let scale = g.abs().max(numeric.abs());
            if scale > 1e-8 {
                let diff = (g - numeric).abs();
                strict = strict.max(diff / scale);
                gated = gated.max(diff / scale.max(fd_noise(up, down, h) / tol));
            }
        }
    }
    (gated, strict)
}

/// FAR/FRR counted directly at every candidate threshold, ascending, `+inf` last.
pub fn brute_sweep(tar: &[f64], non: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut thresholds: Vec<f64> = tar.iter().chain(non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    thresholds
        .into_iter()
        .map(|t| {
            let far = non.iter().filter(|&&s| s >= t).count() as f64 / non.len() as f64;
            let frr = tar.iter().filter(|&&s| s < t).count() as f64 / tar.len() as f64;
            (t, far, frr)
        })
        .collect()
}

pub fn brute_eer(tar: &[f64], non: &[f64]) -> f64 {
    let sweep = brute_sweep(tar, non);
    let k = sweep.iter().position(|&(_, far, frr)| far <= frr).unwrap();
    let (_, far_b, frr_b) = sweep[k];
    if far_b == frr_b || k == 0 {
        return far_b;
    }
    let (_, far_a, frr_a) = sweep[k - 1];
    let (da, db) = (far_a - frr_a, far_b - frr_b);
    far_a + da / (da - db) * (far_b - far_a)
}

pub fn brute_min_dcf(tar: &[f64], non: &[f64], p_target: f64, c_miss: f64, c_fa: f64) -> f64 {
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    brute_sweep(tar, non)
        .iter()
        .map(|&(_, far, frr)| c_miss * frr * p_target + c_fa * far * (1.0 - p_target))
        .fold(f64::INFINITY, f64::min)
        / norm
}

/// Score sets of random sizes and separations; half are quantized to force ties.
pub fn random_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let nt = rng.random_range(1..60);
    let nn = rng.random_range(1..200);
    let shift = rng.random_range(0.0..0.6);
    let coarse = rng.random_bool(0.5);
    let draw = |rng: &mut ChaCha8Rng, mu: f64| {
        let s: f64 = mu + rng.random_range(-0.4..0.4);
        if coarse {
            (s * 20.0).round() / 20.0
        } else {
            s
        }
    };
    let tar = (0..nt).map(|_| draw(rng, shift)).collect();
    let non = (0..nn).map(|_| draw(rng, 0.0)).collect();
    (tar, non)
}
