//! Self-test for the loss kernels: finite-difference gradient checks and
//! agreement with a per-pair scalar enumeration, over random batches.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::losses::{
    expected_pair_counts, loss_with_margin, EmbeddingBatch, LossOutput, LossVariant,
};
use crate::seed;

/// A deliberate bug, to show the harness catches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negates the analytic embedding gradients of the additive-margin loss.
    AmGradientSignFlip,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckCase {
    pub variant: LossVariant,
    pub margin: f64,
}

impl CheckCase {
    pub fn label(&self) -> String {
        if self.variant.uses_margin() {
            format!("{} m={}", self.variant, self.margin)
        } else {
            self.variant.to_string()
        }
    }
}

pub fn default_cases() -> Vec<CheckCase> {
    let case = |variant, margin| CheckCase { variant, margin };
    vec![
        case(LossVariant::NtXent, 0.0),
        case(LossVariant::SntXent, 0.0),
        case(LossVariant::SntXentAm, 0.1),
        case(LossVariant::SntXentAm, 0.4),
        case(LossVariant::SntXentAam, 0.05),
        case(LossVariant::SntXentAam, 0.1),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LosscheckOptions {
    pub cases: Vec<CheckCase>,
    pub seed: u64,
    /// Gradient-check batches per case, with `N` drawn from `grad_sizes`.
    pub grad_batches: usize,
    pub grad_sizes: Vec<usize>,
    pub grad_dims: Vec<usize>,
    /// Oracle batches per case, with `N` in `2..=oracle_max_n`.
    pub oracle_batches: usize,
    pub oracle_max_n: usize,
    pub tau: f64,
    pub step: f64,
    pub grad_tol: f64,
    pub oracle_tol: f64,
    /// Entries below this magnitude are left out of the relative error.
    pub grad_floor: f64,
    pub fault: Option<Fault>,
}

impl Default for LosscheckOptions {
    fn default() -> Self {
        Self {
            cases: default_cases(),
            seed: 0,
            grad_batches: 20,
            grad_sizes: vec![2, 4, 8],
            grad_dims: vec![3, 16],
            oracle_batches: 100,
            oracle_max_n: 16,
            tau: 0.5,
            step: 1e-5,
            grad_tol: 1e-5,
            oracle_tol: 1e-10,
            grad_floor: 1e-8,
            fault: None,
        }
    }
}

impl LosscheckOptions {
    /// Every batch has exactly `n` rows.
    pub fn with_batch_size(mut self, n: usize) -> Self {
        self.grad_sizes = vec![n];
        self.oracle_max_n = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&n) = self.grad_sizes.iter().find(|&&n| n < 2) {
            return Err(Error::BatchTooSmall(n));
        }
        if self.oracle_max_n < 2 {
            return Err(Error::BatchTooSmall(self.oracle_max_n));
        }
        if self.grad_sizes.is_empty() || self.grad_dims.is_empty() || self.grad_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "need batch sizes and nonzero dimensions".into(),
            ));
        }
        if !(self.tau > 0.0 && self.step > 0.0) {
            return Err(Error::InvalidArgument(
                "tau and step must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub case: CheckCase,
    /// Relative error, with denominators floored at what the finite
    /// difference can resolve (`fd_noise / grad_tol`).
    pub max_grad_rel_err: f64,
    /// Plain relative error over every entry above `grad_floor`.
    pub strict_grad_rel_err: f64,
    pub max_margin_rel_err: f64,
    pub max_oracle_abs_err: f64,
    pub pair_counts_ok: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LosscheckReport {
    pub cases: Vec<CaseReport>,
    pub grad_tol: f64,
    pub oracle_tol: f64,
}

impl LosscheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<20} {:>13} {:>13} {:>13} {:>13} {:>6} {:>6}\n",
            "loss", "grad_rel_err", "strict_rel", "margin_rel", "oracle_err", "pairs", "result"
        );
        for c in &self.cases {
            let _ = writeln!(
                out,
                "{:<20} {:>13.3e} {:>13.3e} {:>13.3e} {:>13.3e} {:>6} {:>6}",
                c.case.label(),
                c.max_grad_rel_err,
                c.strict_grad_rel_err,
                c.max_margin_rel_err,
                c.max_oracle_abs_err,
                if c.pair_counts_ok { "ok" } else { "BAD" },
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            out,
            "tolerances: gradient {:e} (relative), oracle {:e} (absolute)",
            self.grad_tol, self.oracle_tol
        );
        out
    }
}

fn random_batch<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<EmbeddingBatch> {
    EmbeddingBatch::new(Array2::from_shape_fn((n, d), |_| {
        rng.sample(StandardNormal)
    }))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Loss by enumerating every anchor, its positive and its negatives one
/// scalar at a time. Uses the `acos` form of the angular margin.
pub fn naive_loss(
    z: &Array2<f64>,
    zp: &Array2<f64>,
    variant: LossVariant,
    tau: f64,
    margin: f64,
) -> f64 {
    let n = z.nrows();
    let rows: Vec<Vec<f64>> = z
        .rows()
        .into_iter()
        .chain(zp.rows())
        .map(|r| r.to_vec())
        .collect();
    let positive = |c: f64| match variant {
        LossVariant::NtXent | LossVariant::SntXent => c / tau,
        LossVariant::SntXentAm => (c - margin) / tau,
        LossVariant::SntXentAam => {
            let c = c.clamp(-1.0 + 1e-7, 1.0 - 1e-7);
            (c.acos() + margin).cos() / tau
        }
    };
    let mut total = 0.0;
    let mut anchors = 0;
    let anchor_range = if variant.is_symmetric() {
        0..2 * n
    } else {
        0..n
    };
    for i in anchor_range {
        let j = if i < n { i + n } else { i - n };
        let pos = positive(cosine(&rows[i], &rows[j])).exp();
        let mut neg = 0.0;
        for a in 0..2 * n {
            let counted = if variant.is_symmetric() {
                a != i && a != j
            } else {
                a >= n && a != j
            };
            if counted {
                neg += (cosine(&rows[i], &rows[a]) / tau).exp();
            }
        }
        total += -(pos / (pos + neg)).ln();
        anchors += 1;
    }
    total / anchors as f64
}

fn evaluate(
    z: &EmbeddingBatch,
    zp: &EmbeddingBatch,
    case: &CheckCase,
    opts: &LosscheckOptions,
) -> Result<LossOutput> {
    let mut out = loss_with_margin(z, zp, case.variant, opts.tau, case.margin)?;
    if opts.fault == Some(Fault::AmGradientSignFlip) && case.variant == LossVariant::SntXentAm {
        out.grad_z.mapv_inplace(|g| -g);
        out.grad_zp.mapv_inplace(|g| -g);
    }
    Ok(out)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

/// Bound on the rounding error of a central difference: a few ulps of the
/// loss values, divided by `2h`.
pub fn fd_noise(up: f64, down: f64, h: f64) -> f64 {
    8.0 * f64::EPSILON * up.abs().max(down.abs()) / (2.0 * h)
}

fn check_case(case: &CheckCase, index: u64, opts: &LosscheckOptions) -> Result<CaseReport> {
    let mut rng = seed::stream(opts.seed, &[30, index]);
    let h = opts.step;
    let mut max_grad: f64 = 0.0;
    let mut max_margin: f64 = 0.0;
    let mut strict: f64 = 0.0;
    for _ in 0..opts.grad_batches {
        let n = opts.grad_sizes[rng.random_range(0..opts.grad_sizes.len())];
        let d = opts.grad_dims[rng.random_range(0..opts.grad_dims.len())];
        let z = random_batch(n, d, &mut rng)?;
        let zp = random_batch(n, d, &mut rng)?;
        let out = evaluate(&z, &zp, case, opts)?;
        let loss_at = |z: Array2<f64>, zp: Array2<f64>| -> Result<f64> {
            Ok(loss_with_margin(
                &EmbeddingBatch::new(z)?,
                &EmbeddingBatch::new(zp)?,
                case.variant,
                opts.tau,
                case.margin,
            )?
            .loss)
        };
        for (which, grad) in [(0, &out.grad_z), (1, &out.grad_zp)] {
            for ((r, c), &g) in grad.indexed_iter() {
                let mut up = (z.view().to_owned(), zp.view().to_owned());
                let mut down = up.clone();
                let (u, dn) = if which == 0 {
                    (&mut up.0, &mut down.0)
                } else {
                    (&mut up.1, &mut down.1)
                };
                u[(r, c)] += h;
                dn[(r, c)] -= h;
                let (lu, ld) = (loss_at(up.0, up.1)?, loss_at(down.0, down.1)?);
                let numeric = (lu - ld) / (2.0 * h);
                if g.abs().max(numeric.abs()) > opts.grad_floor {
                    strict = strict.max(rel_err(g, numeric));
                    let resolvable = fd_noise(lu, ld, h) / opts.grad_tol;
                    max_grad = max_grad
                        .max((g - numeric).abs() / g.abs().max(numeric.abs()).max(resolvable));
                }
            }
        }
        if case.variant.uses_margin() {
            let at = |m: f64| loss_with_margin(&z, &zp, case.variant, opts.tau, m).map(|o| o.loss);
            let (lu, ld) = (at(case.margin + h)?, at(case.margin - h)?);
            let numeric = (lu - ld) / (2.0 * h);
            let g = out.grad_margin;
            if g.abs().max(numeric.abs()) > opts.grad_floor {
                let resolvable = fd_noise(lu, ld, h) / opts.grad_tol;
                max_margin = max_margin
                    .max((g - numeric).abs() / g.abs().max(numeric.abs()).max(resolvable));
            }
        }
    }

    let mut max_oracle: f64 = 0.0;
    let mut pair_counts_ok = true;
    for b in 0..opts.oracle_batches {
        let n = 2 + b % (opts.oracle_max_n - 1);
        let d = rng.random_range(2..=16);
        let z = random_batch(n, d, &mut rng)?;
        let zp = random_batch(n, d, &mut rng)?;
        let out = loss_with_margin(&z, &zp, case.variant, opts.tau, case.margin)?;
        let naive = naive_loss(
            &z.view().to_owned(),
            &zp.view().to_owned(),
            case.variant,
            opts.tau,
            case.margin,
        );
        max_oracle = max_oracle.max((out.loss - naive).abs());
        pair_counts_ok &= out.pairs == expected_pair_counts(case.variant, n);
    }

    let passed = max_grad < opts.grad_tol
        && max_margin < opts.grad_tol
        && max_oracle < opts.oracle_tol
        && pair_counts_ok;
    Ok(CaseReport {
        case: *case,
        max_grad_rel_err: max_grad,
        strict_grad_rel_err: strict,
        max_margin_rel_err: max_margin,
        max_oracle_abs_err: max_oracle,
        pair_counts_ok,
        passed,
    })
}

pub fn run_losscheck(opts: &LosscheckOptions) -> Result<LosscheckReport> {
    opts.validate()?;
    let cases = opts
        .cases
        .iter()
        .enumerate()
        .map(|(i, c)| check_case(c, i as u64, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(LosscheckReport {
        cases,
        grad_tol: opts.grad_tol,
        oracle_tol: opts.oracle_tol,
    })
}
