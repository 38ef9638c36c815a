//! Contrastive objectives over two views of a mini-batch.
//!
//! Four variants share one code path: NT-Xent (anchors from `Z`, candidates
//! from `Z'`), and the symmetric SNT-Xent family where all `2N` views serve as
//! anchors. AM and AAM only change the positive-pair logit:
//!
//! | variant  | positive logit                 | negative logit |
//! |----------|--------------------------------|----------------|
//! | SNT-Xent | `cos / tau`                    | `cos / tau`    |
//! | AM       | `(cos - m) / tau`              | `cos / tau`    |
//! | AAM      | `cos(acos(cos) + m) / tau`     | `cos / tau`    |
//!
//! Everything is evaluated in log space, so `tau = 0.02` (logits up to 50)
//! is safe. Gradients are analytic and flow through the l2 normalization of
//! each embedding row.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.02;
/// Cosines are clamped to `[-1 + COS_CLAMP, 1 - COS_CLAMP]` before `acos`/`sqrt`.
pub const COS_CLAMP: f64 = 1e-7;

/// `N x D` stack of embeddings, one row per utterance view.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch(Array2<f64>);

impl EmbeddingBatch {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "embedding batch has non-finite entries".into(),
            ));
        }
        Ok(Self(rows))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

impl From<EmbeddingBatch> for Array2<f64> {
    fn from(b: EmbeddingBatch) -> Self {
        b.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    NtXent,
    SntXent,
    SntXentAm,
    SntXentAam,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::NtXent,
        LossVariant::SntXent,
        LossVariant::SntXentAm,
        LossVariant::SntXentAam,
    ];

    pub fn is_symmetric(self) -> bool {
        !matches!(self, LossVariant::NtXent)
    }

    pub fn uses_margin(self) -> bool {
        matches!(self, LossVariant::SntXentAm | LossVariant::SntXentAam)
    }

    /// Short name accepted on the command line.
    pub fn short_name(self) -> &'static str {
        match self {
            LossVariant::NtXent => "ntxent",
            LossVariant::SntXent => "sntxent",
            LossVariant::SntXentAm => "am",
            LossVariant::SntXentAam => "aam",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::NtXent => "NT-Xent",
            LossVariant::SntXent => "SNT-Xent",
            LossVariant::SntXentAm => "SNT-Xent-AM",
            LossVariant::SntXentAam => "SNT-Xent-AAM",
        })
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "ntxent" => Ok(LossVariant::NtXent),
            "sntxent" => Ok(LossVariant::SntXent),
            "am" | "sntxentam" => Ok(LossVariant::SntXentAm),
            "aam" | "sntxentaam" => Ok(LossVariant::SntXentAam),
            _ => Err(Error::InvalidArgument(format!(
                "unknown loss `{s}` (expected ntxent, sntxent, am or aam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    CosineRamp,
}

/// Margin as a function of the optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginSchedule {
    pub kind: ScheduleKind,
    pub total_steps: u64,
    pub final_margin: f64,
}

impl MarginSchedule {
    pub fn constant(margin: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            total_steps: 1,
            final_margin: margin,
        }
    }

    pub fn cosine_ramp(margin: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::CosineRamp,
            total_steps,
            final_margin: margin,
        }
    }

    /// Cosine ramp from 0 that reaches the final margin at `total_steps / 2`.
    pub fn margin_at(&self, step: u64) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.final_margin,
            ScheduleKind::CosineRamp => {
                let total = self.total_steps.max(1) as f64;
                let progress = (2.0 * step as f64 / total).min(1.0);
                if progress >= 1.0 {
                    self.final_margin
                } else {
                    self.final_margin * (1.0 - (std::f64::consts::PI * progress).cos()) / 2.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub tau: f64,
    pub schedule: MarginSchedule,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::SntXent,
            tau: DEFAULT_TAU,
            schedule: MarginSchedule::constant(0.0),
        }
    }
}

impl LossConfig {
    pub fn new(variant: LossVariant, tau: f64, margin: f64) -> Self {
        Self {
            variant,
            tau,
            schedule: MarginSchedule::constant(margin),
        }
    }

    pub fn margin(&self) -> f64 {
        self.schedule.final_margin
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        let m = self.schedule.final_margin;
        if !(m >= 0.0 && m.is_finite()) {
            return Err(Error::Config(format!("margin must be >= 0, got {m}")));
        }
        if self.variant == LossVariant::SntXentAam && m >= FRAC_PI_2 {
            return Err(Error::Config(format!(
                "angular margin must be < pi/2, got {m}"
            )));
        }
        if self.schedule.total_steps == 0 {
            return Err(Error::Config("schedule needs total_steps > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Diagnostics {
    pub mean_pos_cos: f64,
    pub mean_neg_cos: f64,
    /// Largest l2 norm over the rows of `[grad_z; grad_zp]`.
    pub grad_max_norm: f64,
}

/// How many contrastive comparisons one evaluation made.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCounts {
    pub positives: usize,
    pub negatives_per_anchor: usize,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_z: Array2<f64>,
    pub grad_zp: Array2<f64>,
    /// `dL/dm`, for a learnable margin. Zero for margin-free variants.
    pub grad_margin: f64,
    /// Margin the loss was evaluated at.
    pub margin: f64,
    pub pairs: PairCounts,
    pub diagnostics: Diagnostics,
}

/// Cosine of the angle between `u` and `v` (not clamped).
pub fn cosine_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {}", u.len(), v.len())));
    }
    let (nu, nv) = (u.dot(&u).sqrt(), v.dot(&v).sqrt());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(u.dot(&v) / (nu * nv))
}

pub fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
}

/// `log l(u, v) = cos / tau`.
pub fn pair_logit(cos: f64, tau: f64) -> f64 {
    cos / tau
}

pub fn positive_logit_am(cos: f64, margin: f64, tau: f64) -> f64 {
    (cos - margin) / tau
}

/// `cos(theta + m) / tau`, expanded as `cos*cos(m) - sin(theta)*sin(m)`.
pub fn positive_logit_aam(cos: f64, margin: f64, tau: f64) -> f64 {
    let c = clamp_cos(cos);
    (c * margin.cos() - (1.0 - c * c).sqrt() * margin.sin()) / tau
}

/// Positive-pair logit transform with its derivatives.
#[derive(Debug, Clone, Copy)]
enum Positive {
    Plain,
    Additive(f64),
    Angular(f64),
}

impl Positive {
    /// Returns `(logit, dlogit/dcos, dlogit/dm)`.
    fn eval(self, cos: f64, tau: f64) -> (f64, f64, f64) {
        match self {
            Positive::Plain => (cos / tau, 1.0 / tau, 0.0),
            Positive::Additive(m) => (positive_logit_am(cos, m, tau), 1.0 / tau, -1.0 / tau),
            Positive::Angular(m) => {
                let c = clamp_cos(cos);
                let sin_theta = (1.0 - c * c).sqrt();
                let (sm, cm) = m.sin_cos();
                let logit = (c * cm - sin_theta * sm) / tau;
                // the clamp is flat outside its range
                let dcos = if c == cos {
                    (cm + c * sm / sin_theta) / tau
                } else {
                    0.0
                };
                let dm = -(c * sm + sin_theta * cm) / tau;
                (logit, dcos, dm)
            }
        }
    }
}

struct AnchorTerm {
    loss: f64,
    dmargin: f64,
    pos_cos: f64,
    neg_cos_sum: f64,
    negatives: usize,
}

/// Cross-entropy of one anchor row of the cosine matrix, writing
/// `scale * dL/dcos` into `grad_row`. `skip` marks a column (the anchor
/// itself) that takes no part.
fn anchor_term(
    cos_row: ArrayView1<f64>,
    positive: usize,
    skip: Option<usize>,
    tau: f64,
    pos: Positive,
    scale: f64,
    mut grad_row: ArrayViewMut1<f64>,
) -> AnchorTerm {
    let (pos_logit, pos_dcos, pos_dm) = pos.eval(cos_row[positive], tau);
    let is_negative = |a: usize| a != positive && Some(a) != skip;

    let mut max = pos_logit;
    for (a, &c) in cos_row.iter().enumerate() {
        if is_negative(a) {
            max = max.max(pair_logit(c, tau));
        }
    }
    let mut sum = (pos_logit - max).exp();
    let mut neg_cos_sum = 0.0;
    let mut negatives = 0;
    for (a, &c) in cos_row.iter().enumerate() {
        if is_negative(a) {
            sum += (pair_logit(c, tau) - max).exp();
            neg_cos_sum += c;
            negatives += 1;
        }
    }
    let lse = max + sum.ln();

    for (a, &c) in cos_row.iter().enumerate() {
        if is_negative(a) {
            let p = (pair_logit(c, tau) - lse).exp();
            grad_row[a] += scale * p / tau;
        }
    }
    let p_pos = (pos_logit - lse).exp();
    grad_row[positive] += scale * (p_pos - 1.0) * pos_dcos;

    AnchorTerm {
        loss: lse - pos_logit,
        dmargin: (p_pos - 1.0) * pos_dm,
        pos_cos: cos_row[positive],
        neg_cos_sum,
        negatives,
    }
}

/// Row-normalizes `z`, returning unit rows and the original norms.
fn normalize_rows(z: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::ZeroNorm);
    }
    let unit = &z / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Pulls `dL/du` back through `u = z / |z|`.
fn through_normalization(
    unit: &Array2<f64>,
    norms: &Array1<f64>,
    grad_unit: Array2<f64>,
) -> Array2<f64> {
    let mut out = grad_unit;
    for ((mut g, u), &n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        let radial = g.dot(&u);
        g.scaled_add(-radial, &u);
        g /= n;
    }
    out
}

fn check_pair(z: &EmbeddingBatch, zp: &EmbeddingBatch, tau: f64) -> Result<()> {
    if z.0.dim() != zp.0.dim() {
        return Err(Error::ShapeMismatch(format!(
            "views have shapes {:?} and {:?}",
            z.0.dim(),
            zp.0.dim()
        )));
    }
    if z.rows() < 2 {
        return Err(Error::BatchTooSmall(z.rows()));
    }
    if z.dim() == 0 {
        return Err(Error::ShapeMismatch("embedding dimension is zero".into()));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "tau must be positive, got {tau}"
        )));
    }
    Ok(())
}

fn max_row_norm(a: &Array2<f64>) -> f64 {
    a.rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max)
}

fn finish(
    terms: Vec<AnchorTerm>,
    grad_z: Array2<f64>,
    grad_zp: Array2<f64>,
    margin: f64,
) -> LossOutput {
    let k = terms.len() as f64;
    let loss = terms.iter().map(|t| t.loss).sum::<f64>() / k;
    let grad_margin = terms.iter().map(|t| t.dmargin).sum::<f64>() / k;
    let negatives: usize = terms.iter().map(|t| t.negatives).sum();
    let mean_pos_cos = terms.iter().map(|t| t.pos_cos).sum::<f64>() / k;
    let mean_neg_cos = terms.iter().map(|t| t.neg_cos_sum).sum::<f64>() / negatives as f64;
    let per_anchor = terms[0].negatives;
    debug_assert!(terms.iter().all(|t| t.negatives == per_anchor));
    let grad_max_norm = max_row_norm(&grad_z).max(max_row_norm(&grad_zp));
    LossOutput {
        loss,
        grad_z,
        grad_zp,
        grad_margin,
        margin,
        pairs: PairCounts {
            positives: terms.len(),
            negatives_per_anchor: per_anchor,
        },
        diagnostics: Diagnostics {
            mean_pos_cos: mean_pos_cos.clamp(-1.0, 1.0),
            mean_neg_cos: mean_neg_cos.clamp(-1.0, 1.0),
            grad_max_norm,
        },
    }
}

/// NT-Xent: anchors from `z`, the positive and all negatives from `zp`.
pub fn nt_xent(z: &EmbeddingBatch, zp: &EmbeddingBatch, tau: f64) -> Result<LossOutput> {
    check_pair(z, zp, tau)?;
    let n = z.rows();
    let (u, nu) = normalize_rows(z.view())?;
    let (up, nup) = normalize_rows(zp.view())?;
    let cos = u.dot(&up.t());
    let mut grad_cos = Array2::zeros((n, n));
    let scale = 1.0 / n as f64;
    let terms: Vec<AnchorTerm> = (0..n)
        .map(|i| {
            anchor_term(
                cos.row(i),
                i,
                None,
                tau,
                Positive::Plain,
                scale,
                grad_cos.row_mut(i),
            )
        })
        .collect();
    let grad_u = grad_cos.dot(&up);
    let grad_up = grad_cos.t().dot(&u);
    Ok(finish(
        terms,
        through_normalization(&u, &nu, grad_u),
        through_normalization(&up, &nup, grad_up),
        0.0,
    ))
}

fn symmetric(
    z: &EmbeddingBatch,
    zp: &EmbeddingBatch,
    tau: f64,
    pos: Positive,
    margin: f64,
) -> Result<LossOutput> {
    check_pair(z, zp, tau)?;
    let n = z.rows();
    let views =
        ndarray::concatenate(Axis(0), &[z.view(), zp.view()]).expect("views have equal widths");
    let (w, norms) = normalize_rows(views.view())?;
    let cos = w.dot(&w.t());
    let mut grad_cos = Array2::zeros((2 * n, 2 * n));
    let scale = 1.0 / (2 * n) as f64;
    let terms: Vec<AnchorTerm> = (0..2 * n)
        .map(|i| {
            let partner = (i + n) % (2 * n);
            anchor_term(
                cos.row(i),
                partner,
                Some(i),
                tau,
                pos,
                scale,
                grad_cos.row_mut(i),
            )
        })
        .collect();
    let sym = &grad_cos + &grad_cos.t();
    let grad_w = through_normalization(&w, &norms, sym.dot(&w));
    let grad_z = grad_w.slice(ndarray::s![..n, ..]).to_owned();
    let grad_zp = grad_w.slice(ndarray::s![n.., ..]).to_owned();
    Ok(finish(terms, grad_z, grad_zp, margin))
}

/// Symmetric NT-Xent over all `2N` views.
pub fn snt_xent(z: &EmbeddingBatch, zp: &EmbeddingBatch, tau: f64) -> Result<LossOutput> {
    symmetric(z, zp, tau, Positive::Plain, 0.0)
}

/// SNT-Xent with a cosine-space margin on the positive pair.
pub fn snt_xent_am(
    z: &EmbeddingBatch,
    zp: &EmbeddingBatch,
    tau: f64,
    margin: f64,
) -> Result<LossOutput> {
    if margin.is_nan() || margin < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "margin must be >= 0, got {margin}"
        )));
    }
    symmetric(z, zp, tau, Positive::Additive(margin), margin)
}

/// SNT-Xent with an angle-space margin on the positive pair.
pub fn snt_xent_aam(
    z: &EmbeddingBatch,
    zp: &EmbeddingBatch,
    tau: f64,
    margin: f64,
) -> Result<LossOutput> {
    if !(0.0..FRAC_PI_2).contains(&margin) {
        return Err(Error::InvalidArgument(format!(
            "angular margin must lie in [0, pi/2), got {margin}"
        )));
    }
    symmetric(z, zp, tau, Positive::Angular(margin), margin)
}

/// Evaluates `cfg.variant` at an explicit margin.
pub fn loss_with_margin(
    z: &EmbeddingBatch,
    zp: &EmbeddingBatch,
    variant: LossVariant,
    tau: f64,
    margin: f64,
) -> Result<LossOutput> {
    match variant {
        LossVariant::NtXent => nt_xent(z, zp, tau),
        LossVariant::SntXent => snt_xent(z, zp, tau),
        LossVariant::SntXentAm => snt_xent_am(z, zp, tau, margin),
        LossVariant::SntXentAam => snt_xent_aam(z, zp, tau, margin),
    }
}

/// Loss at optimizer `step`, with the margin taken from the schedule.
pub fn compute_loss(
    z: &EmbeddingBatch,
    zp: &EmbeddingBatch,
    cfg: &LossConfig,
    step: u64,
) -> Result<LossOutput> {
    cfg.validate()?;
    let margin = if cfg.variant.uses_margin() {
        cfg.schedule.margin_at(step)
    } else {
        0.0
    };
    loss_with_margin(z, zp, cfg.variant, cfg.tau, margin)
}

/// Comparisons a variant makes for a batch of `n` utterances.
pub fn expected_pair_counts(variant: LossVariant, n: usize) -> PairCounts {
    if variant.is_symmetric() {
        PairCounts {
            positives: 2 * n,
            negatives_per_anchor: 2 * (n - 1),
        }
    } else {
        PairCounts {
            positives: n,
            negatives_per_anchor: n - 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn batch(a: Array2<f64>) -> EmbeddingBatch {
        EmbeddingBatch::new(a).unwrap()
    }

    fn eye2() -> EmbeddingBatch {
        batch(array![[1.0, 0.0], [0.0, 1.0]])
    }

    #[test]
    fn cosine_examples() {
        let c = |u: Array1<f64>, v: Array1<f64>| cosine_similarity(u.view(), v.view()).unwrap();
        assert!((c(array![3.0, 4.0], array![3.0, 4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(c(array![1.0, 0.0], array![0.0, 1.0]), 0.0);
        assert_eq!(c(array![1.0, 0.0], array![-2.0, 0.0]), -1.0);
        let zero = array![0.0, 0.0];
        assert!(matches!(
            cosine_similarity(zero.view(), array![1.0, 0.0].view()),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn logit_examples() {
        assert_eq!(pair_logit(0.0, 1.0), 0.0);
        assert!((pair_logit(1.0, 0.02) - 50.0).abs() < 1e-12);
        assert_eq!(pair_logit(-1.0, 0.5), -2.0);
        assert_eq!(positive_logit_am(0.3, 0.0, 0.7), pair_logit(0.3, 0.7));
        assert!((positive_logit_am(1.0, 0.4, 1.0) - 0.6).abs() < 1e-15);
        assert!((positive_logit_aam(0.3, 0.0, 0.7) - pair_logit(0.3, 0.7)).abs() < 1e-15);
        let third = (std::f64::consts::PI / 3.0).cos();
        assert!(positive_logit_aam(third, std::f64::consts::PI / 6.0, 0.1).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_losses() {
        let e = std::f64::consts::E;
        let nt = nt_xent(&eye2(), &eye2(), 1.0).unwrap().loss;
        assert!((nt - ((e + 1.0).ln() - 1.0)).abs() < 1e-12);
        assert!((nt - 0.313262).abs() < 1e-6);
        let snt = snt_xent(&eye2(), &eye2(), 1.0).unwrap().loss;
        assert!((snt - ((e + 2.0).ln() - 1.0)).abs() < 1e-12);
        assert!((snt - 0.551444).abs() < 1e-6);
        let am = snt_xent_am(&eye2(), &eye2(), 1.0, 0.5).unwrap().loss;
        assert!((am - ((0.5f64.exp() + 2.0).ln() - 0.5)).abs() < 1e-12);
        assert!((am - 0.794376).abs() < 1e-6);
        // positives sit at cos = 1, clamped to 1 - 1e-7 before adding the angle
        let aam = snt_xent_aam(&eye2(), &eye2(), 1.0, 0.1).unwrap().loss;
        let pos = 0.1f64.cos();
        let expected = (pos.exp() + 2.0).ln() - pos;
        assert!((aam - expected).abs() < 1e-4, "{aam} vs {expected}");
        assert!((aam - 0.5536).abs() < 1e-4);
    }

    #[test]
    fn rejects_single_row_and_mismatched_views() {
        let one = batch(array![[1.0, 0.0]]);
        assert!(matches!(
            nt_xent(&one, &one, 1.0),
            Err(Error::BatchTooSmall(1))
        ));
        let three = batch(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(matches!(
            snt_xent(&eye2(), &three, 1.0),
            Err(Error::ShapeMismatch(_))
        ));
        let zero_row = batch(array![[0.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            snt_xent(&zero_row, &eye2(), 1.0),
            Err(Error::ZeroNorm)
        ));
        assert!(EmbeddingBatch::new(array![[f64::NAN, 1.0]]).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = MarginSchedule::cosine_ramp(0.4, 100);
        assert_eq!(s.margin_at(0), 0.0);
        assert!((s.margin_at(25) - 0.2).abs() < 1e-15);
        assert_eq!(s.margin_at(50), 0.4);
        assert_eq!(s.margin_at(51), 0.4);
        assert_eq!(s.margin_at(10_000), 0.4);
        assert_eq!(MarginSchedule::constant(0.3).margin_at(0), 0.3);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::new(LossVariant::SntXentAam, 0.02, 1.6)
            .validate()
            .is_err());
        assert!(LossConfig::new(LossVariant::SntXentAm, 0.02, 1.6)
            .validate()
            .is_ok());
        assert!(LossConfig::new(LossVariant::SntXent, 0.0, 0.0)
            .validate()
            .is_err());
        assert!(LossConfig::new(LossVariant::SntXentAm, 0.02, -0.1)
            .validate()
            .is_err());
    }

    #[test]
    fn variant_names_parse() {
        for v in LossVariant::ALL {
            assert_eq!(v.short_name().parse::<LossVariant>().unwrap(), v);
        }
        assert_eq!(
            "SNT-Xent-AM".parse::<LossVariant>().unwrap(),
            LossVariant::SntXentAm
        );
        assert!("arcface".parse::<LossVariant>().is_err());
    }

    #[test]
    fn duplicate_rows_stay_finite() {
        let z = batch(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        for v in LossVariant::ALL {
            let out = loss_with_margin(&z, &z, v, 0.02, 0.2).unwrap();
            assert!(out.loss.is_finite());
            assert!(out
                .grad_z
                .iter()
                .chain(out.grad_zp.iter())
                .all(|g| g.is_finite()));
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let z = batch(array![[1.0, 0.0], [-1.0, 0.0]]);
        let out = snt_xent(&z, &z, 1e-3).unwrap();
        assert!(out.loss.is_finite() && out.loss >= 0.0);
    }
}
