//! Toy speaker encoder and projector with hand-written backpropagation.
//!
//! Encoder: two per-frame ReLU layers (`40 -> H -> H`), temporal pooling
//! (mean or self-attentive), and a linear head to the representation `y`.
//! Projector: `y -> P1 -> P2` with a ReLU after the first layer; when it is
//! disabled the embedding is the representation itself.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{FeatureMatrix, NUM_MELS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    /// `softmax_t(v . tanh(W h_t + b))`-weighted sum over frames.
    Attentive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub attention: usize,
    pub representation: usize,
    pub projector: bool,
    pub projector_hidden: usize,
    pub embedding: usize,
    pub pooling: Pooling,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input: NUM_MELS,
            hidden: 64,
            attention: 32,
            representation: 128,
            projector: true,
            projector_hidden: 256,
            embedding: 128,
            pooling: Pooling::Mean,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("input", self.input),
            ("hidden", self.hidden),
            ("representation", self.representation),
        ];
        for (name, n) in sizes {
            if n == 0 {
                return Err(Error::Config(format!(
                    "model dimension `{name}` must be positive"
                )));
            }
        }
        if self.projector && (self.projector_hidden == 0 || self.embedding == 0) {
            return Err(Error::Config(
                "projector dimensions must be positive".into(),
            ));
        }
        if self.pooling == Pooling::Attentive && self.attention == 0 {
            return Err(Error::Config(
                "attentive pooling needs attention > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        if self.projector {
            self.embedding
        } else {
            self.representation
        }
    }
}

/// Affine map `x W + b`, with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(inp: usize, out: usize) -> Self {
        Self {
            w: Array2::zeros((inp, out)),
            b: Array1::zeros(out),
        }
    }

    fn init<R: Rng + ?Sized>(inp: usize, out: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (inp as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((inp, out), |_| std * rng.sample::<f64, _>(StandardNormal)),
            b: Array1::zeros(out),
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    fn apply_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.w) + &self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub proj: Linear,
    pub v: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub frame1: Linear,
    pub frame2: Linear,
    pub attention: Option<AttentionParams>,
    pub head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub dims: ModelDims,
    pub encoder: EncoderParams,
    pub projector: Option<ProjectorParams>,
    version: u64,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.encoder == other.encoder
            && self.projector == other.projector
    }
}

/// Intermediates of one forward pass, consumed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    input: Array2<f64>,
    pre1: Array2<f64>,
    h1: Array2<f64>,
    pre2: Array2<f64>,
    h2: Array2<f64>,
    /// `(tanh activations, weights)` for attentive pooling.
    attention: Option<(Array2<f64>, Array1<f64>)>,
    pooled: Array1<f64>,
    representation: Array1<f64>,
    proj_pre: Option<Array1<f64>>,
}

pub struct Forward {
    pub representation: Array1<f64>,
    pub embedding: Array1<f64>,
    pub tape: Tape,
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn relu_mask(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    grad.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

impl Model {
    pub fn zeros(dims: ModelDims) -> Self {
        let attention = (dims.pooling == Pooling::Attentive).then(|| AttentionParams {
            proj: Linear::zeros(dims.hidden, dims.attention),
            v: Array1::zeros(dims.attention),
        });
        let projector = dims.projector.then(|| ProjectorParams {
            fc1: Linear::zeros(dims.representation, dims.projector_hidden),
            fc2: Linear::zeros(dims.projector_hidden, dims.embedding),
        });
        Self {
            dims,
            encoder: EncoderParams {
                frame1: Linear::zeros(dims.input, dims.hidden),
                frame2: Linear::zeros(dims.hidden, dims.hidden),
                attention,
                head: Linear::zeros(dims.hidden, dims.representation),
            },
            projector,
            version: fresh_version(),
        }
    }

    /// He-scaled Gaussian weights before ReLUs, unit-gain elsewhere; zero biases.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let relu_gain = 2f64.sqrt();
        let frame1 = Linear::init(dims.input, dims.hidden, relu_gain, rng);
        let frame2 = Linear::init(dims.hidden, dims.hidden, relu_gain, rng);
        let attention = (dims.pooling == Pooling::Attentive).then(|| AttentionParams {
            proj: Linear::init(dims.hidden, dims.attention, 1.0, rng),
            v: Array1::from_shape_fn(dims.attention, |_| {
                rng.sample::<f64, _>(StandardNormal) / (dims.attention as f64).sqrt()
            }),
        });
        let head = Linear::init(dims.hidden, dims.representation, 1.0, rng);
        let projector = dims.projector.then(|| ProjectorParams {
            fc1: Linear::init(dims.representation, dims.projector_hidden, relu_gain, rng),
            fc2: Linear::init(dims.projector_hidden, dims.embedding, 1.0, rng),
        });
        Self {
            dims,
            encoder: EncoderParams {
                frame1,
                frame2,
                attention,
                head,
            },
            projector,
            version: fresh_version(),
        }
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    /// Marks the parameters as changed, invalidating outstanding tapes.
    pub fn touch(&mut self) {
        self.version = fresh_version();
    }

    /// Parameter tensors in a fixed order, with stable names.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        self.for_each_slot(|name, dims, data| out.push((name, dims, data)));
        out
    }

    fn for_each_slot<'a>(&'a self, mut f: impl FnMut(String, Vec<usize>, &'a [f64])) {
        let mut linear = |name: &str, l: &'a Linear| {
            f(
                format!("{name}.w"),
                l.w.shape().to_vec(),
                l.w.as_slice().expect("standard layout"),
            );
            f(
                format!("{name}.b"),
                l.b.shape().to_vec(),
                l.b.as_slice().expect("standard layout"),
            );
        };
        linear("encoder.frame1", &self.encoder.frame1);
        linear("encoder.frame2", &self.encoder.frame2);
        if let Some(a) = &self.encoder.attention {
            linear("encoder.attention", &a.proj);
        }
        linear("encoder.head", &self.encoder.head);
        if let Some(p) = &self.projector {
            linear("projector.fc1", &p.fc1);
            linear("projector.fc2", &p.fc2);
        }
        if let Some(a) = &self.encoder.attention {
            f(
                "encoder.attention.v".into(),
                a.v.shape().to_vec(),
                a.v.as_slice().expect("standard layout"),
            );
        }
    }

    /// Mutable parameter slices in the order of [`Model::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.version = fresh_version();
        let mut out: Vec<&mut [f64]> = Vec::new();
        fn linear<'a>(l: &'a mut Linear, out: &mut Vec<&'a mut [f64]>) {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        let enc = &mut self.encoder;
        linear(&mut enc.frame1, &mut out);
        linear(&mut enc.frame2, &mut out);
        let mut attention_v = None;
        if let Some(a) = enc.attention.as_mut() {
            linear(&mut a.proj, &mut out);
            attention_v = Some(a.v.as_slice_mut().expect("standard layout"));
        }
        linear(&mut enc.head, &mut out);
        if let Some(p) = self.projector.as_mut() {
            linear(&mut p.fc1, &mut out);
            linear(&mut p.fc2, &mut out);
        }
        if let Some(v) = attention_v {
            out.push(v);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Model, scale: f64) {
        let src: Vec<Vec<f64>> = other
            .tensors()
            .into_iter()
            .map(|(_, _, d)| d.to_vec())
            .collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.iter_mut().zip(s).for_each(|(d, v)| *d += scale * v);
        }
    }

    pub fn forward(&self, f: &FeatureMatrix) -> Result<Forward> {
        if f.bands() != self.dims.input {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} bands, features have {}",
                self.dims.input,
                f.bands()
            )));
        }
        if f.frames() == 0 {
            return Err(Error::ShapeMismatch("feature matrix has no frames".into()));
        }
        let enc = &self.encoder;
        let input = f.values.clone();
        let pre1 = enc.frame1.apply(&input);
        let h1 = relu(&pre1);
        let pre2 = enc.frame2.apply(&h1);
        let h2 = relu(&pre2);
        let (pooled, attention) = match &enc.attention {
            None => (h2.mean_axis(Axis(0)).expect("at least one frame"), None),
            Some(a) => {
                let act = a.proj.apply(&h2).mapv(f64::tanh);
                let scores = act.dot(&a.v);
                let max = scores.fold(f64::NEG_INFINITY, |m, &s| m.max(s));
                let mut weights = scores.mapv(|s| (s - max).exp());
                weights /= weights.sum();
                (weights.dot(&h2), Some((act, weights)))
            }
        };
        let representation = enc.head.apply_vec(pooled.view());
        let (embedding, proj_pre) = match &self.projector {
            None => (representation.clone(), None),
            Some(p) => {
                let pre = p.fc1.apply_vec(representation.view());
                let hidden = pre.mapv(|v| v.max(0.0));
                (p.fc2.apply_vec(hidden.view()), Some(pre))
            }
        };
        Ok(Forward {
            representation: representation.clone(),
            embedding,
            tape: Tape {
                version: self.version,
                input,
                pre1,
                h1,
                pre2,
                h2,
                attention,
                pooled,
                representation,
                proj_pre,
            },
        })
    }

    /// Representation only, for scoring.
    pub fn represent(&self, f: &FeatureMatrix) -> Result<Array1<f64>> {
        Ok(self.forward(f)?.representation)
    }

    /// Adds `d(grad_z . z)/dparams` into `grads`.
    pub fn backward(&self, tape: &Tape, grad_z: ArrayView1<f64>, grads: &mut Model) -> Result<()> {
        if tape.version != self.version {
            return Err(Error::StaleTape);
        }
        if grad_z.len() != self.dims.embedding_dim() {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient has {} entries, embedding has {}",
                grad_z.len(),
                self.dims.embedding_dim()
            )));
        }
        let grad_y = match (&self.projector, &tape.proj_pre, grads.projector.as_mut()) {
            (Some(p), Some(pre), Some(gp)) => {
                let hidden = pre.mapv(|v| v.max(0.0));
                gp.fc2.w += &outer(hidden.view(), grad_z);
                gp.fc2.b += &grad_z;
                let mut g_pre = p.fc2.w.dot(&grad_z);
                g_pre.zip_mut_with(pre, |g, &x| {
                    if x <= 0.0 {
                        *g = 0.0
                    }
                });
                gp.fc1.w += &outer(tape.representation.view(), g_pre.view());
                gp.fc1.b += &g_pre;
                p.fc1.w.dot(&g_pre)
            }
            (None, None, None) => grad_z.to_owned(),
            _ => {
                return Err(Error::ShapeMismatch(
                    "gradient buffer layout differs".into(),
                ))
            }
        };

        let enc = &self.encoder;
        let genc = &mut grads.encoder;
        genc.head.w += &outer(tape.pooled.view(), grad_y.view());
        genc.head.b += &grad_y;
        let grad_pooled = enc.head.w.dot(&grad_y);

        let t = tape.h2.nrows();
        let mut grad_h2 = match (&enc.attention, &tape.attention, genc.attention.as_mut()) {
            (None, None, None) => {
                let row = &grad_pooled / t as f64;
                let width = row.len();
                row.insert_axis(Axis(0))
                    .broadcast((t, width))
                    .expect("broadcast")
                    .to_owned()
            }
            (Some(a), Some((act, weights)), Some(ga)) => {
                // pooled = sum_t w_t h_t, w = softmax(s), s_t = v . act_t
                let mut g = outer(weights.view(), grad_pooled.view());
                let grad_w = tape.h2.dot(&grad_pooled);
                let mean = weights.dot(&grad_w);
                let grad_s = weights * &(grad_w - mean);
                ga.v += &act.t().dot(&grad_s);
                let mut grad_act = outer(grad_s.view(), a.v.view());
                grad_act.zip_mut_with(act, |g, &x| *g *= 1.0 - x * x);
                ga.proj.w += &tape.h2.t().dot(&grad_act);
                ga.proj.b += &grad_act.sum_axis(Axis(0));
                g += &grad_act.dot(&a.proj.w.t());
                g
            }
            _ => {
                return Err(Error::ShapeMismatch(
                    "gradient buffer layout differs".into(),
                ))
            }
        };

        relu_mask(&mut grad_h2, &tape.pre2);
        genc.frame2.w += &tape.h1.t().dot(&grad_h2);
        genc.frame2.b += &grad_h2.sum_axis(Axis(0));
        let mut grad_h1 = grad_h2.dot(&enc.frame2.w.t());
        relu_mask(&mut grad_h1, &tape.pre1);
        genc.frame1.w += &tape.input.t().dot(&grad_h1);
        genc.frame1.b += &grad_h1.sum_axis(Axis(0));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(pooling: Pooling, projector: bool) -> ModelDims {
        ModelDims {
            input: 4,
            hidden: 5,
            attention: 3,
            representation: 4,
            projector,
            projector_hidden: 6,
            embedding: 3,
            pooling,
        }
    }

    fn features(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
        FeatureMatrix {
            values: Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal)),
            frame_shift: 0.01,
            normalized: true,
        }
    }

    #[test]
    fn zero_parameters_give_zero_embedding() {
        let m = Model::zeros(ModelDims::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = m.forward(&features(7, NUM_MELS, &mut rng)).unwrap();
        assert!(out.embedding.iter().all(|&v| v == 0.0));
        assert_eq!(out.embedding.len(), 128);
    }

    #[test]
    fn mean_pooling_of_repeated_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Model::init(tiny(Pooling::Mean, true), &mut rng);
        let one = features(1, 4, &mut rng);
        let many = FeatureMatrix {
            values: one.values.broadcast((9, 4)).unwrap().to_owned(),
            ..one.clone()
        };
        let a = m.forward(&one).unwrap().embedding;
        let b = m.forward(&many).unwrap().embedding;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn gradcheck(pooling: Pooling, projector: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Model::init(tiny(pooling, projector), &mut rng);
        // nonzero biases so ReLU kinks are unlikely to sit on the probe points
        for t in m.tensors_mut() {
            t.iter_mut().for_each(|v| *v += 0.05);
        }
        let f = features(3, 4, &mut rng);
        let dim = m.dims.embedding_dim();
        let gz = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
        let objective = |m: &Model| m.forward(&f).unwrap().embedding.dot(&gz);

        let out = m.forward(&f).unwrap();
        let mut grads = m.zeros_like();
        m.backward(&out.tape, gz.view(), &mut grads).unwrap();
        let analytic: Vec<Vec<f64>> = grads
            .tensors()
            .into_iter()
            .map(|(_, _, d)| d.to_vec())
            .collect();

        let h = 1e-6;
        for (ti, tensor) in analytic.iter().enumerate() {
            for (k, &a) in tensor.iter().enumerate() {
                let orig = m.tensors()[ti].2[k];
                m.tensors_mut()[ti][k] = orig + h;
                let up = objective(&m);
                m.tensors_mut()[ti][k] = orig - h;
                let down = objective(&m);
                m.tensors_mut()[ti][k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    err < 1e-5,
                    "tensor {ti}[{k}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        gradcheck(Pooling::Mean, true);
        gradcheck(Pooling::Mean, false);
        gradcheck(Pooling::Attentive, true);
        gradcheck(Pooling::Attentive, false);
    }

    #[test]
    fn zero_upstream_gradient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Model::init(tiny(Pooling::Attentive, true), &mut rng);
        let out = m.forward(&features(5, 4, &mut rng)).unwrap();
        let mut g = m.zeros_like();
        m.backward(&out.tape, Array1::zeros(3).view(), &mut g)
            .unwrap();
        assert!(g
            .tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = Model::init(tiny(Pooling::Mean, false), &mut rng);
        let out = m.forward(&features(2, 4, &mut rng)).unwrap();
        m.touch();
        let mut g = m.zeros_like();
        assert!(matches!(
            m.backward(&out.tape, Array1::zeros(4).view(), &mut g),
            Err(Error::StaleTape)
        ));
    }

    #[test]
    fn tensor_order_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = Model::init(tiny(Pooling::Attentive, true), &mut rng);
        let names: Vec<String> = m.tensors().into_iter().map(|t| t.0).collect();
        assert_eq!(names.first().unwrap(), "encoder.frame1.w");
        assert_eq!(names.last().unwrap(), "encoder.attention.v");
        let sizes: Vec<usize> = m.tensors().iter().map(|t| t.2.len()).collect();
        let mut_sizes: Vec<usize> = m.tensors_mut().iter().map(|t| t.len()).collect();
        assert_eq!(sizes, mut_sizes);
        assert!(m.forward(&features(1, 3, &mut rng)).is_err());
    }
}
