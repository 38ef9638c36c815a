//! Contrastive training loop: view sampling, augmentation, featurization,
//! forward/backward through both views, Adam, and checkpointing.
//!
//! Every random decision is drawn from a stream derived from the run seed
//! and its position (epoch, step, item), so a batch is a pure function of
//! `(seed, epoch, step)`. That is what makes resume and the pipelined mode
//! bit-identical to the single-threaded reference loop.

use std::fmt::Write as _;
use std::sync::mpsc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{hash_bytes, Checkpoint, NamedTensor};
use crate::data::{
    sample_view_pair, AugmentPolicy, Augmenter, NoiseBank, TrainingSet, DEFAULT_CROP_SECS,
};
use crate::dsp::{FeatureMatrix, LogMelExtractor};
use crate::error::{Error, Result};
use crate::losses::{
    loss_with_margin, EmbeddingBatch, LossConfig, LossVariant, MarginSchedule, ScheduleKind,
    DEFAULT_TAU,
};
use crate::model::{Model, ModelDims};
use crate::optim::{AdamConfig, AdamState};
use crate::seed;

pub const LEARNABLE_MARGIN_INIT: f64 = 0.1;
pub const LEARNABLE_MARGIN_MAX: f64 = 0.5;
pub const METRICS_HEADER: &str = "epoch,step,loss,mean_pos_cos,mean_neg_cos,grad_maxnorm,margin";

const STREAM_INIT: u64 = 20;
const STREAM_EPOCH: u64 = 21;
const STREAM_ITEM: u64 = 22;
const STREAM_NOISE: u64 = 23;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSettings {
    pub variant: LossVariant,
    pub tau: f64,
    pub margin: f64,
    pub schedule: ScheduleKind,
    /// Treat the margin as a trained scalar instead of following the schedule.
    pub learnable_margin: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            variant: LossVariant::SntXent,
            tau: DEFAULT_TAU,
            margin: 0.0,
            schedule: ScheduleKind::CosineRamp,
            learnable_margin: false,
        }
    }
}

impl LossSettings {
    pub fn config(&self, total_steps: u64) -> LossConfig {
        let schedule = match self.schedule {
            ScheduleKind::Constant => MarginSchedule::constant(self.margin),
            ScheduleKind::CosineRamp => {
                MarginSchedule::cosine_ramp(self.margin, total_steps.max(1))
            }
        };
        LossConfig {
            variant: self.variant,
            tau: self.tau,
            schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: u64,
    pub batch_size: usize,
    pub crop_secs: f64,
    pub seed: u64,
    pub loss: LossSettings,
    pub model: ModelDims,
    pub optimizer: AdamConfig,
    pub augment: AugmentPolicy,
    pub noise_clips_per_class: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            crop_secs: DEFAULT_CROP_SECS,
            seed: 0,
            loss: LossSettings::default(),
            model: ModelDims::default(),
            optimizer: AdamConfig::default(),
            augment: AugmentPolicy::default(),
            noise_clips_per_class: 4,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.crop_secs > 0.0 && self.crop_secs.is_finite()) {
            return Err(Error::Config(format!(
                "crop_secs must be positive, got {}",
                self.crop_secs
            )));
        }
        if self.noise_clips_per_class == 0 {
            return Err(Error::Config("noise_clips_per_class must be >= 1".into()));
        }
        self.loss.config(1).validate()?;
        if self.loss.learnable_margin && !self.loss.variant.uses_margin() {
            return Err(Error::Config(format!(
                "learnable margin needs a margin loss, not {}",
                self.loss.variant
            )));
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        hash_bytes(&serde_json::to_vec(self).expect("options serialize"))
    }
}

/// Featurized views of one batch, in item order.
#[derive(Debug, Clone)]
pub struct Batch {
    pub epoch: u64,
    pub step: u64,
    pub views_a: Vec<FeatureMatrix>,
    pub views_b: Vec<FeatureMatrix>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    pub mean_pos_cos: f64,
    pub mean_neg_cos: f64,
    pub grad_max_norm: f64,
    pub margin: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.loss,
            self.mean_pos_cos,
            self.mean_neg_cos,
            self.grad_max_norm,
            self.margin
        )
    }
}

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Builds the batches of an epoch; shared by the reference and pipelined loops.
struct BatchMaker<'a> {
    data: &'a TrainingSet,
    opts: &'a TrainOptions,
    augmenter: Option<&'a Augmenter>,
    extractor: &'a LogMelExtractor,
}

impl BatchMaker<'_> {
    fn order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut seed::stream(self.opts.seed, &[STREAM_EPOCH, epoch]));
        order
    }

    fn make(&self, epoch: u64, step: u64, items: &[usize]) -> Result<Batch> {
        let mut views_a = Vec::with_capacity(items.len());
        let mut views_b = Vec::with_capacity(items.len());
        for (k, &i) in items.iter().enumerate() {
            let mut rng = seed::stream(self.opts.seed, &[STREAM_ITEM, epoch, step, k as u64]);
            let mut pair = sample_view_pair(
                self.data.audio(i),
                self.data.id(i),
                self.opts.crop_secs,
                &mut rng,
            )?;
            if let Some(aug) = self.augmenter {
                pair = aug.augment(pair, &mut rng)?;
            }
            views_a.push(self.extractor.features(&pair.view_a)?);
            views_b.push(self.extractor.features(&pair.view_b)?);
        }
        Ok(Batch {
            epoch,
            step,
            views_a,
            views_b,
        })
    }
}

pub struct Trainer {
    pub opts: TrainOptions,
    pub model: Model,
    /// Present when the margin is learned.
    pub margin: Option<f64>,
    adam: AdamState,
    /// Completed epochs.
    epoch: u64,
    global_step: u64,
    steps_per_epoch: u64,
    loss_cfg: LossConfig,
    augmenter: Option<Augmenter>,
    extractor: LogMelExtractor,
    pipelined: bool,
    skipped_steps: u64,
}

impl Trainer {
    /// Fresh run over `data`; the model is initialized from the run seed.
    pub fn new(opts: TrainOptions, data: &TrainingSet) -> Result<Self> {
        opts.validate()?;
        if data.len() < opts.batch_size {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} utterances, fewer than the batch size {}",
                data.len(),
                opts.batch_size
            )));
        }
        let sample_rate = data.audio(0).sample_rate();
        let model = Model::init(opts.model, &mut seed::stream(opts.seed, &[STREAM_INIT]));
        let margin = opts.loss.learnable_margin.then_some(LEARNABLE_MARGIN_INIT);
        let steps_per_epoch = (data.len() / opts.batch_size) as u64;
        let augmenter = if opts.augment.enabled {
            let bank = NoiseBank::generate(
                opts.noise_clips_per_class,
                sample_rate,
                seed::derive_seed(opts.seed, &[STREAM_NOISE]),
            )?;
            Some(Augmenter::new(opts.augment.clone(), bank)?)
        } else {
            None
        };
        let mut sizes: Vec<usize> = model.tensors().iter().map(|t| t.2.len()).collect();
        if margin.is_some() {
            sizes.push(1);
        }
        Ok(Self {
            loss_cfg: opts.loss.config(opts.epochs * steps_per_epoch),
            opts,
            model,
            margin,
            adam: AdamState::new(sizes),
            epoch: 0,
            global_step: 0,
            steps_per_epoch,
            augmenter,
            extractor: LogMelExtractor::new(sample_rate),
            pipelined: false,
            skipped_steps: 0,
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`] under the same options.
    pub fn resume(opts: TrainOptions, data: &TrainingSet, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(opts, data)?;
        if ckpt.config_hash != t.opts.hash() {
            return Err(Error::Config(
                "checkpoint was written under different options".into(),
            ));
        }
        if ckpt.integer("seed")? != t.opts.seed {
            return Err(Error::Config(
                "checkpoint seed differs from the configured seed".into(),
            ));
        }
        let names: Vec<String> = t.model.tensors().into_iter().map(|x| x.0).collect();
        for (i, (name, slot)) in names.iter().zip(t.model.tensors_mut()).enumerate() {
            copy_into(ckpt.require(name)?, slot)?;
            copy_into(ckpt.require(&format!("adam.m.{name}"))?, &mut t.adam.m[i])?;
            copy_into(ckpt.require(&format!("adam.v.{name}"))?, &mut t.adam.v[i])?;
        }
        if let Some(m) = t.margin.as_mut() {
            *m = ckpt.scalar("margin")?;
            let i = names.len();
            copy_into(ckpt.require("adam.m.margin")?, &mut t.adam.m[i])?;
            copy_into(ckpt.require("adam.v.margin")?, &mut t.adam.v[i])?;
        }
        t.adam.step = ckpt.integer("adam.step")?;
        t.epoch = ckpt.integer("epoch")?;
        t.global_step = ckpt.integer("global_step")?;
        t.skipped_steps = ckpt.integer("skipped_steps")?;
        if t.epoch > t.opts.epochs || t.global_step != t.epoch * t.steps_per_epoch {
            return Err(Error::Config(
                "checkpoint position does not match this dataset".into(),
            ));
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (i, (name, dims, data)) in self.model.tensors().into_iter().enumerate() {
            tensors.push(NamedTensor::new(
                format!("adam.m.{name}"),
                dims.clone(),
                self.adam.m[i].clone(),
            ));
            tensors.push(NamedTensor::new(
                format!("adam.v.{name}"),
                dims.clone(),
                self.adam.v[i].clone(),
            ));
            tensors.push(NamedTensor::new(name, dims, data.to_vec()));
        }
        if let Some(m) = self.margin {
            let i = self.adam.m.len() - 1;
            tensors.push(NamedTensor::scalar("margin", m));
            tensors.push(NamedTensor::new(
                "adam.m.margin",
                vec![1],
                self.adam.m[i].clone(),
            ));
            tensors.push(NamedTensor::new(
                "adam.v.margin",
                vec![1],
                self.adam.v[i].clone(),
            ));
        }
        tensors.push(NamedTensor::integer("adam.step", self.adam.step));
        tensors.push(NamedTensor::integer("epoch", self.epoch));
        tensors.push(NamedTensor::integer("global_step", self.global_step));
        tensors.push(NamedTensor::integer("skipped_steps", self.skipped_steps));
        tensors.push(NamedTensor::integer("seed", self.opts.seed));
        Checkpoint {
            config_hash: self.opts.hash(),
            tensors,
        }
    }

    /// Prepare batches on a worker thread while the optimizer runs.
    pub fn set_pipelined(&mut self, on: bool) {
        self.pipelined = on;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.opts.epochs
    }

    /// Steps whose loss or gradients were not finite and were not applied.
    pub fn skipped_steps(&self) -> u64 {
        self.skipped_steps
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss_cfg
    }

    pub fn extractor(&self) -> &LogMelExtractor {
        &self.extractor
    }

    fn current_margin(&self) -> f64 {
        match self.margin {
            Some(m) => m,
            None if self.loss_cfg.variant.uses_margin() => {
                self.loss_cfg.schedule.margin_at(self.global_step)
            }
            None => 0.0,
        }
    }

    /// One pass over the data in a seed-determined order; returns per-step metrics.
    pub fn run_epoch(&mut self, data: &TrainingSet) -> Result<Vec<StepMetrics>> {
        if data.len() / self.opts.batch_size != self.steps_per_epoch as usize {
            return Err(Error::InvalidArgument(
                "training set changed size between epochs".into(),
            ));
        }
        let epoch = self.epoch;
        let n = self.opts.batch_size;
        let augmenter = self.augmenter.take();
        let maker = BatchMaker {
            data,
            opts: &self.opts.clone(),
            augmenter: augmenter.as_ref(),
            extractor: &self.extractor.clone(),
        };
        let order = maker.order(epoch);
        let chunks: Vec<&[usize]> = order.chunks_exact(n).collect();
        let result = if self.pipelined {
            std::thread::scope(|scope| {
                let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(2);
                let maker = &maker;
                let chunks = &chunks;
                scope.spawn(move || {
                    for (s, items) in chunks.iter().enumerate() {
                        if tx.send(maker.make(epoch, s as u64, items)).is_err() {
                            break;
                        }
                    }
                });
                let mut rows = Vec::with_capacity(chunks.len());
                for batch in rx {
                    rows.push(self.apply(batch?)?);
                }
                Ok(rows)
            })
        } else {
            chunks
                .iter()
                .enumerate()
                .map(|(s, items)| self.apply(maker.make(epoch, s as u64, items)?))
                .collect::<Result<Vec<_>>>()
        };
        self.augmenter = augmenter;
        let rows = result?;
        self.epoch += 1;
        Ok(rows)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, data: &TrainingSet) -> Result<Vec<StepMetrics>> {
        let mut rows = Vec::new();
        while !self.is_finished() {
            rows.extend(self.run_epoch(data)?);
        }
        Ok(rows)
    }

    /// Forward, loss, backward and one Adam update for a prepared batch.
    pub fn apply(&mut self, batch: Batch) -> Result<StepMetrics> {
        let dim = self.model.dims.embedding_dim();
        let n = batch.views_a.len();
        let forward = |views: &[FeatureMatrix]| -> Result<(Array2<f64>, Vec<_>)> {
            let mut z = Array2::zeros((n, dim));
            let mut tapes = Vec::with_capacity(n);
            for (k, f) in views.iter().enumerate() {
                let out = self.model.forward(f)?;
                z.row_mut(k).assign(&out.embedding);
                tapes.push(out.tape);
            }
            Ok((z, tapes))
        };
        let (z, tapes_a) = forward(&batch.views_a)?;
        let (zp, tapes_b) = forward(&batch.views_b)?;

        let margin = self.current_margin();
        let out = loss_with_margin(
            &EmbeddingBatch::new(z)?,
            &EmbeddingBatch::new(zp)?,
            self.loss_cfg.variant,
            self.loss_cfg.tau,
            margin,
        )?;
        let mut grads = self.model.zeros_like();
        for (k, tape) in tapes_a.iter().enumerate() {
            self.model.backward(tape, out.grad_z.row(k), &mut grads)?;
        }
        for (k, tape) in tapes_b.iter().enumerate() {
            self.model.backward(tape, out.grad_zp.row(k), &mut grads)?;
        }

        let metrics = StepMetrics {
            epoch: batch.epoch,
            step: self.global_step,
            loss: out.loss,
            mean_pos_cos: out.diagnostics.mean_pos_cos,
            mean_neg_cos: out.diagnostics.mean_neg_cos,
            grad_max_norm: out.diagnostics.grad_max_norm,
            margin,
        };
        self.global_step += 1;
        if !out.loss.is_finite() || !grads.is_finite() || !out.grad_margin.is_finite() {
            self.skipped_steps += 1;
            return Ok(metrics);
        }

        let lr = self.opts.optimizer.lr_at_epoch(batch.epoch);
        let mut grad_slices: Vec<Vec<f64>> =
            grads.tensors().into_iter().map(|t| t.2.to_vec()).collect();
        let mut margin_slot = self.margin.map(|m| [m]);
        if margin_slot.is_some() {
            grad_slices.push(vec![out.grad_margin]);
        }
        let grad_refs: Vec<&[f64]> = grad_slices.iter().map(Vec::as_slice).collect();
        let mut params = self.model.tensors_mut();
        if let Some(slot) = margin_slot.as_mut() {
            params.push(slot.as_mut_slice());
        }
        self.adam
            .update(&self.opts.optimizer, lr, &mut params, &grad_refs)?;
        if let Some([m]) = margin_slot {
            self.margin = Some(m.clamp(0.0, LEARNABLE_MARGIN_MAX));
        }
        Ok(metrics)
    }
}

/// Rebuilds the network stored in a training checkpoint.
pub fn model_from_checkpoint(dims: ModelDims, ckpt: &Checkpoint) -> Result<Model> {
    dims.validate()?;
    let mut model = Model::zeros(dims);
    let names: Vec<String> = model.tensors().into_iter().map(|x| x.0).collect();
    for (name, slot) in names.iter().zip(model.tensors_mut()) {
        copy_into(ckpt.require(name)?, slot)?;
    }
    if !model.is_finite() {
        return Err(Error::Format {
            what: "checkpoint",
            reason: "parameters are not finite".into(),
        });
    }
    Ok(model)
}

fn copy_into(t: &NamedTensor, dst: &mut [f64]) -> Result<()> {
    if t.data.len() != dst.len() {
        return Err(Error::Format {
            what: "checkpoint",
            reason: format!(
                "`{}` has {} values, expected {}",
                t.name,
                t.data.len(),
                dst.len()
            ),
        });
    }
    dst.copy_from_slice(&t.data);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_corpus, CorpusParams};

    fn small_opts() -> TrainOptions {
        TrainOptions {
            epochs: 2,
            batch_size: 4,
            crop_secs: 0.5,
            seed: 11,
            model: ModelDims {
                hidden: 8,
                representation: 8,
                projector_hidden: 8,
                embedding: 6,
                ..ModelDims::default()
            },
            noise_clips_per_class: 1,
            ..TrainOptions::default()
        }
    }

    fn small_data(utts: usize) -> TrainingSet {
        synthesize_corpus(&CorpusParams {
            speakers: utts / 2,
            utterances_per_speaker: 2,
            utterance_secs: 1.2,
            seed: 3,
        })
        .unwrap()
        .unlabeled()
    }

    #[test]
    fn steps_per_epoch_drop_the_remainder() {
        let data = small_data(10);
        let mut t = Trainer::new(small_opts(), &data).unwrap();
        assert_eq!(t.steps_per_epoch(), 2);
        let rows = t.run_epoch(&data).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(t.global_step(), 2);
        assert!(rows.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn batch_larger_than_data_is_an_error() {
        let data = small_data(4);
        let opts = TrainOptions {
            batch_size: 6,
            ..small_opts()
        };
        assert!(Trainer::new(opts, &data).is_err());
        let opts = TrainOptions {
            batch_size: 1,
            ..small_opts()
        };
        assert!(matches!(opts.validate(), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn pipelined_matches_reference() {
        let data = small_data(8);
        let mut a = Trainer::new(small_opts(), &data).unwrap();
        let mut b = Trainer::new(small_opts(), &data).unwrap();
        b.set_pipelined(true);
        let ra = a.run(&data).unwrap();
        let rb = b.run(&data).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn learnable_margin_stays_clipped() {
        let data = small_data(8);
        let mut opts = small_opts();
        opts.loss.variant = LossVariant::SntXentAm;
        opts.loss.learnable_margin = true;
        let mut t = Trainer::new(opts, &data).unwrap();
        let rows = t.run(&data).unwrap();
        assert_eq!(rows[0].margin, LEARNABLE_MARGIN_INIT);
        let m = t.margin.unwrap();
        assert!((0.0..=LEARNABLE_MARGIN_MAX).contains(&m));
        assert_ne!(m, LEARNABLE_MARGIN_INIT);
        let back = Checkpoint::from_bytes(&t.checkpoint().to_bytes()).unwrap();
        assert_eq!(back.scalar("margin").unwrap(), m);
        assert_eq!(model_from_checkpoint(t.opts.model, &back).unwrap(), t.model);
        let other = ModelDims {
            hidden: 9,
            ..t.opts.model
        };
        assert!(model_from_checkpoint(other, &back).is_err());
    }

    #[test]
    fn learnable_margin_requires_margin_loss() {
        let mut opts = small_opts();
        opts.loss.learnable_margin = true;
        assert!(opts.validate().is_err());
    }

    #[test]
    fn metrics_header() {
        let csv = metrics_csv(&[]);
        assert_eq!(
            csv,
            "epoch,step,loss,mean_pos_cos,mean_neg_cos,grad_maxnorm,margin\n"
        );
    }
}
