//! Experiment configuration: one JSON document, unknown keys rejected,
//! every section validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{hash_bytes, hex};
use crate::data::{AugmentPolicy, CorpusParams, DEFAULT_CROP_SECS};
use crate::error::{Error, Result};
use crate::eval::{DcfParams, DEFAULT_EVAL_FRAMES, DEFAULT_EVAL_FRAME_SECS};
use crate::model::ModelDims;
use crate::optim::AdamConfig;
use crate::seed;
use crate::train::{LossSettings, TrainOptions};

const SEED_TRAIN_CORPUS: u64 = 0;
const SEED_TEST_CORPUS: u64 = 1;
const SEED_TRAINING: u64 = 2;
const SEED_TEST_NOISE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSettings {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub utterance_secs: f64,
}

impl CorpusSettings {
    fn params(&self, seed: u64) -> CorpusParams {
        CorpusParams {
            speakers: self.speakers,
            utterances_per_speaker: self.utterances_per_speaker,
            utterance_secs: self.utterance_secs,
            seed,
        }
    }
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            speakers: 32,
            utterances_per_speaker: 4,
            utterance_secs: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub num_frames: usize,
    pub frame_secs: f64,
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let dcf = DcfParams::default();
        Self {
            num_frames: DEFAULT_EVAL_FRAMES,
            frame_secs: DEFAULT_EVAL_FRAME_SECS,
            p_target: dcf.p_target,
            c_miss: dcf.c_miss,
            c_fa: dcf.c_fa,
        }
    }
}

impl EvalSettings {
    pub fn dcf(&self) -> DcfParams {
        DcfParams {
            p_target: self.p_target,
            c_miss: self.c_miss,
            c_fa: self.c_fa,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 {
            return Err(Error::Config("eval.num_frames must be >= 1".into()));
        }
        if !(self.frame_secs > 0.0 && self.frame_secs.is_finite()) {
            return Err(Error::Config(format!(
                "eval.frame_secs must be positive, got {}",
                self.frame_secs
            )));
        }
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config(format!(
                "eval.p_target must be in (0, 1), got {}",
                self.p_target
            )));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::Config("eval costs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Base seed; corpus, held-out corpus and training seeds derive from it.
    pub seed: u64,
    /// Training speakers.
    pub corpus: CorpusSettings,
    /// Held-out evaluation speakers.
    pub test_corpus: CorpusSettings,
    pub augment: AugmentPolicy,
    pub loss: LossSettings,
    pub model: ModelDims,
    pub optimizer: AdamConfig,
    pub epochs: u64,
    pub batch_size: usize,
    pub crop_secs: f64,
    pub noise_clips_per_class: usize,
    pub eval: EvalSettings,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainOptions::default();
        Self {
            seed: 0,
            corpus: CorpusSettings::default(),
            test_corpus: CorpusSettings {
                speakers: 8,
                utterances_per_speaker: 6,
                utterance_secs: 5.0,
            },
            augment: AugmentPolicy::default(),
            loss: LossSettings::default(),
            model: ModelDims::default(),
            optimizer: AdamConfig::default(),
            epochs: train.epochs,
            batch_size: train.batch_size,
            crop_secs: DEFAULT_CROP_SECS,
            noise_clips_per_class: train.noise_clips_per_class,
            eval: EvalSettings::default(),
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The file at `path` if given, defaults otherwise; then `MC_SEED`.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed::seed_override()? {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form, with the data and output
    /// directories left out.
    pub fn content_hash(&self) -> String {
        let unplaced = Self {
            data_dir: PathBuf::new(),
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        hex(&hash_bytes(unplaced.to_json().as_bytes()))
    }

    pub fn train_corpus(&self) -> CorpusParams {
        self.corpus
            .params(seed::derive_seed(self.seed, &[SEED_TRAIN_CORPUS]))
    }

    pub fn test_corpus(&self) -> CorpusParams {
        self.test_corpus
            .params(seed::derive_seed(self.seed, &[SEED_TEST_CORPUS]))
    }

    /// Seed for corrupting held-out audio in noisy-condition trials.
    pub fn test_noise_seed(&self) -> u64 {
        seed::derive_seed(self.seed, &[SEED_TEST_NOISE])
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            crop_secs: self.crop_secs,
            seed: seed::derive_seed(self.seed, &[SEED_TRAINING]),
            loss: self.loss,
            model: self.model,
            optimizer: self.optimizer,
            augment: self.augment.clone(),
            noise_clips_per_class: self.noise_clips_per_class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_corpus().validate(self.crop_secs)?;
        self.test_corpus().validate(0.0)?;
        if self.test_corpus.utterance_secs < self.eval.frame_secs {
            return Err(Error::Config(format!(
                "held-out utterances ({} s) are shorter than eval.frame_secs ({} s)",
                self.test_corpus.utterance_secs, self.eval.frame_secs
            )));
        }
        self.train_options().validate()?;
        self.eval.validate()
    }
}
