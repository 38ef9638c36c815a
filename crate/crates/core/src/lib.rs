//! Self-supervised speaker embeddings trained with symmetric contrastive
//! losses and additive (angular) margins, plus the feature pipeline and the
//! verification metrics used to evaluate them.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod losscheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
