//! Two-stage recovery: per-layer warmup regression, then end-to-end
//! fine-tuning of the recovery factors against a frozen base.

mod capture;
mod sft;
mod slw;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataError;
use crate::model::ModelError;
use crate::sharing::SharingError;
use crate::tensor::{Tensor, TensorError};

pub use capture::{capture_activations, ActivationCache};
pub use sft::{sft, SftReport};
pub use slw::{block_mse, slw_all, slw_fit, SlwFit, SlwSummary};

#[derive(Debug, thiserror::Error)]
pub enum RecoveryError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no cached activations for layer {0}")]
    MissingCache(usize),
    #[error("cached activations for layer {0} are empty")]
    EmptyCache(usize),
    #[error("loss became non-finite at step {step} (layer {layer:?})")]
    Diverged { layer: Option<usize>, step: usize },
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<RecoveryError>,
    },
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, RecoveryError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlwConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of training sequences whose activations are captured.
    pub q: f64,
}

impl Default for SlwConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 5,
            batch_size: 256,
            seed: 0,
            q: 0.10,
        }
    }
}

impl SlwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 || !(self.q > 0.0 && self.q <= 1.0) {
            return Err(RecoveryError::Config(format!(
                "slw needs lr > 0, epochs >= 1, batch_size >= 1, 0 < q <= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub lr: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Attach `G0` adapters to every non-target layer and train them too.
    pub full_lora: bool,
    /// Rank of those adapters.
    pub adapter_rank: usize,
    /// Stop after this many optimiser steps, if set.
    pub max_steps: Option<usize>,
    /// Global gradient-norm clip; `0` disables it.
    pub clip: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            warmup_fraction: 0.05,
            epochs: 1,
            batch_size: 16,
            seq_len: 64,
            seed: 0,
            full_lora: false,
            adapter_rank: 8,
            max_steps: None,
            clip: 1.0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.warmup_fraction)
            || self.batch_size == 0
            || self.seq_len == 0
            || (self.full_lora && self.adapter_rank == 0)
        {
            return Err(RecoveryError::Config(format!(
                "sft needs lr > 0, warmup in [0, 1), positive batch and sequence sizes; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Write `(step, loss)` rows.
pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let io = |e: &dyn std::fmt::Display| RecoveryError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    w.write_record(["step", "loss"]).map_err(|e| io(&e))?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:e}")]).map_err(|e| io(&e))?;
    }
    w.flush().map_err(|e| io(&e))?;
    Ok(())
}

pub(crate) fn swap_out(ts: Vec<&mut Tensor>) -> Vec<Tensor> {
    ts.into_iter()
        .map(|t| std::mem::replace(t, Tensor::scalar(0.0)))
        .collect()
}

pub(crate) fn swap_in(ts: Vec<&mut Tensor>, values: Vec<Tensor>) {
    for (dst, src) in ts.into_iter().zip(values) {
        *dst = src;
    }
}

