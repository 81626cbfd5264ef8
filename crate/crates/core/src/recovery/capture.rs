use std::collections::BTreeMap;

use crate::data::{blocks, sample_fraction, Corpus, PAD};
use crate::model::{forward_graph, WeightStore};
use crate::tensor::{Tape, Tensor};

use super::{RecoveryError, Result};

const CAPTURE_BATCH: usize = 16;

/// Normalised MLP inputs of the unmodified base model, per tapped layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub q: f64,
    pub sequences: usize,
    /// `[rows × d_model]` per layer.
    pub rows: BTreeMap<usize, Tensor>,
}

impl ActivationCache {
    pub fn get(&self, layer: usize) -> Result<&Tensor> {
        let t = self.rows.get(&layer).ok_or(RecoveryError::MissingCache(layer))?;
        if t.numel() == 0 {
            return Err(RecoveryError::EmptyCache(layer));
        }
        Ok(t)
    }

    pub fn row_count(&self) -> usize {
        self.rows.values().next().map_or(0, |t| t.shape()[0])
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.sequences == other.sequences
            && self.rows.len() == other.rows.len()
            && self
                .rows
                .iter()
                .zip(&other.rows)
                .all(|((la, a), (lb, b))| la == lb && a.bit_eq(b))
    }
}

/// Run the base model over a seeded fraction `q` of the training sequences
/// and keep every real (non-pad) position's MLP input for each layer in
/// `layers`, all in one pass.
pub fn capture_activations(
    base: &WeightStore,
    layers: &[usize],
    corpus: &Corpus,
    q: f64,
    seed: u64,
) -> Result<ActivationCache> {
    if corpus.is_empty() {
        return Err(RecoveryError::Config("empty corpus".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(RecoveryError::Config(format!("capture fraction {q} outside (0, 1]")));
    }
    let sample = sample_fraction(corpus, q, seed)?;
    let seq = base.config.max_seq_len;
    let all = blocks(&sample.stream(), seq);
    let d = base.config.d_model;
    let mut data: BTreeMap<usize, Vec<f32>> = layers.iter().map(|&l| (l, Vec::new())).collect();
    for chunk in all.chunks(CAPTURE_BATCH) {
        let ids: Vec<usize> = chunk.iter().flat_map(|b| b.inputs.iter().copied()).collect();
        let mut tape = Tape::new();
        let gw = base.bind(&mut tape, false);
        let (_, taps) = forward_graph(&mut tape, &gw, &ids, chunk.len(), seq, layers)?;
        for tap in taps {
            let x = tape.value(tap.input).data();
            let out = data.get_mut(&tap.layer).expect("tapped layers were requested");
            for (p, &id) in ids.iter().enumerate() {
                if id != PAD as usize {
                    out.extend_from_slice(&x[p * d..(p + 1) * d]);
                }
            }
        }
    }
    let rows = data
        .into_iter()
        .map(|(l, v)| {
            let n = v.len() / d;
            Ok((l, Tensor::new(vec![n, d], v)?))
        })
        .collect::<Result<_>>()?;
    Ok(ActivationCache {
        q,
        sequences: sample.len(),
        rows,
    })
}
