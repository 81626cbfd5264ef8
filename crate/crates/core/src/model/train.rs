use serde::{Deserialize, Serialize};

use crate::data::{batches, Batch, Corpus};
use crate::tensor::{clip_grad_norm, AdamConfig, AdamState, Tape, Tensor};

use super::graph::forward_graph;
use super::{ModelError, Result, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `0` disables it.
    pub clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            seq_len: 64,
            lr: 3e-3,
            warmup_steps: 20,
            seed: 0,
            clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
}

impl TrainTrace {
    /// Mean of the first and last `k` recorded losses.
    pub fn head_tail_mean(&self, k: usize) -> Option<(f64, f64)> {
        if self.losses.is_empty() {
            return None;
        }
        let k = k.clamp(1, self.losses.len());
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..k]), mean(&self.losses[self.losses.len() - k..])))
    }
}

pub(crate) fn warmup_lr(base: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}

/// Masked next-token loss of the full model with every tensor trainable.
fn step_loss(ws: &WeightStore, b: &Batch) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let gw = ws.bind(&mut tape, true);
    let (logits, _) = forward_graph(&mut tape, &gw, &b.inputs, b.batch, b.seq, &[])?;
    let loss = tape.cross_entropy_masked(logits, &b.targets, Some(&b.mask))?;
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    let vars = gw.vars();
    let params: Vec<&Tensor> = ws.named_tensors().into_iter().map(|(_, t)| t).collect();
    let g = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get_or_zeros(*v, p))
        .collect();
    Ok((value, g))
}

/// Train all weights with Adam on the next-token objective.
pub fn pretrain(ws: &mut WeightStore, corpus: &Corpus, cfg: &PretrainConfig) -> Result<TrainTrace> {
    if cfg.seq_len > ws.config.max_seq_len || cfg.seq_len == 0 {
        return Err(ModelError::SequenceTooLong {
            len: cfg.seq_len,
            max: ws.config.max_seq_len,
        });
    }
    if corpus.token_count() < 2 {
        return Err(ModelError::EmptyStream);
    }
    let params: Vec<Tensor> = ws.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &params);
    drop(params);
    let mut trace = TrainTrace::default();
    let mut epoch = 0u64;
    let mut queue: Vec<Batch> = Vec::new();
    for step in 0..cfg.steps {
        if queue.is_empty() {
            queue = batches(corpus, cfg.batch_size, cfg.seq_len, cfg.seed, epoch);
            queue.reverse();
            epoch += 1;
        }
        let b = queue.pop().expect("refilled above");
        let (loss, mut grads) = step_loss(ws, &b)?;
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss(step));
        }
        trace.losses.push(loss);
        if cfg.clip > 0.0 {
            clip_grad_norm(&mut grads, cfg.clip);
        }
        let lr = warmup_lr(cfg.lr, cfg.warmup_steps, step);
        let mut owned: Vec<Tensor> = ws
            .tensors_mut()
            .into_iter()
            .map(|t| std::mem::replace(t, Tensor::scalar(0.0)))
            .collect();
        adam.step_with_lr(&mut owned, &grads, lr)?;
        for (dst, src) in ws.tensors_mut().into_iter().zip(owned) {
            *dst = src;
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn warmup_is_linear() {
        assert_eq!(warmup_lr(1.0, 4, 0), 0.25);
        assert_eq!(warmup_lr(1.0, 4, 3), 1.0);
        assert_eq!(warmup_lr(1.0, 4, 10), 1.0);
        assert_eq!(warmup_lr(2.0, 0, 0), 2.0);
    }

    #[test]
    fn loss_goes_down_on_repetitive_text() {
        let cfg = ModelConfig {
            n_layers: 4,
            d_model: 16,
            d_hidden: 24,
            n_heads: 2,
            vocab_size: 257,
            max_seq_len: 16,
            seed: 1,
        };
        let mut ws = init_model(&cfg).unwrap();
        let text = "abcabcabcabc abcabc\n\n".repeat(40);
        let corpus = Corpus::from_bytes(text.as_bytes(), "mem").unwrap();
        let pc = PretrainConfig {
            steps: 60,
            batch_size: 8,
            seq_len: 16,
            lr: 1e-2,
            warmup_steps: 5,
            seed: 2,
            clip: 1.0,
        };
        let trace = pretrain(&mut ws, &corpus, &pc).unwrap();
        let (first, last) = trace.head_tail_mean(5).unwrap();
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert!(ws.is_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ModelConfig {
            n_layers: 4,
            d_model: 8,
            d_hidden: 12,
            n_heads: 2,
            vocab_size: 257,
            max_seq_len: 8,
            seed: 4,
        };
        let corpus = Corpus::from_bytes("hello world\n\nagain and again\n\n".repeat(5).as_bytes(), "m").unwrap();
        let pc = PretrainConfig {
            steps: 5,
            batch_size: 4,
            seq_len: 8,
            ..PretrainConfig::default()
        };
        let mut a = init_model(&cfg).unwrap();
        let mut b = init_model(&cfg).unwrap();
        let ta = pretrain(&mut a, &corpus, &pc).unwrap();
        let tb = pretrain(&mut b, &corpus, &pc).unwrap();
        assert_eq!(ta, tb);
        assert!(a.bit_eq(&b));
    }
}
