use serde::{Deserialize, Serialize};

use crate::data::{batches, Batch, Corpus};
use crate::derive_seed;
use crate::model::{forward_graph, warmup_lr, WeightStore};
use crate::sharing::{materialize_view, RecoveryParams};
use crate::tensor::{clip_grad_norm, AdamConfig, AdamState, Tape, Tensor};

use super::{swap_in, swap_out, RecoveryError, Result, SftConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub steps: usize,
    pub warmup_steps: usize,
    pub losses: Vec<f64>,
}

fn step_grads(base: &WeightStore, rec: &RecoveryParams, b: &Batch) -> Result<(f64, Vec<Tensor>)> {
    let view = materialize_view(base, rec)?;
    let mut tape = Tape::new();
    let (gw, vars) = view.bind(&mut tape, true)?;
    let (logits, _) = forward_graph(&mut tape, &gw, &b.inputs, b.batch, b.seq, &[])?;
    let loss = tape.cross_entropy_masked(logits, &b.targets, Some(&b.mask))?;
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    let g = vars.iter().map(|&v| grads.get_or_zeros(v, tape.value(v))).collect();
    Ok((value, g))
}

/// End-to-end next-token training of the recovery factors against the
/// frozen base. With `full_lora`, identity adapters are first attached to
/// every non-target layer (unless already present) and trained alongside.
pub fn sft(base: &WeightStore, rec: &mut RecoveryParams, corpus: &Corpus, cfg: &SftConfig) -> Result<SftReport> {
    cfg.validate()?;
    if cfg.seq_len > base.config.max_seq_len {
        return Err(RecoveryError::Config(format!(
            "seq_len {} exceeds the model's {}",
            cfg.seq_len, base.config.max_seq_len
        )));
    }
    if corpus.token_count() < 2 {
        return Err(RecoveryError::Config("corpus too small for next-token training".into()));
    }
    if cfg.full_lora && rec.adapters.is_empty() {
        rec.attach_adapters(cfg.adapter_rank, derive_seed(cfg.seed, 0xada))?;
    }

    let per_epoch = batches(corpus, cfg.batch_size, cfg.seq_len, cfg.seed, 0).len();
    let mut total = per_epoch * cfg.epochs;
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }
    let warmup = (cfg.warmup_fraction * total as f64).ceil() as usize;
    let mut report = SftReport {
        steps: 0,
        warmup_steps: warmup,
        losses: Vec::with_capacity(total),
    };
    if total == 0 {
        return Ok(report);
    }

    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &rec.trainable());
    let mut epoch = 0u64;
    let mut queue: Vec<Batch> = Vec::new();
    for step in 0..total {
        if queue.is_empty() {
            queue = batches(corpus, cfg.batch_size, cfg.seq_len, cfg.seed, epoch);
            queue.reverse();
            epoch += 1;
        }
        let b = queue.pop().expect("refilled above");
        let (loss, mut grads) = step_grads(base, rec, &b)?;
        if !loss.is_finite() {
            return Err(RecoveryError::Diverged { layer: None, step });
        }
        report.losses.push(loss);
        if cfg.clip > 0.0 {
            clip_grad_norm(&mut grads, cfg.clip);
        }
        let lr = warmup_lr(cfg.lr, warmup, step);
        let mut params = swap_out(rec.trainable_mut());
        adam.step_with_lr(&mut params, &grads, lr)?;
        swap_in(rec.trainable_mut(), params);
        report.steps += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_text;
    use crate::model::{init_model, perplexity, ModelConfig};
    use crate::sharing::{init_recovery, ReplacementSchedule, ScheduleKind, TransformKind};

    fn setup() -> (WeightStore, Corpus) {
        let ws = init_model(&ModelConfig {
            n_layers: 6,
            d_model: 16,
            d_hidden: 24,
            n_heads: 2,
            vocab_size: 257,
            max_seq_len: 16,
            seed: 4,
        })
        .unwrap();
        let c = Corpus::from_bytes(synthetic_text(1, 6_000).as_bytes(), "mem").unwrap();
        (ws, c)
    }

    fn cfg() -> SftConfig {
        SftConfig {
            lr: 1e-2,
            batch_size: 4,
            seq_len: 16,
            max_steps: Some(12),
            ..SftConfig::default()
        }
    }

    #[test]
    fn zero_steps_change_nothing() {
        let (ws, c) = setup();
        let s = ReplacementSchedule::build(ScheduleKind::Next, 6).unwrap();
        let rec = init_recovery(TransformKind::G1, &s, &ws.config, 2, 1).unwrap();
        let mut tuned = rec.clone();
        let r = sft(&ws, &mut tuned, &c, &SftConfig { max_steps: Some(0), ..cfg() }).unwrap();
        assert_eq!(r.steps, 0);
        assert!(tuned.bit_eq(&rec));
    }

    #[test]
    fn base_frozen_factors_move_loss_falls() {
        let (ws, c) = setup();
        let before = ws.clone();
        let s = ReplacementSchedule::build(ScheduleKind::Next, 6).unwrap();
        let rec = init_recovery(TransformKind::G0, &s, &ws.config, 2, 1).unwrap();
        let mut tuned = rec.clone();
        let r = sft(&ws, &mut tuned, &c, &SftConfig { max_steps: Some(30), ..cfg() }).unwrap();
        assert!(ws.bit_eq(&before));
        assert_eq!(r.steps, 30);
        assert_eq!(r.warmup_steps, 2);
        assert!(!tuned.bit_eq(&rec));
        let docs: Vec<Vec<u32>> = c.sequences.clone();
        let p0 = perplexity(&materialize_view(&ws, &rec).unwrap(), &docs).unwrap();
        let p1 = perplexity(&materialize_view(&ws, &tuned).unwrap(), &docs).unwrap();
        assert!(p1 < p0, "{p1} vs {p0}");
    }

    #[test]
    fn deterministic() {
        let (ws, c) = setup();
        let s = ReplacementSchedule::build(ScheduleKind::Back, 6).unwrap();
        let rec = init_recovery(TransformKind::G3, &s, &ws.config, 2, 1).unwrap();
        let (mut a, mut b) = (rec.clone(), rec);
        let ra = sft(&ws, &mut a, &c, &cfg()).unwrap();
        let rb = sft(&ws, &mut b, &c, &cfg()).unwrap();
        assert_eq!(ra, rb);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn full_lora_trains_adapters_and_keeps_targets_separate() {
        let (ws, c) = setup();
        let s = ReplacementSchedule::build(ScheduleKind::Next, 6).unwrap();
        let mut rec = init_recovery(TransformKind::G0, &s, &ws.config, 2, 1).unwrap();
        sft(&ws, &mut rec, &c, &SftConfig { full_lora: true, adapter_rank: 2, ..cfg() }).unwrap();
        let expect: Vec<usize> = (1..=6).filter(|l| !s.is_target(*l)).collect();
        assert_eq!(rec.adapters.keys().copied().collect::<Vec<_>>(), expect);
        assert!(rec.adapters.values().any(|f| f[0].b.frobenius_norm() > 0.0));
        assert!(rec.adapters.values().all(|f| f.iter().all(|p| p.alpha.data() == [1.0])));
    }

    #[test]
    fn pinned_alpha_survives_training() {
        let (ws, c) = setup();
        let s = ReplacementSchedule::build(ScheduleKind::Next, 6).unwrap();
        let mut rec = RecoveryParams::drop_baseline(&s, &ws.config, 2, 3).unwrap();
        sft(&ws, &mut rec, &c, &cfg()).unwrap();
        assert!(rec.targets.values().all(|f| f.iter().all(|p| p.alpha.data() == [0.0])));
    }
}
