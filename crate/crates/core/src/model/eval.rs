use crate::tensor::{Tape, Tensor};

use super::graph::{forward_graph, GraphWeights};
use super::{ModelConfig, ModelError, Result, WeightStore};

/// Anything that can lay its weights onto a tape as constants.
pub trait LanguageModel {
    fn config(&self) -> &ModelConfig;
    fn bind_frozen(&self, tape: &mut Tape) -> Result<GraphWeights>;
}

impl LanguageModel for WeightStore {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn bind_frozen(&self, tape: &mut Tape) -> Result<GraphWeights> {
        Ok(self.bind(tape, false))
    }
}

/// Logits `[T × V]` for one token sequence.
pub fn logits<M: LanguageModel + ?Sized>(model: &M, tokens: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let gw = model.bind_frozen(&mut tape)?;
    let (out, _) = forward_graph(&mut tape, &gw, tokens, 1, tokens.len(), &[])?;
    Ok(tape.value(out).clone())
}

const EVAL_BATCH: usize = 16;

/// Summed next-token NLL and the number of predictions, over windows that
/// all share one length.
pub fn window_nll<M: LanguageModel + ?Sized>(
    model: &M,
    windows: &[(Vec<usize>, Vec<usize>)],
) -> Result<(f64, usize)> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in windows.chunks(EVAL_BATCH) {
        let seq = chunk[0].0.len();
        let mut ids = Vec::with_capacity(chunk.len() * seq);
        let mut targets = Vec::with_capacity(chunk.len() * seq);
        for (inp, tgt) in chunk {
            ids.extend_from_slice(inp);
            targets.extend_from_slice(tgt);
        }
        let mut tape = Tape::new();
        let gw = model.bind_frozen(&mut tape)?;
        let (out, _) = forward_graph(&mut tape, &gw, &ids, chunk.len(), seq, &[])?;
        let loss = tape.cross_entropy_mean(out, &targets)?;
        total += tape.value(loss).item() as f64 * targets.len() as f64;
        count += targets.len();
    }
    Ok((total, count))
}

/// `exp(mean next-token NLL)` over every document, each cut into
/// non-overlapping windows of `max_seq_len` inputs.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, docs: &[Vec<u32>]) -> Result<f64> {
    let max = model.config().max_seq_len;
    let mut full = Vec::new();
    let mut ragged: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for doc in docs {
        if doc.len() < 2 {
            continue;
        }
        let mut start = 0;
        while start + 1 < doc.len() {
            let end = (start + max).min(doc.len() - 1);
            let inp: Vec<usize> = doc[start..end].iter().map(|&t| t as usize).collect();
            let tgt: Vec<usize> = doc[start + 1..end + 1].iter().map(|&t| t as usize).collect();
            if inp.len() == max {
                full.push((inp, tgt));
            } else {
                ragged.push((inp, tgt));
            }
            start = end;
        }
    }
    let (mut total, mut count) = window_nll(model, &full)?;
    // Ragged tails are grouped by length so each batch stays rectangular.
    ragged.sort_by_key(|(i, _)| i.len());
    for group in ragged.chunk_by(|a, b| a.0.len() == b.0.len()) {
        let (t, c) = window_nll(model, group)?;
        total += t;
        count += c;
    }
    if count == 0 {
        return Err(ModelError::EmptyStream);
    }
    Ok((total / count as f64).exp())
}
