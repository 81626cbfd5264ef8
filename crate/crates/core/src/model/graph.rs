use crate::tensor::kernels::{self, AttnShape};
use crate::tensor::{Tape, Tensor, Var};

use super::{MlpWeights, ModelConfig, ModelError, Result, WeightStore};

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub gate: Var,
    pub up: Var,
    pub down: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub attn_norm: Var,
    pub mlp_norm: Var,
    /// `None` removes the MLP block; the residual passes through.
    pub mlp: Option<MlpVars>,
}

/// MLP input and output of one tapped layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerTap {
    pub layer: usize,
    pub input: Var,
    /// Absent when the layer's MLP is removed.
    pub output: Option<Var>,
}

/// Model weights recorded on a tape.
#[derive(Debug, Clone)]
pub struct GraphWeights {
    pub config: ModelConfig,
    pub tok_embed: Var,
    pub pos_embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub head: Var,
}

impl WeightStore {
    /// Record every tensor as a constant (`trainable = false`) or as a
    /// differentiated leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GraphWeights {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let tok_embed = put(&self.tok_embed);
        let pos_embed = put(&self.pos_embed);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                wq: put(&l.wq),
                wk: put(&l.wk),
                wv: put(&l.wv),
                wo: put(&l.wo),
                attn_norm: put(&l.attn_norm),
                mlp_norm: put(&l.mlp_norm),
                mlp: Some(MlpVars {
                    gate: put(&l.mlp.gate),
                    up: put(&l.mlp.up),
                    down: put(&l.mlp.down),
                }),
            })
            .collect();
        GraphWeights {
            config: self.config,
            tok_embed,
            pos_embed,
            layers,
            final_norm: put(&self.final_norm),
            head: put(&self.head),
        }
    }
}

impl GraphWeights {
    /// Vars in [`WeightStore::named_tensors`] order; dropped MLPs are skipped.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_embed, self.pos_embed];
        for l in &self.layers {
            out.extend([l.wq, l.wk, l.wv, l.wo, l.attn_norm, l.mlp_norm]);
            if let Some(m) = l.mlp {
                out.extend([m.gate, m.up, m.down]);
            }
        }
        out.push(self.final_norm);
        out.push(self.head);
        out
    }
}

/// `down(silu(x·gate) ⊙ (x·up))` on a tape.
pub fn mlp_forward_on_tape(tape: &mut Tape, x: Var, mlp: MlpVars) -> Result<Var> {
    let g = tape.matmul(x, mlp.gate)?;
    let g = tape.silu(g);
    let u = tape.matmul(x, mlp.up)?;
    let h = tape.mul(g, u)?;
    Ok(tape.matmul(h, mlp.down)?)
}

/// The gated MLP block evaluated directly; bitwise identical to the tape path.
pub fn mlp_forward(x: &Tensor, gate: &Tensor, up: &Tensor, down: &Tensor) -> Result<Tensor> {
    let g = kernels::silu(&kernels::matmul(x, gate)?);
    let u = kernels::matmul(x, up)?;
    let h = kernels::mul(&g, &u)?;
    Ok(kernels::matmul(&h, down)?)
}

impl MlpWeights {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        mlp_forward(x, &self.gate, &self.up, &self.down)
    }
}

/// Forward pass over `batch` sequences of `seq` tokens, row-major in `ids`.
///
/// Returns logits `[batch·seq × vocab]` and, for each layer in `taps`
/// (1-based), the normalised MLP input `[batch·seq × d_model]`.
pub fn forward_graph(
    tape: &mut Tape,
    w: &GraphWeights,
    ids: &[usize],
    batch: usize,
    seq: usize,
    taps: &[usize],
) -> Result<(Var, Vec<LayerTap>)> {
    let cfg = &w.config;
    if seq > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: seq,
            max: cfg.max_seq_len,
        });
    }
    if ids.len() != batch * seq {
        return Err(ModelError::Config(format!(
            "{} ids for a {batch}×{seq} batch",
            ids.len()
        )));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ModelError::InvalidToken {
            id,
            vocab: cfg.vocab_size,
        });
    }
    for &l in taps {
        if l == 0 || l > w.layers.len() {
            return Err(ModelError::LayerIndex {
                layer: l,
                n_layers: w.layers.len(),
            });
        }
    }
    let d = cfg.d_model;
    let shape = AttnShape {
        batch,
        seq,
        heads: cfg.n_heads,
        head_dim: cfg.head_dim(),
    };

    let x = tape.embedding(w.tok_embed, ids)?;
    let x = tape.reshape(x, &[batch, seq, d])?;
    let positions: Vec<usize> = (0..seq).collect();
    let pos = tape.embedding(w.pos_embed, &positions)?;
    let mut h = tape.add(x, pos)?;

    let mut captured = Vec::with_capacity(taps.len());
    for (i, layer) in w.layers.iter().enumerate() {
        let a = tape.rmsnorm(h, layer.attn_norm)?;
        let q = tape.matmul(a, layer.wq)?;
        let k = tape.matmul(a, layer.wk)?;
        let v = tape.matmul(a, layer.wv)?;
        let att = tape.causal_attention(q, k, v, shape)?;
        let o = tape.matmul(att, layer.wo)?;
        h = tape.add(h, o)?;

        let m = tape.rmsnorm(h, layer.mlp_norm)?;
        let mut output = None;
        if let Some(mlp) = layer.mlp {
            let y = mlp_forward_on_tape(tape, m, mlp)?;
            output = Some(y);
            h = tape.add(h, y)?;
        }
        if taps.contains(&(i + 1)) {
            captured.push(LayerTap {
                layer: i + 1,
                input: m,
                output,
            });
        }
    }
    let out = tape.rmsnorm(h, w.final_norm)?;
    let logits = tape.matmul(out, w.head)?;
    let logits = tape.reshape(logits, &[batch * seq, cfg.vocab_size])?;
    Ok((logits, captured))
}
