//! Toy Llama-style decoder: configuration, weights, forward pass,
//! perplexity and the binary checkpoint format.

pub mod checkpoint;
mod eval;
mod graph;
mod train;

pub(crate) use train::warmup_lr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use eval::{logits, perplexity, window_nll, LanguageModel};
pub use graph::{forward_graph, mlp_forward, mlp_forward_on_tape, GraphWeights, LayerTap, LayerVars, MlpVars};
pub use train::{pretrain, PretrainConfig, TrainTrace};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    InvalidToken { id: usize, vocab: usize },
    #[error("empty evaluation stream")]
    EmptyStream,
    #[error("training loss became non-finite at step {0}")]
    NonFiniteLoss(usize),
    #[error("layer {layer} outside 1..={n_layers}")]
    LayerIndex { layer: usize, n_layers: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// The standard toy configuration: 12 layers, 64 wide, 172 hidden.
    pub fn toy() -> Self {
        Self {
            n_layers: 12,
            d_model: 64,
            d_hidden: 172,
            n_heads: 4,
            vocab_size: crate::data::VOCAB_SIZE,
            max_seq_len: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads");
        }
        if self.n_layers < 4 {
            return fail("n_layers must be at least 4");
        }
        if self.d_hidden <= self.d_model {
            return fail("d_hidden must exceed d_model");
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2");
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_params_per_layer(&self) -> usize {
        3 * self.d_model * self.d_hidden
    }

    pub fn layer_params(&self) -> usize {
        4 * self.d_model * self.d_model + self.mlp_params_per_layer() + 2 * self.d_model
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d
            + self.max_seq_len * d
            + self.n_layers * self.layer_params()
            + d
            + d * self.vocab_size
    }
}

/// The three projections of a gated MLP block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpProj {
    Gate,
    Up,
    Down,
}

impl MlpProj {
    pub const ALL: [MlpProj; 3] = [MlpProj::Gate, MlpProj::Up, MlpProj::Down];

    pub fn name(self) -> &'static str {
        match self {
            MlpProj::Gate => "gate",
            MlpProj::Up => "up",
            MlpProj::Down => "down",
        }
    }

    /// `(rows, cols)` of this projection for the given widths.
    pub fn dims(self, d_model: usize, d_hidden: usize) -> (usize, usize) {
        match self {
            MlpProj::Gate | MlpProj::Up => (d_model, d_hidden),
            MlpProj::Down => (d_hidden, d_model),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Addressable weight roles inside one decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Wq,
    Wk,
    Wv,
    Wo,
    AttnNorm,
    MlpNorm,
    Mlp(MlpProj),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub gate: Tensor,
    pub up: Tensor,
    pub down: Tensor,
}

impl MlpWeights {
    pub fn get(&self, p: MlpProj) -> &Tensor {
        match p {
            MlpProj::Gate => &self.gate,
            MlpProj::Up => &self.up,
            MlpProj::Down => &self.down,
        }
    }

    pub fn get_mut(&mut self, p: MlpProj) -> &mut Tensor {
        match p {
            MlpProj::Gate => &mut self.gate,
            MlpProj::Up => &mut self.up,
            MlpProj::Down => &mut self.down,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
    pub mlp: MlpWeights,
}

impl LayerWeights {
    pub fn get(&self, role: Role) -> &Tensor {
        match role {
            Role::Wq => &self.wq,
            Role::Wk => &self.wk,
            Role::Wv => &self.wv,
            Role::Wo => &self.wo,
            Role::AttnNorm => &self.attn_norm,
            Role::MlpNorm => &self.mlp_norm,
            Role::Mlp(p) => self.mlp.get(p),
        }
    }

    pub fn get_mut(&mut self, role: Role) -> &mut Tensor {
        match role {
            Role::Wq => &mut self.wq,
            Role::Wk => &mut self.wk,
            Role::Wv => &mut self.wv,
            Role::Wo => &mut self.wo,
            Role::AttnNorm => &mut self.attn_norm,
            Role::MlpNorm => &mut self.mlp_norm,
            Role::Mlp(p) => self.mlp.get_mut(p),
        }
    }

    const ROLES: [(Role, &'static str); 9] = [
        (Role::Wq, "attn.wq"),
        (Role::Wk, "attn.wk"),
        (Role::Wv, "attn.wv"),
        (Role::Wo, "attn.wo"),
        (Role::AttnNorm, "attn_norm"),
        (Role::MlpNorm, "mlp_norm"),
        (Role::Mlp(MlpProj::Gate), "mlp.gate"),
        (Role::Mlp(MlpProj::Up), "mlp.up"),
        (Role::Mlp(MlpProj::Down), "mlp.down"),
    ];
}

/// All parameters of the model. Layers are numbered from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub config: ModelConfig,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl WeightStore {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Layer `l` (1-based).
    pub fn layer(&self, l: usize) -> Result<&LayerWeights> {
        self.check_layer(l)?;
        Ok(&self.layers[l - 1])
    }

    pub fn layer_mut(&mut self, l: usize) -> Result<&mut LayerWeights> {
        self.check_layer(l)?;
        Ok(&mut self.layers[l - 1])
    }

    pub fn get(&self, l: usize, role: Role) -> Result<&Tensor> {
        Ok(self.layer(l)?.get(role))
    }

    pub fn mlp(&self, l: usize) -> Result<&MlpWeights> {
        Ok(&self.layer(l)?.mlp)
    }

    fn check_layer(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.layers.len() {
            return Err(ModelError::LayerIndex {
                layer: l,
                n_layers: self.layers.len(),
            });
        }
        Ok(())
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_embed".to_string(), &self.tok_embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (role, name) in LayerWeights::ROLES {
                out.push((format!("layer.{}.{}", i + 1, name), layer.get(role)));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_embed, &mut self.pos_embed];
        for layer in &mut self.layers {
            let LayerWeights {
                wq,
                wk,
                wv,
                wo,
                attn_norm,
                mlp_norm,
                mlp,
            } = layer;
            out.extend([wq, wk, wv, wo, attn_norm, mlp_norm, &mut mlp.gate, &mut mlp.up, &mut mlp.down]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    /// Rebuild from tensors in [`named_tensors`](Self::named_tensors) order.
    pub(crate) fn from_ordered(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = 2 + 9 * config.n_layers + 2;
        if tensors.len() != expected {
            return Err(ModelError::Config(format!(
                "expected {expected} tensors, found {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let tok_embed = next();
        let pos_embed = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                attn_norm: next(),
                mlp_norm: next(),
                mlp: MlpWeights {
                    gate: next(),
                    up: next(),
                    down: next(),
                },
            });
        }
        let ws = Self {
            config,
            tok_embed,
            pos_embed,
            layers,
            final_norm: next(),
            head: next(),
        };
        ws.check_shapes()?;
        Ok(ws)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let reference = init_model(&ModelConfig { seed: 0, ..self.config })?;
        for ((name, a), (_, b)) in self.named_tensors().iter().zip(reference.named_tensors()) {
            if a.shape() != b.shape() {
                return Err(ModelError::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self
                .named_tensors()
                .iter()
                .zip(other.named_tensors())
                .all(|((_, a), (_, b))| a.bit_eq(b))
    }
}

/// Gaussian(0, 0.02) projections and embeddings, unit norm scales.
pub fn init_model(config: &ModelConfig) -> Result<WeightStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let h = config.d_hidden;
    let mut randn = |shape: &[usize]| Tensor::randn(shape, INIT_STD, &mut rng);
    let tok_embed = randn(&[config.vocab_size, d]);
    let pos_embed = randn(&[config.max_seq_len, d]);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            wq: randn(&[d, d]),
            wk: randn(&[d, d]),
            wv: randn(&[d, d]),
            wo: randn(&[d, d]),
            attn_norm: Tensor::ones(&[d]),
            mlp_norm: Tensor::ones(&[d]),
            mlp: MlpWeights {
                gate: randn(&[d, h]),
                up: randn(&[d, h]),
                down: randn(&[h, d]),
            },
        })
        .collect();
    let head = randn(&[d, config.vocab_size]);
    Ok(WeightStore {
        config: *config,
        tok_embed,
        pos_embed,
        layers,
        final_norm: Tensor::ones(&[d]),
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::toy();
        let a = init_model(&cfg).unwrap();
        assert!(a.bit_eq(&init_model(&cfg).unwrap()));
        let b = init_model(&ModelConfig { seed: 1, ..cfg }).unwrap();
        assert!(!a.tok_embed.bit_eq(&b.tok_embed));
        assert!(a.is_finite());
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = ModelConfig {
            vocab_size: 256,
            ..ModelConfig::toy()
        };
        let ws = init_model(&cfg).unwrap();
        // Tensor-by-tensor tally against the closed form.
        let (v, s, d, h, n) = (256, 64, 64, 172, 12);
        let expect = v * d + s * d + n * (4 * d * d + 3 * d * h + 2 * d) + d + d * v;
        assert_eq!(ws.param_count(), expect);
        assert_eq!(cfg.param_count(), expect);
    }

    #[test]
    fn invalid_configs() {
        let base = ModelConfig::toy();
        for bad in [
            ModelConfig { n_heads: 5, ..base },
            ModelConfig { n_layers: 3, ..base },
            ModelConfig { d_hidden: 64, ..base },
        ] {
            assert!(matches!(init_model(&bad), Err(ModelError::Config(_))));
        }
    }

    #[test]
    fn layers_are_one_based() {
        let ws = init_model(&ModelConfig::toy()).unwrap();
        assert!(ws.layer(0).is_err());
        assert!(ws.layer(12).is_ok());
        assert!(ws.layer(13).is_err());
        assert_eq!(ws.get(1, Role::Mlp(MlpProj::Down)).unwrap().shape(), &[172, 64]);
    }
}
