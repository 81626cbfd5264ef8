use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::model::checkpoint::{read_container, write_container};
use crate::model::{MlpProj, ModelConfig};
use crate::tensor::Tensor;

use super::schedule::ReplacementSchedule;
use super::transform::{init_factors, Factors, TransformKind};
use super::{Result, SharingError};

pub const RECOVERY_MAGIC: [u8; 4] = *b"SHRQ";

/// Factors for gate, up and down, in [`MlpProj::ALL`] order.
pub type LayerFactors = [Factors; 3];

/// Low-rank recovery factors for every target layer, plus optional plain
/// adapters on stored layers.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryParams {
    pub kind: TransformKind,
    pub rank: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub schedule: ReplacementSchedule,
    /// When false, every `α` stays at its stored value during training.
    pub alpha_trainable: bool,
    pub targets: BTreeMap<usize, LayerFactors>,
    /// `G0` adapters on non-target layers; their `α` is fixed at 1.
    pub adapters: BTreeMap<usize, LayerFactors>,
}

fn proj_rng(seed: u64, layer: usize, proj: MlpProj) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, (layer * 3 + proj.index()) as u64))
}

fn layer_factors(
    kind: TransformKind,
    d_model: usize,
    d_hidden: usize,
    r: usize,
    seed: u64,
    layer: usize,
) -> Result<LayerFactors> {
    let make = |p: MlpProj| {
        let (rows, cols) = p.dims(d_model, d_hidden);
        init_factors(kind, rows, cols, r, &mut proj_rng(seed, layer, p))
    };
    Ok([make(MlpProj::Gate)?, make(MlpProj::Up)?, make(MlpProj::Down)?])
}

/// Initial factors for every target of `schedule`; each projection draws
/// from its own seed-derived stream.
pub fn init_recovery(
    kind: TransformKind,
    schedule: &ReplacementSchedule,
    config: &ModelConfig,
    r: usize,
    seed: u64,
) -> Result<RecoveryParams> {
    if r == 0 {
        return Err(SharingError::ZeroRank);
    }
    if schedule.n_layers() != config.n_layers {
        return Err(SharingError::DepthMismatch {
            schedule: schedule.n_layers(),
            model: config.n_layers,
        });
    }
    let mut targets = BTreeMap::new();
    for l in schedule.targets() {
        targets.insert(l, layer_factors(kind, config.d_model, config.d_hidden, r, seed, l)?);
    }
    Ok(RecoveryParams {
        kind,
        rank: r,
        d_model: config.d_model,
        d_hidden: config.d_hidden,
        schedule: schedule.clone(),
        alpha_trainable: true,
        targets,
        adapters: BTreeMap::new(),
    })
}

impl RecoveryParams {
    /// Layer-pruning baseline in trainable form: `G0` with `α` pinned at 0,
    /// so each target starts with zero MLP output. Gate and up `B` start
    /// small and random, down `B` at zero, which keeps the gradient alive.
    pub fn drop_baseline(schedule: &ReplacementSchedule, config: &ModelConfig, r: usize, seed: u64) -> Result<Self> {
        let mut p = init_recovery(TransformKind::G0, schedule, config, r, seed)?;
        p.alpha_trainable = false;
        for (&l, fs) in p.targets.iter_mut() {
            for (f, proj) in fs.iter_mut().zip(MlpProj::ALL) {
                f.alpha = Tensor::zeros(&[1]);
                if proj != MlpProj::Down {
                    let cols = f.b.shape()[1];
                    let mut rng = proj_rng(derive_seed(seed, 0xb), l, proj);
                    f.b = Tensor::randn(&[r, cols], super::transform::A_INIT_STD, &mut rng);
                }
            }
        }
        Ok(p)
    }

    /// Attach identity-initialised `G0` adapters to every non-target layer.
    pub fn attach_adapters(&mut self, r: usize, seed: u64) -> Result<()> {
        let n = self.schedule.n_layers();
        for l in (1..=n).filter(|l| !self.schedule.is_target(*l)) {
            let f = layer_factors(
                TransformKind::G0,
                self.d_model,
                self.d_hidden,
                r,
                derive_seed(seed, 0xada),
                l,
            )?;
            self.adapters.insert(l, f);
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.targets
            .values()
            .chain(self.adapters.values())
            .flat_map(|fs| fs.iter())
            .map(Factors::param_count)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.targets
            .values()
            .chain(self.adapters.values())
            .flat_map(|fs| fs.iter())
            .all(Factors::is_finite)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let same = |a: &BTreeMap<usize, LayerFactors>, b: &BTreeMap<usize, LayerFactors>| {
            a.len() == b.len()
                && a.iter().zip(b).all(|((la, fa), (lb, fb))| {
                    la == lb && fa.iter().zip(fb).all(|(x, y)| x.bit_eq(y))
                })
        };
        self.kind == other.kind
            && self.rank == other.rank
            && self.schedule == other.schedule
            && self.alpha_trainable == other.alpha_trainable
            && same(&self.targets, &other.targets)
            && same(&self.adapters, &other.adapters)
    }

    /// Tensors updated by training, ordered by layer, then projection,
    /// then factor. Fixed `α`s are left out.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let alpha_trainable = self.alpha_trainable;
        let mut out = Vec::new();
        let mut adapters: BTreeMap<usize, &mut LayerFactors> = self.adapters.iter_mut().map(|(l, f)| (*l, f)).collect();
        let mut targets: BTreeMap<usize, &mut LayerFactors> = self.targets.iter_mut().map(|(l, f)| (*l, f)).collect();
        let layers: Vec<usize> = targets.keys().chain(adapters.keys()).copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        for l in layers {
            if let Some(fs) = targets.remove(&l) {
                for f in fs.iter_mut() {
                    let mut ts = f.tensors_mut().into_iter();
                    let alpha = ts.next().expect("alpha first");
                    if alpha_trainable {
                        out.push(alpha);
                    }
                    out.extend(ts);
                }
            }
            if let Some(fs) = adapters.remove(&l) {
                for f in fs.iter_mut() {
                    out.extend(f.tensors_mut().into_iter().skip(1));
                }
            }
        }
        out
    }

    pub fn trainable(&self) -> Vec<Tensor> {
        let mut c = self.clone();
        c.trainable_mut().into_iter().map(|t| t.clone()).collect()
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, map) in [("target", &self.targets), ("adapter", &self.adapters)] {
            for (l, fs) in map {
                let kind = if prefix == "target" { self.kind } else { TransformKind::G0 };
                for (f, p) in fs.iter().zip(MlpProj::ALL) {
                    for (name, t) in f.names(kind).into_iter().zip(f.tensors()) {
                        out.push((format!("{prefix}.{l}.{}.{name}", p.name()), t));
                    }
                }
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = RecoveryHeader {
            kind: self.kind,
            rank: self.rank,
            d_model: self.d_model,
            d_hidden: self.d_hidden,
            schedule: self.schedule.clone(),
            alpha_trainable: self.alpha_trainable,
            adapter_layers: self.adapters.keys().copied().collect(),
        };
        write_container(path, RECOVERY_MAGIC, &header, &self.named())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (h, tensors): (RecoveryHeader, _) = read_container(path, RECOVERY_MAGIC)?;
        let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: String| {
            by_name
                .remove(&name)
                .ok_or_else(|| SharingError::MissingTensor(name))
        };
        let mut read_layer = |prefix: &str, l: usize, kind: TransformKind| -> Result<LayerFactors> {
            let mut one = |p: MlpProj| -> Result<Factors> {
                let key = |n: &str| format!("{prefix}.{l}.{}.{n}", p.name());
                let alpha = take(key("alpha"))?;
                let a = take(key("a"))?;
                let b = take(key("b"))?;
                let extra = match kind.extra_names() {
                    Some((x, y)) => Some((take(key(x))?, take(key(y))?)),
                    None => None,
                };
                let f = Factors { alpha, a, b, extra };
                let (rows, cols) = p.dims(h.d_model, h.d_hidden);
                f.check(kind, rows, cols)?;
                Ok(f)
            };
            Ok([one(MlpProj::Gate)?, one(MlpProj::Up)?, one(MlpProj::Down)?])
        };
        let mut targets = BTreeMap::new();
        for l in h.schedule.targets() {
            targets.insert(l, read_layer("target", l, h.kind)?);
        }
        let mut adapters = BTreeMap::new();
        for &l in &h.adapter_layers {
            adapters.insert(l, read_layer("adapter", l, TransformKind::G0)?);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(SharingError::UnexpectedTensor(extra.clone()));
        }
        Ok(RecoveryParams {
            kind: h.kind,
            rank: h.rank,
            d_model: h.d_model,
            d_hidden: h.d_hidden,
            schedule: h.schedule,
            alpha_trainable: h.alpha_trainable,
            targets,
            adapters,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct RecoveryHeader {
    kind: TransformKind,
    rank: usize,
    d_model: usize,
    d_hidden: usize,
    schedule: ReplacementSchedule,
    alpha_trainable: bool,
    adapter_layers: Vec<usize>,
}
