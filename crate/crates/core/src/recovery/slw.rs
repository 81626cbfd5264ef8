use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::derive_seed;
use crate::model::{mlp_forward_on_tape, MlpVars, MlpWeights, WeightStore};
use crate::sharing::{apply_transform, transform_on_tape, FactorVars, LayerFactors, RecoveryParams, TransformKind};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor};

use super::{swap_in, swap_out, ActivationCache, RecoveryError, Result, SlwConfig};

const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone)]
pub struct SlwFit {
    pub factors: LayerFactors,
    /// Per-step batch losses.
    pub trace: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Outcome of the warmup for one target layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SlwSummary {
    pub layer: usize,
    pub reference: usize,
    pub rows: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub trace: Vec<f64>,
}

fn gather_rows(src: &Tensor, idx: &[usize]) -> Tensor {
    let d = src.shape()[1];
    let data = src.data();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&data[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![idx.len(), d], out).expect("row gather keeps shape")
}

fn trainable(f: &mut LayerFactors, alpha_trainable: bool) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    for p in f.iter_mut() {
        let mut ts = p.tensors_mut().into_iter();
        let alpha = ts.next().expect("alpha first");
        if alpha_trainable {
            out.push(alpha);
        }
        out.extend(ts);
    }
    out
}

fn predicted(kind: TransformKind, reference: &MlpWeights, f: &LayerFactors) -> Result<MlpWeights> {
    Ok(MlpWeights {
        gate: apply_transform(kind, &reference.gate, &f[0])?,
        up: apply_transform(kind, &reference.up, &f[1])?,
        down: apply_transform(kind, &reference.down, &f[2])?,
    })
}

/// Mean squared error between the block output under `g(Θ_ref, f)` and
/// `expected`, over every element.
pub fn block_mse(
    kind: TransformKind,
    reference: &MlpWeights,
    factors: &LayerFactors,
    rows: &Tensor,
    expected: &Tensor,
) -> Result<f64> {
    let w = predicted(kind, reference, factors)?;
    let n = rows.shape()[0];
    let mut total = 0.0f64;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let y = w.forward(&gather_rows(rows, &idx))?;
        let e = gather_rows(expected, &idx);
        total += y
            .data()
            .iter()
            .zip(e.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>();
    }
    Ok(total / (expected.numel().max(1)) as f64)
}

/// Fit one target layer's factors so that the predicted block reproduces
/// the target block's outputs on the cached inputs.
pub fn slw_fit(
    kind: TransformKind,
    reference: &MlpWeights,
    target: &MlpWeights,
    rows: &Tensor,
    init: LayerFactors,
    alpha_trainable: bool,
    cfg: &SlwConfig,
) -> Result<SlwFit> {
    cfg.validate()?;
    let n = rows.shape()[0];
    if n == 0 || rows.shape().len() != 2 {
        return Err(RecoveryError::EmptyCache(0));
    }
    let expected = target.forward(rows)?;
    let mut factors = init;
    let initial_loss = block_mse(kind, reference, &factors, rows, &expected)?;

    let mut adam = {
        let init: Vec<Tensor> = trainable(&mut factors, alpha_trainable).into_iter().map(|t| t.clone()).collect();
        AdamState::new(AdamConfig::with_lr(cfg.lr), &init)
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::new();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64)));
        for idx in order.chunks(cfg.batch_size) {
            let x = gather_rows(rows, idx);
            let y = gather_rows(&expected, idx);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let mut w = Vec::with_capacity(3);
            let mut vars = Vec::new();
            for (theta, f) in [&reference.gate, &reference.up, &reference.down].into_iter().zip(factors.iter()) {
                let t = tape.constant(theta.clone());
                let fv = FactorVars::bind(&mut tape, f, true, alpha_trainable);
                let v = fv.vars();
                vars.extend_from_slice(if alpha_trainable { &v[..] } else { &v[1..] });
                w.push(transform_on_tape(&mut tape, kind, t, &fv)?);
            }
            let out = mlp_forward_on_tape(
                &mut tape,
                xv,
                MlpVars {
                    gate: w[0],
                    up: w[1],
                    down: w[2],
                },
            )?;
            let loss = tape.mse(out, yv)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(RecoveryError::Diverged {
                    layer: None,
                    step: trace.len(),
                });
            }
            trace.push(value);
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v, tape.value(v))).collect();
            let mut params = swap_out(trainable(&mut factors, alpha_trainable));
            adam.step_with_lr(&mut params, &g, cfg.lr)?;
            swap_in(trainable(&mut factors, alpha_trainable), params);
        }
    }
    let final_loss = block_mse(kind, reference, &factors, rows, &expected)?;
    if !final_loss.is_finite() {
        return Err(RecoveryError::Diverged {
            layer: None,
            step: trace.len(),
        });
    }
    Ok(SlwFit {
        factors,
        trace,
        initial_loss,
        final_loss,
    })
}

fn fit_layer(
    base: &WeightStore,
    recovery: &RecoveryParams,
    cache: &ActivationCache,
    cfg: &SlwConfig,
    layer: usize,
    reference: usize,
) -> Result<(SlwSummary, LayerFactors)> {
    let run = || -> Result<(SlwSummary, LayerFactors)> {
        let rows = cache.get(layer)?;
        let init = recovery
            .targets
            .get(&layer)
            .ok_or(crate::sharing::SharingError::MissingRecovery(layer))?
            .clone();
        let layer_cfg = SlwConfig {
            seed: derive_seed(cfg.seed, layer as u64),
            ..*cfg
        };
        let fit = slw_fit(
            recovery.kind,
            base.mlp(reference)?,
            base.mlp(layer)?,
            rows,
            init,
            recovery.alpha_trainable,
            &layer_cfg,
        )?;
        Ok((
            SlwSummary {
                layer,
                reference,
                rows: rows.shape()[0],
                initial_loss: fit.initial_loss,
                final_loss: fit.final_loss,
                trace: fit.trace,
            },
            fit.factors,
        ))
    };
    run().map_err(|e| match e {
        RecoveryError::Diverged { step, .. } => RecoveryError::Diverged {
            layer: Some(layer),
            step,
        },
        other => RecoveryError::Layer {
            layer,
            source: Box::new(other),
        },
    })
}

/// Warm up every target of `recovery.schedule` from its current factors.
///
/// Each target uses its own shuffle stream seeded from `(cfg.seed, layer)`,
/// so the sequential and parallel paths agree bitwise.
pub fn slw_all(
    base: &WeightStore,
    recovery: &RecoveryParams,
    cache: &ActivationCache,
    cfg: &SlwConfig,
    parallel: bool,
) -> Result<(RecoveryParams, Vec<SlwSummary>)> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = recovery
        .schedule
        .groups()
        .iter()
        .flat_map(|g| g.targets.iter().map(move |&l| (l, g.reference)))
        .collect();
    let results: Vec<Result<(SlwSummary, LayerFactors)>> = if parallel {
        jobs.par_iter()
            .map(|&(l, j)| fit_layer(base, recovery, cache, cfg, l, j))
            .collect()
    } else {
        jobs.iter().map(|&(l, j)| fit_layer(base, recovery, cache, cfg, l, j)).collect()
    };
    let mut out = recovery.clone();
    let mut summaries = Vec::with_capacity(results.len());
    for r in results {
        let (s, f) = r?;
        out.targets.insert(s.layer, f);
        summaries.push(s);
    }
    Ok((out, summaries))
}
