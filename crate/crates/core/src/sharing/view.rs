use crate::model::{GraphWeights, LanguageModel, MlpProj, MlpVars, ModelConfig, WeightStore};
use crate::tensor::{Tape, Tensor, Var};

use super::params::{LayerFactors, RecoveryParams};
use super::schedule::ReplacementSchedule;
use super::transform::{apply_transform, transform_on_tape, FactorVars, TransformKind};
use super::{Result, SharingError};

/// Where one layer's MLP weights come from.
#[derive(Debug, Clone, Copy)]
pub enum LayerPlan<'a> {
    Own,
    /// Another layer's weights, verbatim.
    Borrow(usize),
    Transform {
        reference: usize,
        factors: &'a LayerFactors,
    },
    /// Own weights plus a `G0` adapter.
    Adapted(&'a LayerFactors),
    /// MLP removed; the residual stream passes through.
    Dropped,
}

/// A forward-capable model whose target MLP weights are computed from a
/// reference layer on each pass and never stored.
#[derive(Debug, Clone)]
pub struct SharedModelView<'a> {
    base: &'a WeightStore,
    kind: TransformKind,
    alpha_trainable: bool,
    plan: Vec<LayerPlan<'a>>,
}

impl<'a> SharedModelView<'a> {
    /// The base model, unchanged.
    pub fn identity(base: &'a WeightStore) -> Self {
        Self {
            base,
            kind: TransformKind::G0,
            alpha_trainable: false,
            plan: vec![LayerPlan::Own; base.n_layers()],
        }
    }

    pub fn with_plan(base: &'a WeightStore, plan: Vec<LayerPlan<'a>>) -> Result<Self> {
        if plan.len() != base.n_layers() {
            return Err(SharingError::DepthMismatch {
                schedule: plan.len(),
                model: base.n_layers(),
            });
        }
        for p in &plan {
            let j = match p {
                LayerPlan::Borrow(j) => *j,
                LayerPlan::Transform { reference, .. } => *reference,
                _ => continue,
            };
            if j == 0 || j > base.n_layers() {
                return Err(SharingError::LayerOutOfRange {
                    layer: j,
                    n_layers: base.n_layers(),
                });
            }
        }
        Ok(Self {
            base,
            kind: TransformKind::G0,
            alpha_trainable: false,
            plan,
        })
    }

    pub fn base(&self) -> &'a WeightStore {
        self.base
    }

    pub fn plan(&self) -> &[LayerPlan<'a>] {
        &self.plan
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    /// Record the view on a tape. With `train_recovery`, recovery factors
    /// become differentiated leaves, returned in
    /// [`RecoveryParams::trainable_mut`] order; the base is always constant.
    pub fn bind(&self, tape: &mut Tape, train_recovery: bool) -> Result<(GraphWeights, Vec<Var>)> {
        let mut gw = self.base.bind(tape, false);
        let own: Vec<Option<MlpVars>> = gw.layers.iter().map(|l| l.mlp).collect();
        let mut trainable = Vec::new();
        for (i, p) in self.plan.iter().enumerate() {
            let mlp = match *p {
                LayerPlan::Own => own[i],
                LayerPlan::Borrow(j) => own[j - 1],
                LayerPlan::Dropped => None,
                LayerPlan::Transform { reference, factors } => {
                    let theta = own[reference - 1].expect("base layers always carry an MLP");
                    Some(self.transformed(tape, self.kind, theta, factors, train_recovery, self.alpha_trainable, &mut trainable)?)
                }
                LayerPlan::Adapted(factors) => {
                    let theta = own[i].expect("base layers always carry an MLP");
                    Some(self.transformed(tape, TransformKind::G0, theta, factors, train_recovery, false, &mut trainable)?)
                }
            };
            gw.layers[i].mlp = mlp;
        }
        Ok((gw, trainable))
    }

    #[allow(clippy::too_many_arguments)]
    fn transformed(
        &self,
        tape: &mut Tape,
        kind: TransformKind,
        theta: MlpVars,
        factors: &LayerFactors,
        train: bool,
        alpha_trainable: bool,
        out: &mut Vec<Var>,
    ) -> Result<MlpVars> {
        let mut w = [theta.gate, theta.up, theta.down];
        for (k, f) in factors.iter().enumerate() {
            let fv = FactorVars::bind(tape, f, train, alpha_trainable);
            if train {
                let vars = fv.vars();
                out.extend(if alpha_trainable { &vars[..] } else { &vars[1..] });
            }
            w[k] = transform_on_tape(tape, kind, w[k], &fv)?;
        }
        Ok(MlpVars {
            gate: w[0],
            up: w[1],
            down: w[2],
        })
    }

    /// A copy of the base whose MLP tensors hold what the view computes.
    /// Dropped layers get all-zero MLP weights.
    pub fn materialize(&self) -> Result<WeightStore> {
        let mut ws = self.base.clone();
        for (i, p) in self.plan.iter().enumerate() {
            let target = &mut ws.layers[i].mlp;
            match *p {
                LayerPlan::Own => {}
                LayerPlan::Borrow(j) => *target = self.base.layers[j - 1].mlp.clone(),
                LayerPlan::Dropped => {
                    for proj in MlpProj::ALL {
                        let t = target.get_mut(proj);
                        *t = Tensor::zeros(t.shape());
                    }
                }
                LayerPlan::Transform { reference, factors } => {
                    let src = &self.base.layers[reference - 1].mlp;
                    for (proj, f) in MlpProj::ALL.into_iter().zip(factors) {
                        *target.get_mut(proj) = apply_transform(self.kind, src.get(proj), f)?;
                    }
                }
                LayerPlan::Adapted(factors) => {
                    let src = &self.base.layers[i].mlp;
                    for (proj, f) in MlpProj::ALL.into_iter().zip(factors) {
                        *target.get_mut(proj) = apply_transform(TransformKind::G0, src.get(proj), f)?;
                    }
                }
            }
        }
        Ok(ws)
    }

    /// Parameters that must be stored: base tensors minus every MLP the
    /// view does not read from its own layer, plus recovery factors.
    pub fn stored_param_count(&self) -> usize {
        let cfg = &self.base.config;
        let mut n = self.base.param_count();
        for p in &self.plan {
            match p {
                LayerPlan::Own => {}
                LayerPlan::Borrow(_) | LayerPlan::Dropped => n -= cfg.mlp_params_per_layer(),
                LayerPlan::Transform { factors, .. } => {
                    n -= cfg.mlp_params_per_layer();
                    n += factors.iter().map(|f| f.param_count()).sum::<usize>();
                }
                LayerPlan::Adapted(factors) => n += factors.iter().map(|f| f.param_count()).sum::<usize>(),
            }
        }
        n
    }
}

impl LanguageModel for SharedModelView<'_> {
    fn config(&self) -> &ModelConfig {
        &self.base.config
    }

    fn bind_frozen(&self, tape: &mut Tape) -> crate::model::Result<GraphWeights> {
        self.bind(tape, false)
            .map(|(gw, _)| gw)
            .map_err(|e| crate::model::ModelError::Config(e.to_string()))
    }
}

fn check_depth(base: &WeightStore, schedule: &ReplacementSchedule) -> Result<()> {
    if schedule.n_layers() != base.n_layers() {
        return Err(SharingError::DepthMismatch {
            schedule: schedule.n_layers(),
            model: base.n_layers(),
        });
    }
    Ok(())
}

/// Targets computed as `g(Θ_j, ΔΘ_l)`; stored layers with adapters use them.
pub fn materialize_view<'a>(base: &'a WeightStore, recovery: &'a RecoveryParams) -> Result<SharedModelView<'a>> {
    let schedule = &recovery.schedule;
    check_depth(base, schedule)?;
    let cfg = &base.config;
    if (recovery.d_model, recovery.d_hidden) != (cfg.d_model, cfg.d_hidden) {
        return Err(SharingError::DimMismatch);
    }
    let mut plan = vec![LayerPlan::Own; base.n_layers()];
    for g in schedule.groups() {
        for &l in &g.targets {
            let factors = recovery.targets.get(&l).ok_or(SharingError::MissingRecovery(l))?;
            for (f, p) in factors.iter().zip(MlpProj::ALL) {
                let (rows, cols) = p.dims(cfg.d_model, cfg.d_hidden);
                f.check(recovery.kind, rows, cols)?;
            }
            plan[l - 1] = LayerPlan::Transform {
                reference: g.reference,
                factors,
            };
        }
    }
    for (&l, factors) in &recovery.adapters {
        if l == 0 || l > base.n_layers() || schedule.is_target(l) {
            return Err(SharingError::LayerOutOfRange {
                layer: l,
                n_layers: base.n_layers(),
            });
        }
        plan[l - 1] = LayerPlan::Adapted(factors);
    }
    Ok(SharedModelView {
        base,
        kind: recovery.kind,
        alpha_trainable: recovery.alpha_trainable,
        plan,
    })
}

/// Targets reuse their reference verbatim.
pub fn direct_sharing_view<'a>(base: &'a WeightStore, schedule: &ReplacementSchedule) -> Result<SharedModelView<'a>> {
    check_depth(base, schedule)?;
    let mut plan = vec![LayerPlan::Own; base.n_layers()];
    for g in schedule.groups() {
        for &l in &g.targets {
            plan[l - 1] = LayerPlan::Borrow(g.reference);
        }
    }
    SharedModelView::with_plan(base, plan)
}

/// Target MLPs removed.
pub fn drop_view<'a>(base: &'a WeightStore, schedule: &ReplacementSchedule) -> Result<SharedModelView<'a>> {
    check_depth(base, schedule)?;
    let mut plan = vec![LayerPlan::Own; base.n_layers()];
    for l in schedule.targets() {
        plan[l - 1] = LayerPlan::Dropped;
    }
    SharedModelView::with_plan(base, plan)
}

/// Layer `target` runs with layer `reference`'s MLP weights.
pub fn replace_view(base: &WeightStore, reference: usize, target: usize) -> Result<SharedModelView<'_>> {
    let n = base.n_layers();
    for l in [reference, target] {
        if l == 0 || l > n {
            return Err(SharingError::LayerOutOfRange { layer: l, n_layers: n });
        }
    }
    let mut plan = vec![LayerPlan::Own; n];
    plan[target - 1] = LayerPlan::Borrow(reference);
    SharedModelView::with_plan(base, plan)
}
