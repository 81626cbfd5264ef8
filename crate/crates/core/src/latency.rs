//! Analytical storage and run-time model for layer-wise inference of a
//! shared model: bytes that must be stored and loaded, load/init time,
//! forward time, and savings against the unshared model.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::sharing::{ReplacementSchedule, TransformKind};

#[derive(Debug, thiserror::Error)]
pub enum LatencyError {
    #[error("invalid cost model: {0}")]
    CostModel(String),
    #[error("schedule covers {schedule} layers but the model has {model}")]
    DepthMismatch { schedule: usize, model: usize },
    #[error("base {0} is zero, savings are undefined")]
    DivisionByZero(&'static str),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, LatencyError>;

/// Parameter layout of a Llama-style decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub name: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub vocab_size: usize,
    /// Learned positional table rows; 0 for rotary models.
    pub pos_embed_rows: usize,
}

impl ModelDescription {
    pub fn llama2_7b() -> Self {
        Self {
            name: "llama2-7b".into(),
            n_layers: 32,
            d_model: 4096,
            d_hidden: 11008,
            vocab_size: 32000,
            pos_embed_rows: 0,
        }
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            name: "toy".into(),
            n_layers: cfg.n_layers,
            d_model: cfg.d_model,
            d_hidden: cfg.d_hidden,
            vocab_size: cfg.vocab_size,
            pos_embed_rows: cfg.max_seq_len,
        }
    }

    pub fn mlp_params_per_layer(&self) -> usize {
        3 * self.d_model * self.d_hidden
    }

    /// Attention projections and both norms of one layer.
    pub fn non_mlp_params_per_layer(&self) -> usize {
        4 * self.d_model * self.d_model + 2 * self.d_model
    }

    /// Embeddings, final norm and output head.
    pub fn outer_params(&self) -> usize {
        (2 * self.vocab_size + self.pos_embed_rows + 1) * self.d_model
    }

    pub fn total_params(&self) -> usize {
        self.outer_params() + self.n_layers * (self.non_mlp_params_per_layer() + self.mlp_params_per_layer())
    }

    /// Recovery parameters of one target layer (all three projections,
    /// including each `α`).
    pub fn recovery_params_per_target(&self, kind: TransformKind, r: usize) -> usize {
        if r == 0 {
            return 0;
        }
        let (d1, d2) = (self.d_model, self.d_hidden);
        [(d1, d2), (d1, d2), (d2, d1)]
            .iter()
            .map(|&(rows, cols)| {
                let extra = kind
                    .extra_shapes(rows, cols, r)
                    .map_or(0, |(a, b)| a[0] * a[1] + b[0] * b[1]);
                1 + rows * r + r * cols + extra
            })
            .sum()
    }
}

/// Device constants. Times are in seconds, sizes in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub bytes_per_param: f64,
    pub load_bandwidth: f64,
    pub per_layer_init_overhead: f64,
    /// Parameters processed per second in the forward pass.
    pub compute_rate: f64,
    /// Parameters per second produced when rebuilding a target's weights.
    pub lora_reconstruct_rate: f64,
    /// Extra bytes stored with every loaded MLP block (quantisation
    /// metadata, buffers).
    #[serde(default)]
    pub overhead_bytes_per_layer: f64,
}

impl Default for CostModel {
    /// f32 weights on a desktop-ish machine.
    fn default() -> Self {
        Self {
            bytes_per_param: 4.0,
            load_bandwidth: 2.0e9,
            per_layer_init_overhead: 1e-3,
            compute_rate: 5.0e9,
            lora_reconstruct_rate: 5.0e9,
            overhead_bytes_per_layer: 0.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bytes_per_param", self.bytes_per_param),
            ("load_bandwidth", self.load_bandwidth),
            ("per_layer_init_overhead", self.per_layer_init_overhead),
            ("compute_rate", self.compute_rate),
            ("lora_reconstruct_rate", self.lora_reconstruct_rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LatencyError::CostModel(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.overhead_bytes_per_layer >= 0.0 && self.overhead_bytes_per_layer.is_finite()) {
            return Err(LatencyError::CostModel(format!(
                "overhead_bytes_per_layer must be non-negative, got {}",
                self.overhead_bytes_per_layer
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |msg: String| LatencyError::Io {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        let cm: CostModel = serde_json::from_str(&text).map_err(|e| io(e.to_string()))?;
        cm.validate()?;
        Ok(cm)
    }

    /// Every rate multiplied by `c`, the fixed per-layer cost divided by it.
    pub fn faster(&self, c: f64) -> Self {
        Self {
            load_bandwidth: self.load_bandwidth * c,
            per_layer_init_overhead: self.per_layer_init_overhead / c,
            compute_rate: self.compute_rate * c,
            lora_reconstruct_rate: self.lora_reconstruct_rate * c,
            ..*self
        }
    }
}

/// Observed totals of an unshared model used to fit a [`CostModel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub load_init_time: f64,
    pub forward_time: f64,
    pub model_bytes: f64,
    pub bytes_per_param: f64,
    /// Share of the load/init time attributed to moving bytes; the rest
    /// is split evenly over layers as init overhead.
    pub bandwidth_share: f64,
}

impl Calibration {
    /// The 4-bit Llama2-7b phone measurements (12.70 s total, 4.04 GB).
    /// The bandwidth share is not measured; 0.134 is what makes the
    /// `Next`, r = 0 load saving land near the observed 42%.
    pub fn phone_llama2_7b() -> Self {
        Self {
            load_init_time: 9.794,
            forward_time: 2.905,
            model_bytes: 4.04e9,
            bytes_per_param: 0.5,
            bandwidth_share: 0.134,
        }
    }
}

/// Fit the cost model so that the unshared `desc` reproduces `cal`.
/// Bytes beyond `bytes_per_param × params` become per-layer overhead.
pub fn calibrate(desc: &ModelDescription, cal: &Calibration) -> Result<CostModel> {
    let params = desc.total_params() as f64;
    let overhead = (cal.model_bytes - params * cal.bytes_per_param) / desc.n_layers as f64;
    if !(0.0..1.0).contains(&cal.bandwidth_share) || cal.bandwidth_share == 0.0 {
        return Err(LatencyError::CostModel("bandwidth_share must lie in (0, 1)".into()));
    }
    let cm = CostModel {
        bytes_per_param: cal.bytes_per_param,
        load_bandwidth: cal.model_bytes / (cal.load_init_time * cal.bandwidth_share),
        per_layer_init_overhead: cal.load_init_time * (1.0 - cal.bandwidth_share) / desc.n_layers as f64,
        compute_rate: params / cal.forward_time,
        lora_reconstruct_rate: params / cal.forward_time,
        overhead_bytes_per_layer: overhead.max(0.0),
    };
    cm.validate()?;
    Ok(cm)
}

fn check(desc: &ModelDescription, schedule: &ReplacementSchedule) -> Result<usize> {
    if schedule.n_layers() != desc.n_layers {
        return Err(LatencyError::DepthMismatch {
            schedule: schedule.n_layers(),
            model: desc.n_layers,
        });
    }
    Ok(schedule.target_count())
}

/// Parameters that must be stored: full model minus target MLPs plus
/// recovery factors (none when `r = 0`).
pub fn stored_params(
    desc: &ModelDescription,
    schedule: &ReplacementSchedule,
    kind: TransformKind,
    r: usize,
) -> Result<usize> {
    let t = check(desc, schedule)?;
    Ok(desc.total_params() - t * desc.mlp_params_per_layer() + t * desc.recovery_params_per_target(kind, r))
}

pub fn stored_bytes(
    desc: &ModelDescription,
    schedule: &ReplacementSchedule,
    kind: TransformKind,
    r: usize,
    cost: &CostModel,
) -> Result<f64> {
    let params = stored_params(desc, schedule, kind, r)?;
    let loaded_mlps = desc.n_layers - schedule.target_count();
    Ok(cost.bytes_per_param * params as f64 + cost.overhead_bytes_per_layer * loaded_mlps as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunEstimate {
    pub load_init_time: f64,
    pub forward_time: f64,
    pub total_time: f64,
    pub stored_bytes: f64,
}

/// Targets are rebuilt on the fly, so they cost compute but no loading.
pub fn simulate_run(
    desc: &ModelDescription,
    schedule: &ReplacementSchedule,
    kind: TransformKind,
    r: usize,
    cost: &CostModel,
) -> Result<RunEstimate> {
    cost.validate()?;
    let bytes = stored_bytes(desc, schedule, kind, r, cost)?;
    let stored_layers = desc.n_layers - schedule.target_count();
    let load_init_time = bytes / cost.load_bandwidth + stored_layers as f64 * cost.per_layer_init_overhead;
    let rebuilt = if r == 0 {
        0
    } else {
        schedule.target_count() * desc.mlp_params_per_layer()
    };
    let forward_time = desc.total_params() as f64 / cost.compute_rate + rebuilt as f64 / cost.lora_reconstruct_rate;
    Ok(RunEstimate {
        load_init_time,
        forward_time,
        total_time: load_init_time + forward_time,
        stored_bytes: bytes,
    })
}

/// `(base − shared) / base` per column, as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Savings {
    pub load_init: f64,
    pub forward: f64,
    pub total: f64,
    pub model_size: f64,
}

pub fn savings_report(base: &RunEstimate, shared: &RunEstimate) -> Result<Savings> {
    let frac = |b: f64, s: f64, name: &'static str| {
        if b == 0.0 {
            Err(LatencyError::DivisionByZero(name))
        } else {
            Ok((b - s) / b)
        }
    };
    Ok(Savings {
        load_init: frac(base.load_init_time, shared.load_init_time, "load/init time")?,
        forward: frac(base.forward_time, shared.forward_time, "forward time")?,
        total: frac(base.total_time, shared.total_time, "total time")?,
        model_size: frac(base.stored_bytes, shared.stored_bytes, "model size")?,
    })
}

/// Three-row table: base, shared and the savings between them.
pub fn format_table(base_label: &str, base: &RunEstimate, shared_label: &str, shared: &RunEstimate) -> Result<String> {
    let s = savings_report(base, shared)?;
    let width = base_label.len().max(shared_label.len()).max("saving".len());
    let mut out = String::new();
    writeln!(
        out,
        "{:<width$} | {:>12} | {:>12} | {:>12} | {:>10}",
        "", "Load & Init", "Forward", "Total time", "Model size"
    )
    .unwrap();
    for (label, e) in [(base_label, base), (shared_label, shared)] {
        writeln!(
            out,
            "{:<width$} | {:>11.3}s | {:>11.3}s | {:>11.3}s | {:>8.2}GB",
            label,
            e.load_init_time,
            e.forward_time,
            e.total_time,
            e.stored_bytes / 1e9
        )
        .unwrap();
    }
    writeln!(
        out,
        "{:<width$} | {:>11.1}% | {:>11.1}% | {:>11.1}% | {:>9.1}%",
        "saving",
        100.0 * s.load_init,
        100.0 * s.forward,
        100.0 * s.total,
        100.0 * s.model_size
    )
    .unwrap();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::sharing::{init_recovery, ScheduleKind};

    #[test]
    fn llama_counts() {
        let d = ModelDescription::llama2_7b();
        assert_eq!(d.total_params(), 6_738_415_616);
        assert_eq!(d.recovery_params_per_target(TransformKind::G0, 400), 3 * (1 + 400 * (4096 + 11008)));
    }

    #[test]
    fn empty_schedule_is_full_model() {
        let d = ModelDescription::llama2_7b();
        let cm = CostModel::default();
        let s = ReplacementSchedule::empty(32);
        assert_eq!(
            stored_bytes(&d, &s, TransformKind::G0, 8, &cm).unwrap(),
            4.0 * d.total_params() as f64
        );
        let a = simulate_run(&d, &s, TransformKind::G0, 8, &cm).unwrap();
        let b = simulate_run(&d, &s, TransformKind::G3, 0, &cm).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn next_without_lora_closed_form() {
        let d = ModelDescription::llama2_7b();
        let cm = CostModel {
            bytes_per_param: 0.5,
            ..CostModel::default()
        };
        let s = ReplacementSchedule::build(ScheduleKind::Next, 32).unwrap();
        let got = stored_bytes(&d, &s, TransformKind::G0, 0, &cm).unwrap();
        let full = 0.5 * d.total_params() as f64;
        assert_eq!(got, full - 14.0 * 3.0 * 4096.0 * 11008.0 * 0.5);
    }

    #[test]
    fn toy_matches_tensor_enumeration() {
        let cfg = ModelConfig::toy();
        let ws = init_model(&cfg).unwrap();
        let d = ModelDescription::from_config(&cfg);
        assert_eq!(d.total_params(), ws.named_tensors().iter().map(|(_, t)| t.numel()).sum::<usize>());
        let s = ReplacementSchedule::build(ScheduleKind::Back, cfg.n_layers).unwrap();
        for kind in TransformKind::ALL {
            let rec = init_recovery(kind, &s, &cfg, 4, 0).unwrap();
            let oracle: usize = ws
                .named_tensors()
                .iter()
                .filter(|(name, _)| {
                    !s.targets().iter().any(|l| name.starts_with(&format!("layer.{l}.mlp.")))
                })
                .map(|(_, t)| t.numel())
                .sum::<usize>()
                + rec.param_count();
            assert_eq!(stored_params(&d, &s, kind, 4).unwrap(), oracle, "{kind}");
        }
    }

    #[test]
    fn bandwidth_term_is_linear() {
        let d = ModelDescription::llama2_7b();
        let s = ReplacementSchedule::build(ScheduleKind::Next, 32).unwrap();
        let cm = CostModel::default();
        let fast = CostModel {
            load_bandwidth: 2.0 * cm.load_bandwidth,
            ..cm
        };
        let a = simulate_run(&d, &s, TransformKind::G0, 0, &cm).unwrap();
        let b = simulate_run(&d, &s, TransformKind::G0, 0, &fast).unwrap();
        let init = 18.0 * cm.per_layer_init_overhead;
        assert!(((a.load_init_time - init) / 2.0 - (b.load_init_time - init)).abs() < 1e-12);
    }

    #[test]
    fn savings_oracles() {
        let e = RunEstimate {
            load_init_time: 4.0,
            forward_time: 2.0,
            total_time: 6.0,
            stored_bytes: 10.0,
        };
        let s = savings_report(&e, &e).unwrap();
        assert_eq!((s.load_init, s.forward, s.total, s.model_size), (0.0, 0.0, 0.0, 0.0));
        let half = RunEstimate {
            load_init_time: 2.0,
            forward_time: 1.0,
            total_time: 3.0,
            stored_bytes: 5.0,
        };
        let s = savings_report(&e, &half).unwrap();
        assert_eq!((s.load_init, s.forward, s.total, s.model_size), (0.5, 0.5, 0.5, 0.5));
        let zero = RunEstimate { forward_time: 0.0, ..e };
        assert!(matches!(savings_report(&zero, &e), Err(LatencyError::DivisionByZero(_))));
        let table = format_table("base", &e, "shared", &half).unwrap();
        assert!(table.contains("Load & Init") && table.contains("Model size"));
        assert_eq!(table.lines().count(), 4);
    }

    #[test]
    fn savings_invariant_under_rate_scaling() {
        let d = ModelDescription::llama2_7b();
        let s = ReplacementSchedule::build(ScheduleKind::Back, 32).unwrap();
        let cm = CostModel::default();
        let run = |cm: &CostModel| {
            let b = simulate_run(&d, &ReplacementSchedule::empty(32), TransformKind::G0, 8, cm).unwrap();
            let x = simulate_run(&d, &s, TransformKind::G0, 8, cm).unwrap();
            savings_report(&b, &x).unwrap()
        };
        let (a, b) = (run(&cm), run(&cm.faster(3.0)));
        assert!((a.load_init - b.load_init).abs() < 1e-12);
        assert!((a.total - b.total).abs() < 1e-12);
        assert_eq!(a.model_size, b.model_size);
    }

    #[test]
    fn phone_calibration() {
        let d = ModelDescription::llama2_7b();
        let cm = calibrate(&d, &Calibration::phone_llama2_7b()).unwrap();
        let base = simulate_run(&d, &ReplacementSchedule::empty(32), TransformKind::G0, 0, &cm).unwrap();
        assert!((base.total_time - 12.699).abs() < 1e-9);
        assert!((base.stored_bytes - 4.04e9).abs() < 1.0);
        let next = ReplacementSchedule::build(ScheduleKind::Next, 32).unwrap();
        let shared = simulate_run(&d, &next, TransformKind::G0, 0, &cm).unwrap();
        let s = savings_report(&base, &shared).unwrap();
        assert!((0.10..0.60).contains(&s.load_init), "{s:?}");
        assert!((s.load_init - 0.42).abs() < 0.01, "{s:?}");
    }

    #[test]
    fn cost_model_validation() {
        let bad = CostModel {
            compute_rate: 0.0,
            ..CostModel::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"bytes_per_param":0.5,"load_bandwidth":1e9,"per_layer_init_overhead":0.1,"compute_rate":1e9,"lora_reconstruct_rate":1e9}"#;
        let cm: CostModel = serde_json::from_str(json).unwrap();
        assert_eq!(cm.overhead_bytes_per_layer, 0.0);
    }
}
