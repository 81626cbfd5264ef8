//! Diagnostics on a trained model: direct replacement of one MLP by
//! another, relative distance between adjacent layers' weights, and
//! single-layer zero-out sensitivity.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{perplexity, MlpProj, ModelError, WeightStore};
use crate::sharing::{replace_view, LayerPlan, SharedModelView, SharingError};

pub const PROBE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("reference {reference} must precede target {target}")]
    Order { reference: usize, target: usize },
    #[error("layer {layer} outside 1..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sharing(#[from] SharingError),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Replace,
    RelativeError,
    ZeroOut,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Replace => "replace",
            ProbeKind::RelativeError => "relative_error",
            ProbeKind::ZeroOut => "zero_out",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub reference: Option<usize>,
    pub layer: usize,
    pub metric: String,
    pub value: f64,
    /// Change against the baseline; positive means worse.
    pub delta: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub schema_version: u32,
    pub kind: ProbeKind,
    pub baseline: f64,
    pub rows: Vec<ProbeRow>,
    /// Aggregates, e.g. per-projection means.
    pub summary: BTreeMap<String, f64>,
    pub config: serde_json::Value,
}

impl ProbeReport {
    fn new(kind: ProbeKind, baseline: f64, config: serde_json::Value) -> Self {
        Self {
            schema_version: PROBE_SCHEMA_VERSION,
            kind,
            baseline,
            rows: Vec::new(),
            summary: BTreeMap::new(),
            config,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let opt = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
        w.write_record(["schema_version", "kind", "reference", "layer", "metric", "value", "delta", "note"])
            .expect("in-memory csv");
        let kind = self.kind.name();
        w.write_record([
            self.schema_version.to_string(),
            kind.to_string(),
            String::new(),
            String::new(),
            "baseline".to_string(),
            format!("{:e}", self.baseline),
            String::new(),
            String::new(),
        ])
        .expect("in-memory csv");
        for r in &self.rows {
            w.write_record([
                self.schema_version.to_string(),
                kind.to_string(),
                opt(r.reference),
                r.layer.to_string(),
                r.metric.clone(),
                format!("{:e}", r.value),
                r.delta.map_or(String::new(), |d| format!("{d:e}")),
                r.note.clone().unwrap_or_default(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }

    /// Write `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        for (ext, body) in [("json", self.to_json()), ("csv", self.to_csv())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| ProbeError::Io {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }
}

fn check_layer(ws: &WeightStore, l: usize) -> Result<()> {
    if l == 0 || l > ws.n_layers() {
        return Err(ProbeError::LayerOutOfRange {
            layer: l,
            n_layers: ws.n_layers(),
        });
    }
    Ok(())
}

fn replaced_ppl(base: &WeightStore, reference: usize, target: usize, docs: &[Vec<u32>]) -> Result<f64> {
    Ok(perplexity(&replace_view(base, reference, target)?, docs)?)
}

/// Perplexity with layer `target`'s MLP replaced by layer `reference`'s.
pub fn replace_probe(base: &WeightStore, reference: usize, target: usize, docs: &[Vec<u32>]) -> Result<f64> {
    if reference >= target {
        return Err(ProbeError::Order { reference, target });
    }
    check_layer(base, reference)?;
    check_layer(base, target)?;
    replaced_ppl(base, reference, target, docs)
}

fn boundary_note(base: &WeightStore, reference: usize, target: usize) -> Option<String> {
    let n = base.n_layers();
    match (reference == 1, target == n) {
        (true, true) => Some("boundary: first and last layer".into()),
        (true, false) => Some("boundary: first layer".into()),
        (false, true) => Some("boundary: last layer".into()),
        _ => None,
    }
}

/// [`replace_probe`] over many `(reference, target)` pairs.
pub fn replace_sweep(base: &WeightStore, pairs: &[(usize, usize)], docs: &[Vec<u32>]) -> Result<ProbeReport> {
    let baseline = perplexity(base, docs)?;
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(j, l)| replace_probe(base, j, l, docs))
        .collect::<Result<_>>()?;
    let mut report = ProbeReport::new(ProbeKind::Replace, baseline, serde_json::json!({ "pairs": pairs }));
    for (&(j, l), v) in pairs.iter().zip(values) {
        report.rows.push(ProbeRow {
            reference: Some(j),
            layer: l,
            metric: "ppl".into(),
            value: v,
            delta: Some(v - baseline),
            note: boundary_note(base, j, l),
        });
    }
    Ok(report)
}

/// `(i, i + 1)` for every layer but the last.
pub fn adjacent_pairs(n_layers: usize) -> Vec<(usize, usize)> {
    (1..n_layers).map(|i| (i, i + 1)).collect()
}

/// `‖Θ_{i+1} − Θ_i‖_F / ‖Θ_i‖_F` for `i = 1..N−1`, and their mean.
pub fn adjacent_relative_error(ws: &WeightStore, proj: MlpProj) -> (Vec<f64>, f64) {
    let ratios: Vec<f64> = ws
        .layers
        .windows(2)
        .map(|w| {
            let a = w[0].mlp.get(proj);
            let b = w[1].mlp.get(proj);
            let diff = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (y as f64 - x as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            diff / a.frobenius_norm()
        })
        .collect();
    let mean = if ratios.is_empty() {
        0.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    (ratios, mean)
}

/// All three projections, plus the mean of their means as `combined`,
/// which is also the report's baseline.
pub fn relative_error_report(ws: &WeightStore) -> ProbeReport {
    let mut rows = Vec::new();
    let mut summary = BTreeMap::new();
    for proj in MlpProj::ALL {
        let (ratios, mean) = adjacent_relative_error(ws, proj);
        for (i, v) in ratios.into_iter().enumerate() {
            rows.push(ProbeRow {
                reference: Some(i + 1),
                layer: i + 2,
                metric: proj.name().into(),
                value: v,
                delta: None,
                note: None,
            });
        }
        summary.insert(format!("mean.{}", proj.name()), mean);
    }
    let combined = summary.values().sum::<f64>() / 3.0;
    summary.insert("combined".into(), combined);
    let mut report = ProbeReport::new(ProbeKind::RelativeError, combined, serde_json::json!({ "norm": "frobenius" }));
    report.rows = rows;
    report.summary = summary;
    report
}

/// Layers the zero-out probe visits by default: all but the first.
pub fn default_zero_out_layers(n_layers: usize) -> Vec<usize> {
    (2..=n_layers).collect()
}

fn zeroed_ppl(base: &WeightStore, layer: usize, docs: &[Vec<u32>]) -> Result<f64> {
    let mut plan = vec![LayerPlan::Own; base.n_layers()];
    plan[layer - 1] = LayerPlan::Dropped;
    Ok(perplexity(&SharedModelView::with_plan(base, plan)?, docs)?)
}

/// Perplexity change when one layer's MLP is removed; positive means worse.
/// `None` visits [`default_zero_out_layers`].
pub fn zero_out_sensitivity(base: &WeightStore, docs: &[Vec<u32>], layers: Option<&[usize]>) -> Result<ProbeReport> {
    let default = default_zero_out_layers(base.n_layers());
    let layers = layers.unwrap_or(&default);
    for &l in layers {
        check_layer(base, l)?;
    }
    let baseline = perplexity(base, docs)?;
    let values: Vec<f64> = layers
        .par_iter()
        .map(|&l| zeroed_ppl(base, l, docs))
        .collect::<Result<_>>()?;
    let mut config = serde_json::json!({ "layers": layers });
    if !layers.contains(&1) {
        config["note"] = "layer 1 skipped: removing it is catastrophic".into();
    }
    let mut report = ProbeReport::new(ProbeKind::ZeroOut, baseline, config);
    for (&l, v) in layers.iter().zip(values) {
        report.rows.push(ProbeRow {
            reference: None,
            layer: l,
            metric: "ppl".into(),
            value: v,
            delta: Some(v - baseline),
            note: None,
        });
    }
    Ok(report)
}
