use serde::{Deserialize, Serialize};

use super::schedule::{reported_stored_layers, ReplacementSchedule, ScheduleKind};
use super::transform::TransformKind;

/// Additional parameters per unit of rank for one `d1 × d2` projection.
pub fn params_per_rank(kind: TransformKind, d1: usize, d2: usize) -> usize {
    match kind {
        TransformKind::G0 => d1 + d2,
        TransformKind::G1 => d1 + 3 * d2,
        TransformKind::G2 => 3 * d1 + d2,
        TransformKind::G3 => 2 * (d1 + d2),
    }
}

/// Rank giving `kind` the same budget as `G0` at rank `r0`, rounded to
/// nearest with ties up, never below 1.
pub fn matched_rank(kind: TransformKind, r0: usize, d1: usize, d2: usize) -> usize {
    let num = r0 * (d1 + d2);
    let den = params_per_rank(kind, d1, d2);
    ((2 * num + den) / (2 * den)).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionRatio {
    pub exact: f64,
    /// `1 − X/N + X·r·c` with `c` rounded to one significant figure.
    pub linearized: f64,
    pub coefficient: f64,
}

impl CompressionRatio {
    pub fn relative_gap(&self) -> f64 {
        (self.exact - self.linearized).abs() / self.exact
    }
}

fn one_sig_fig(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let e = x.abs().log10().floor();
    let p = 10f64.powf(e);
    (x / p).round() * p
}

/// MLP parameters kept, as a fraction of the original, for `x` of `n`
/// layers predicted at rank `r`.
pub fn compression_ratio_for(x: usize, n: usize, kind: TransformKind, r: usize, d1: usize, d2: usize) -> CompressionRatio {
    let (x, n) = (x as f64, n as f64);
    let per_layer = (r * params_per_rank(kind, d1, d2)) as f64 / (d1 * d2) as f64;
    let exact = (n - x) / n + x / n * per_layer;
    let coefficient = one_sig_fig(params_per_rank(kind, d1, d2) as f64 / (n * (d1 * d2) as f64));
    CompressionRatio {
        exact,
        linearized: 1.0 - x / n + x * r as f64 * coefficient,
        coefficient,
    }
}

pub fn compression_ratio(
    schedule: &ReplacementSchedule,
    kind: TransformKind,
    r: usize,
    d1: usize,
    d2: usize,
) -> CompressionRatio {
    compression_ratio_for(schedule.target_count(), schedule.n_layers(), kind, r, d1, d2)
}

/// Stored ratio as computed from the listing next to the printed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleAudit {
    pub kind: ScheduleKind,
    pub n_layers: usize,
    pub listing: String,
    pub targets: usize,
    pub stored_ratio: f64,
    pub stored_percent: u32,
    /// Stored layers claimed by the replacement-type table (32 layers only).
    pub reported_stored_layers: Option<usize>,
    pub reported_percent: Option<u32>,
    pub unscheduled: Vec<usize>,
    /// Set when the listing and the printed ratio disagree.
    pub discrepancy: Option<String>,
}

impl ScheduleAudit {
    /// Target count implied by the table, falling back to the listing.
    pub fn nominal_targets(&self) -> usize {
        self.reported_stored_layers
            .map_or(self.targets, |stored| self.n_layers - stored)
    }
}

fn percent(x: f64) -> u32 {
    (x * 100.0).round() as u32
}

pub fn audit(schedule: &ReplacementSchedule) -> ScheduleAudit {
    let n = schedule.n_layers();
    let tau = schedule.stored_ratio();
    let stored_percent = percent(tau);
    let reported = if n == 32 {
        reported_stored_layers(schedule.kind())
    } else {
        None
    };
    let reported_percent = reported.map(|k| percent(k as f64 / n as f64));
    // Gaps between groups; layers before the first reference or after the
    // last target are the skipped boundary.
    let span = schedule
        .groups()
        .first()
        .zip(schedule.groups().last())
        .map(|(a, b)| (a.reference, *b.targets.last().expect("non-empty")));
    let unscheduled: Vec<usize> = schedule
        .unscheduled_layers()
        .into_iter()
        .filter(|&l| span.is_some_and(|(lo, hi)| l > lo && l < hi))
        .collect();
    let stored = n - schedule.target_count();
    let discrepancy = match reported {
        Some(k) if k != stored => Some(format!(
            "listing stores {stored} of {n} layers ({stored_percent}%), table reports {k} ({}%); layers {:?} are neither reference nor target",
            reported_percent.unwrap_or_default(),
            unscheduled
        )),
        _ => None,
    };
    ScheduleAudit {
        kind: schedule.kind(),
        n_layers: n,
        listing: schedule.to_listing(),
        targets: schedule.target_count(),
        stored_ratio: tau,
        stored_percent,
        reported_stored_layers: reported,
        reported_percent,
        unscheduled,
        discrepancy,
    }
}
