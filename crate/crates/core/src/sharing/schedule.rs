use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Result, SharingError};

/// Listings for a 32-layer model; every other depth is derived from these.
const LISTING_32: [(ScheduleKind, &str); 6] = [
    (
        ScheduleKind::Next,
        "(3:4),(5:6),(7:8),(9:10),(11:12),(13:14),(15:16),(17:18),(19:20),(21:22),(23:24),(25:26),(27:28),(29:30)",
    ),
    (
        ScheduleKind::Next2,
        "(3:4,5),(6:7,8),(9:10,11),(12:13,14),(15:16,17),(18:19,20),(21:22,23),(24:25,26),(27:28,29)",
    ),
    (
        ScheduleKind::Back,
        "(3:4),(5:6),(7:8),(9:10),(11:12),(13:14,15),(16:17..22),(23:24..30)",
    ),
    (
        ScheduleKind::Front,
        "(3:4..10),(11:12..17),(18:19,20),(21:22),(23:24),(25:26),(27:28),(29:30)",
    ),
    (ScheduleKind::More, "(3:4,5,6),(7:8..11),(13:14..22),(23:24..30)"),
    (ScheduleKind::Max, "(2:3..10),(11:12..20),(21:22..31)"),
];

/// Stored layer counts (of 32) behind the printed stored ratios.
pub fn reported_stored_layers(kind: ScheduleKind) -> Option<usize> {
    match kind {
        ScheduleKind::Next => Some(18),
        ScheduleKind::Next2 => Some(14),
        ScheduleKind::Back => Some(12),
        ScheduleKind::Front => Some(12),
        ScheduleKind::More => Some(8),
        ScheduleKind::Max => Some(5),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Next,
    Next2,
    Back,
    Front,
    More,
    Max,
    /// Consecutive block used by the layer-pruning baseline.
    Ori,
    Custom,
}

impl ScheduleKind {
    pub const BUILT_IN: [ScheduleKind; 7] = [
        ScheduleKind::Next,
        ScheduleKind::Next2,
        ScheduleKind::Back,
        ScheduleKind::Front,
        ScheduleKind::More,
        ScheduleKind::Max,
        ScheduleKind::Ori,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Next => "next",
            ScheduleKind::Next2 => "next2",
            ScheduleKind::Back => "back",
            ScheduleKind::Front => "front",
            ScheduleKind::More => "more",
            ScheduleKind::Max => "max",
            ScheduleKind::Ori => "ori",
            ScheduleKind::Custom => "custom",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = SharingError;

    fn from_str(s: &str) -> Result<Self> {
        let k = match s.to_ascii_lowercase().as_str() {
            "next" => ScheduleKind::Next,
            "next2" => ScheduleKind::Next2,
            "back" => ScheduleKind::Back,
            "front" => ScheduleKind::Front,
            "more" => ScheduleKind::More,
            "max" => ScheduleKind::Max,
            "ori" => ScheduleKind::Ori,
            "custom" => ScheduleKind::Custom,
            other => return Err(SharingError::UnknownKind(other.to_string())),
        };
        Ok(k)
    }
}

/// One reference layer and the contiguous run of layers predicted from it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Group {
    pub reference: usize,
    pub targets: Vec<usize>,
}

/// Reference set and target sets over layers `1..=n_layers`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct ReplacementSchedule {
    n_layers: usize,
    kind: ScheduleKind,
    groups: Vec<Group>,
}

#[derive(Serialize, Deserialize)]
struct RawSchedule {
    n_layers: usize,
    kind: ScheduleKind,
    listing: String,
}

impl TryFrom<RawSchedule> for ReplacementSchedule {
    type Error = SharingError;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        let mut s = ReplacementSchedule::parse(&raw.listing, raw.n_layers)?;
        s.kind = raw.kind;
        Ok(s)
    }
}

impl From<ReplacementSchedule> for RawSchedule {
    fn from(s: ReplacementSchedule) -> Self {
        RawSchedule {
            n_layers: s.n_layers,
            kind: s.kind,
            listing: s.to_listing(),
        }
    }
}

impl ReplacementSchedule {
    /// A custom schedule, validated.
    pub fn new(n_layers: usize, groups: Vec<Group>) -> Result<Self> {
        let s = Self {
            n_layers,
            kind: ScheduleKind::Custom,
            groups,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(n_layers: usize) -> Self {
        Self {
            n_layers,
            kind: ScheduleKind::Custom,
            groups: Vec::new(),
        }
    }

    /// Built-in schedule for an `n_layers`-deep model.
    pub fn build(kind: ScheduleKind, n_layers: usize) -> Result<Self> {
        if n_layers < 6 {
            return Err(SharingError::TooFewLayers(n_layers));
        }
        let groups = match kind {
            ScheduleKind::Custom => return Err(SharingError::CustomNeedsListing),
            ScheduleKind::Next => (3..)
                .step_by(2)
                .take_while(|j| j + 1 <= n_layers - 2)
                .map(|j| Group {
                    reference: j,
                    targets: vec![j + 1],
                })
                .collect(),
            ScheduleKind::Next2 => (1..)
                .map(|t| 3 * t)
                .take_while(|j| j + 2 <= n_layers - 2)
                .map(|j| Group {
                    reference: j,
                    targets: vec![j + 1, j + 2],
                })
                .collect(),
            ScheduleKind::Ori => {
                let x = Self::build(ScheduleKind::Next, n_layers)?.target_count();
                if x == 0 {
                    Vec::new()
                } else {
                    let last = n_layers - 2;
                    let first = last + 1 - x;
                    vec![Group {
                        reference: first - 1,
                        targets: (first..=last).collect(),
                    }]
                }
            }
            _ => {
                let listing = LISTING_32
                    .iter()
                    .find(|(k, _)| *k == kind)
                    .map(|(_, l)| *l)
                    .expect("every listed kind has a 32-layer listing");
                let base = Self::parse(listing, 32)?;
                if n_layers == 32 {
                    base.groups
                } else {
                    rescale(&base, n_layers)
                }
            }
        };
        let s = Self {
            n_layers,
            kind,
            groups,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_layers;
        let mut last_ref: Option<usize> = None;
        let mut last_target = 0usize;
        for g in &self.groups {
            let j = g.reference;
            if j == 0 || j > n {
                return Err(SharingError::LayerOutOfRange { layer: j, n_layers: n });
            }
            if let Some(prev) = last_ref {
                if j < prev + 2 {
                    return Err(SharingError::ReferenceGap { prev, next: j });
                }
            }
            if j <= last_target {
                return Err(SharingError::Overlap { layer: j });
            }
            if g.targets.is_empty() {
                return Err(SharingError::EmptyTargets { reference: j });
            }
            for (k, &t) in g.targets.iter().enumerate() {
                if t != j + 1 + k {
                    return Err(SharingError::NotContiguous { reference: j, target: t });
                }
                if t > n {
                    return Err(SharingError::LayerOutOfRange { layer: t, n_layers: n });
                }
            }
            last_ref = Some(j);
            last_target = *g.targets.last().expect("non-empty");
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn references(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.reference).collect()
    }

    /// Every target layer, ascending.
    pub fn targets(&self) -> Vec<usize> {
        self.groups.iter().flat_map(|g| g.targets.iter().copied()).collect()
    }

    pub fn target_count(&self) -> usize {
        self.groups.iter().map(|g| g.targets.len()).sum()
    }

    pub fn reference_of(&self, layer: usize) -> Option<usize> {
        self.groups
            .iter()
            .find(|g| g.targets.contains(&layer))
            .map(|g| g.reference)
    }

    pub fn is_target(&self, layer: usize) -> bool {
        self.reference_of(layer).is_some()
    }

    /// Layers whose MLP weights stay in storage.
    pub fn stored_layers(&self) -> Vec<usize> {
        (1..=self.n_layers).filter(|&l| !self.is_target(l)).collect()
    }

    /// Layers that are neither a reference nor a target.
    pub fn unscheduled_layers(&self) -> Vec<usize> {
        let refs = self.references();
        (1..=self.n_layers)
            .filter(|l| !refs.contains(l) && !self.is_target(*l))
            .collect()
    }

    /// `(N − X) / N`.
    pub fn stored_ratio(&self) -> f64 {
        (self.n_layers - self.target_count()) as f64 / self.n_layers as f64
    }

    /// Parse `(j:t1,t2,…)` groups; `a..b` abbreviates an inclusive run.
    pub fn parse(text: &str, n_layers: usize) -> Result<Self> {
        let bad = |m: &str| SharingError::Parse(format!("{m} in {text:?}"));
        let mut groups = Vec::new();
        let mut rest = text.trim();
        while !rest.is_empty() {
            rest = rest.strip_prefix('(').ok_or_else(|| bad("expected '('"))?;
            let close = rest.find(')').ok_or_else(|| bad("missing ')'"))?;
            let body = &rest[..close];
            rest = rest[close + 1..].trim_start();
            rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();

            let (j, ts) = body.split_once(':').ok_or_else(|| bad("missing ':'"))?;
            let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(&format!("bad layer {:?}", s.trim())));
            let reference = num(j)?;
            let mut targets = Vec::new();
            for part in ts.split(',') {
                if let Some((a, b)) = part.split_once("..") {
                    let (a, b) = (num(a)?, num(b)?);
                    if b < a {
                        return Err(bad("descending range"));
                    }
                    targets.extend(a..=b);
                } else {
                    targets.push(num(part)?);
                }
            }
            groups.push(Group { reference, targets });
        }
        Self::new(n_layers, groups)
    }

    /// Canonical listing; runs longer than two are written `a..b`.
    pub fn to_listing(&self) -> String {
        self.groups
            .iter()
            .map(|g| {
                let (first, last) = (g.targets[0], *g.targets.last().expect("non-empty"));
                let ts = if g.targets.len() > 2 {
                    format!("{first}..{last}")
                } else {
                    g.targets.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
                };
                format!("({}:{ts})", g.reference)
            })
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Same listing with every target written out.
    pub fn to_listing_expanded(&self) -> String {
        self.groups
            .iter()
            .map(|g| {
                let ts: Vec<String> = g.targets.iter().map(usize::to_string).collect();
                format!("({}:{})", g.reference, ts.join(","))
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl fmt::Display for ReplacementSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_listing())
    }
}

/// Carry a 32-layer pattern to depth `n`: layer `i` takes the role of the
/// 32-layer index whose cell contains the centre of `i`'s cell, i.e.
/// `⌊(2i − 1)·16 / n⌋ + 1`. Layers 1, 2 and `n` are never targets, as in
/// every listing. Each maximal run of targets is predicted from the layer
/// just before it.
fn rescale(base: &ReplacementSchedule, n: usize) -> Vec<Group> {
    let is_target: Vec<bool> = (1..=n)
        .map(|i| i >= 3 && i < n && base.is_target((2 * i - 1) * 16 / n + 1))
        .collect();
    let mut groups: Vec<Group> = Vec::new();
    for i in 1..=n {
        if !is_target[i - 1] {
            continue;
        }
        match groups.last_mut() {
            Some(g) if *g.targets.last().expect("non-empty") + 1 == i => g.targets.push(i),
            _ => groups.push(Group {
                reference: i - 1,
                targets: vec![i],
            }),
        }
    }
    groups
}
