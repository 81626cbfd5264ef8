//! JSON-configured pipeline commands: pretrain, plan, slw, sft, eval,
//! probe and latency. Every command is a pure function of its config and
//! input files; reports carry a config echo and input hashes, never a
//! timestamp.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data::{load_and_tokenize, split, Corpus, DataError};
use crate::derive_seed;
use crate::latency::{
    calibrate, savings_report, simulate_run, stored_params, Calibration, CostModel, LatencyError, ModelDescription,
};
use crate::model::{init_model, load_checkpoint, perplexity, pretrain, save_checkpoint, ModelConfig, ModelError, PretrainConfig, WeightStore};
use crate::probes::{adjacent_pairs, relative_error_report, replace_sweep, zero_out_sensitivity, ProbeError, ProbeReport};
use crate::recovery::{capture_activations, sft, slw_all, write_loss_csv, RecoveryError, SftConfig, SlwConfig};
use crate::sharing::{
    audit, compression_ratio, direct_sharing_view, drop_view, init_recovery, materialize_view, matched_rank,
    RecoveryParams, ReplacementSchedule, ScheduleKind, SharingError, TransformKind,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing prerequisite {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Latency(#[from] LatencyError),
}

impl CliError {
    /// Stable machine-readable error class.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingArtifact(_) => "missing-artifact",
            CliError::Io { .. } => "io",
            CliError::Data(_) => "data",
            CliError::Model(_) => "model",
            CliError::Sharing(_) => "sharing",
            CliError::Recovery(_) => "recovery",
            CliError::Probe(_) => "probe",
            CliError::Latency(_) => "latency",
        }
    }

    /// `error: <code>: <message>` on a single line.
    pub fn one_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error: {}: {}", self.code(), msg)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Which model's dimensions `plan` and `latency` account for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetModel {
    /// The configured toy model.
    #[default]
    Toy,
    Llama2_7b,
}

/// Built-in kind name or `custom=FILE`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScheduleSpec {
    Kind(ScheduleKind),
    Custom(PathBuf),
}

impl FromStr for ScheduleSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("custom=") {
            if path.is_empty() {
                return Err(CliError::Config("custom schedule needs a file: custom=FILE".into()));
            }
            return Ok(ScheduleSpec::Custom(PathBuf::from(path)));
        }
        match s.parse::<ScheduleKind>()? {
            ScheduleKind::Custom => Err(CliError::Config("custom schedule needs a file: custom=FILE".into())),
            k => Ok(ScheduleSpec::Kind(k)),
        }
    }
}

impl TryFrom<String> for ScheduleSpec {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: CliError| e.to_string())
    }
}

impl From<ScheduleSpec> for String {
    fn from(s: ScheduleSpec) -> String {
        s.to_string()
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleSpec::Kind(k) => write!(f, "{}", k.name()),
            ScheduleSpec::Custom(p) => write!(f, "custom={}", p.display()),
        }
    }
}

/// One experiment. Stage-level `seed` fields are recomputed from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub corpus: PathBuf,
    pub eval_fraction: f64,
    pub pretrain: PretrainConfig,
    pub schedule: ScheduleSpec,
    pub kind: TransformKind,
    pub rank: usize,
    /// When set, the rank is `matched_rank(kind, base, d1, d2)`.
    pub matched_rank_base: Option<usize>,
    pub slw: SlwConfig,
    pub sft: SftConfig,
    /// Fine-tune freshly initialised factors without the warmup stage.
    pub only_sft: bool,
    /// Also fine-tune the layer-dropping baseline with the same budget.
    pub drop_baseline: bool,
    pub target_model: TargetModel,
    pub cost_model: Option<PathBuf>,
    /// Latency without recovery factors.
    pub no_lora: bool,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            model: ModelConfig::toy(),
            corpus: PathBuf::from("corpus.txt"),
            eval_fraction: 0.01,
            pretrain: PretrainConfig::default(),
            schedule: ScheduleSpec::Kind(ScheduleKind::Next),
            kind: TransformKind::G0,
            rank: 8,
            matched_rank_base: None,
            slw: SlwConfig::default(),
            sft: SftConfig::default(),
            only_sft: false,
            drop_baseline: true,
            target_model: TargetModel::Toy,
            cost_model: None,
            no_lora: false,
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

/// Command-line flags layered over a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub only_sft: bool,
    pub full_lora: bool,
    pub rank: Option<usize>,
    pub kind: Option<TransformKind>,
    pub schedule: Option<ScheduleSpec>,
    pub no_lora: bool,
}

mod tag {
    pub const MODEL: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const CAPTURE: u64 = 4;
    pub const SLW: u64 = 5;
    pub const SFT: u64 = 6;
    pub const RECOVERY_INIT: u64 = 7;
    pub const DROP_INIT: u64 = 8;
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out_dir = p.clone();
        }
        self.only_sft |= o.only_sft;
        self.sft.full_lora |= o.full_lora;
        if let Some(r) = o.rank {
            self.rank = r;
            self.matched_rank_base = None;
        }
        if let Some(k) = o.kind {
            self.kind = k;
        }
        if let Some(s) = &o.schedule {
            self.schedule = s.clone();
        }
        self.no_lora |= o.no_lora;
        self
    }

    /// Derived stage seeds filled in; the form that is echoed in reports.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.seed = derive_seed(self.seed, tag::MODEL);
        c.pretrain.seed = derive_seed(self.seed, tag::PRETRAIN);
        c.slw.seed = derive_seed(self.seed, tag::SLW);
        c.sft.seed = derive_seed(self.seed, tag::SFT);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.slw.validate()?;
        self.sft.validate()?;
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(CliError::Config(format!("eval_fraction {} outside (0, 1)", self.eval_fraction)));
        }
        if self.rank == 0 && self.matched_rank_base.is_none() {
            return Err(CliError::Config("rank must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_rank(&self) -> usize {
        match self.matched_rank_base {
            Some(r0) => matched_rank(self.kind, r0, self.model.d_model, self.model.d_hidden),
            None => self.rank,
        }
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

pub mod artifacts {
    pub const CHECKPOINT: &str = "base.shrp";
    pub const SLW: &str = "recovery_slw.shrq";
    pub const SFT: &str = "recovery_sft.shrq";
    pub const ONLY_SFT: &str = "recovery_only_sft.shrq";
    pub const DROP: &str = "recovery_drop.shrq";
}

/// What every command writes as `<command>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub config: ExperimentConfig,
    /// Input file name to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 over the sorted `name=hash` lines of `inputs`.
    pub inputs_hash: String,
    pub result: serde_json::Value,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Run {
    cfg: ExperimentConfig,
    command: &'static str,
    inputs: BTreeMap<String, String>,
}

impl Run {
    fn new(cfg: &ExperimentConfig, command: &'static str) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
        Ok(Self {
            cfg,
            command,
            inputs: BTreeMap::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(CliError::MissingArtifact(path.to_path_buf()));
        }
        let hash = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    fn corpus(&mut self) -> Result<(Corpus, Corpus)> {
        let path = self.cfg.corpus.clone();
        self.input(&path)?;
        let corpus = load_and_tokenize(&path)?;
        Ok(split(&corpus, self.cfg.eval_fraction, derive_seed(self.cfg.seed, tag::SPLIT))?)
    }

    fn checkpoint(&mut self) -> Result<WeightStore> {
        let path = self.cfg.artifact(artifacts::CHECKPOINT);
        self.input(&path)?;
        let ws = load_checkpoint(&path)?;
        let (want, got) = (self.cfg.model, ws.config);
        let unseeded = |c: ModelConfig| ModelConfig { seed: 0, ..c };
        if unseeded(want) != unseeded(got) {
            return Err(CliError::Config(format!(
                "checkpoint {} was built for a different model config",
                path.display()
            )));
        }
        Ok(ws)
    }

    fn recovery(&mut self, name: &str, schedule: &ReplacementSchedule) -> Result<RecoveryParams> {
        let path = self.cfg.artifact(name);
        self.input(&path)?;
        let rec = RecoveryParams::load(&path)?;
        if rec.schedule != *schedule || rec.kind != self.cfg.kind || rec.rank != self.cfg.effective_rank() {
            return Err(CliError::Config(format!(
                "{} holds {} / {} / r={} but the config asks for {} / {} / r={}",
                path.display(),
                rec.schedule.kind().name(),
                rec.kind,
                rec.rank,
                self.cfg.schedule,
                self.cfg.kind,
                self.cfg.effective_rank()
            )));
        }
        Ok(rec)
    }

    fn schedule(&mut self, n_layers: usize) -> Result<ReplacementSchedule> {
        match self.cfg.schedule.clone() {
            ScheduleSpec::Kind(k) => Ok(ReplacementSchedule::build(k, n_layers)?),
            ScheduleSpec::Custom(path) => {
                self.input(&path)?;
                let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                Ok(ReplacementSchedule::parse(&text, n_layers)?)
            }
        }
    }

    fn write(&self, name: &str, body: &str) -> Result<()> {
        let path = self.cfg.artifact(name);
        std::fs::write(&path, body).map_err(|e| io_err(&path, e))
    }

    fn finish(self, result: serde_json::Value) -> Result<Report> {
        let mut h = Sha256::new();
        for (k, v) in &self.inputs {
            h.update(format!("{k}={v}\n"));
        }
        let report = Report {
            schema_version: REPORT_SCHEMA_VERSION,
            command: self.command.to_string(),
            config: self.cfg.clone(),
            inputs: self.inputs.clone(),
            inputs_hash: hex::encode(h.finalize()),
            result,
        };
        self.write(&format!("{}.json", self.command), &report.to_json())?;
        Ok(report)
    }
}

fn docs(c: &Corpus) -> &[Vec<u32>] {
    &c.sequences
}

/// Train the toy model and record its held-out perplexity `P0`.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<Report> {
    let mut run = Run::new(cfg, "pretrain")?;
    let (train, eval) = run.corpus()?;
    let mut ws = init_model(&run.cfg.model)?;
    let untrained = perplexity(&ws, docs(&eval))?;
    let trace = pretrain(&mut ws, &train, &run.cfg.pretrain)?;
    let p0 = perplexity(&ws, docs(&eval))?;
    save_checkpoint(&ws, run.cfg.artifact(artifacts::CHECKPOINT))?;
    write_loss_csv(run.cfg.artifact("pretrain_loss.csv"), &trace.losses)?;
    let result = json!({
        "params": ws.param_count(),
        "train_sequences": train.len(),
        "eval_sequences": eval.len(),
        "train_tokens": train.token_count(),
        "eval_tokens": eval.token_count(),
        "steps": trace.losses.len(),
        "final_loss": trace.losses.last(),
        "untrained_ppl": untrained,
        "baseline_ppl": p0,
        "checkpoint": artifacts::CHECKPOINT,
        "checkpoint_sha256": sha256_file(&run.cfg.artifact(artifacts::CHECKPOINT))?,
    });
    run.finish(result)
}

fn plan_dims(cfg: &ExperimentConfig) -> (ModelDescription, usize) {
    match cfg.target_model {
        TargetModel::Toy => (ModelDescription::from_config(&cfg.model), cfg.model.n_layers),
        TargetModel::Llama2_7b => (ModelDescription::llama2_7b(), 32),
    }
}

/// Schedule listing, stored ratio, compression ratio and matched ranks.
pub fn cmd_plan(cfg: &ExperimentConfig) -> Result<Report> {
    let mut run = Run::new(cfg, "plan")?;
    let (desc, n) = plan_dims(&run.cfg);
    let schedule = run.schedule(n)?;
    let (d1, d2) = (desc.d_model, desc.d_hidden);
    let kind = run.cfg.kind;
    let r = match run.cfg.matched_rank_base {
        Some(r0) => matched_rank(kind, r0, d1, d2),
        None => run.cfg.rank,
    };
    let cr = compression_ratio(&schedule, kind, r, d1, d2);
    let base = run.cfg.matched_rank_base.unwrap_or(run.cfg.rank);
    let matched: BTreeMap<String, usize> = TransformKind::ALL
        .iter()
        .map(|&k| (k.name().to_string(), matched_rank(k, base, d1, d2)))
        .collect();
    let a = audit(&schedule);
    let listing = schedule.to_listing();
    run.write("plan.txt", &format!("{listing}\n"))?;
    let result = json!({
        "model": desc,
        "listing": listing,
        "listing_expanded": schedule.to_listing_expanded(),
        "targets": schedule.targets(),
        "stored_layers": schedule.stored_layers(),
        "stored_ratio": schedule.stored_ratio(),
        "audit": a,
        "kind": kind,
        "rank": r,
        "compression_ratio": cr,
        "stored_params": stored_params(&desc, &schedule, kind, r)?,
        "total_params": desc.total_params(),
        "matched_rank_base": base,
        "matched_ranks": matched,
    });
    run.finish(result)
}

/// Warm up every target from freshly initialised factors.
pub fn cmd_slw(cfg: &ExperimentConfig) -> Result<Report> {
    let mut run = Run::new(cfg, "slw")?;
    let ws = run.checkpoint()?;
    let (train, _) = run.corpus()?;
    let schedule = run.schedule(ws.n_layers())?;
    let r = run.cfg.effective_rank();
    let init = init_recovery(run.cfg.kind, &schedule, &ws.config, r, derive_seed(run.cfg.seed, tag::RECOVERY_INIT))?;
    let cache = capture_activations(&ws, &schedule.targets(), &train, run.cfg.slw.q, derive_seed(run.cfg.seed, tag::CAPTURE))?;
    let (rec, summaries) = slw_all(&ws, &init, &cache, &run.cfg.slw, true)?;
    rec.save(run.cfg.artifact(artifacts::SLW))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "step", "loss"]).expect("in-memory csv");
    for s in &summaries {
        for (i, l) in s.trace.iter().enumerate() {
            w.write_record([s.layer.to_string(), i.to_string(), format!("{l:e}")]).expect("in-memory csv");
        }
    }
    run.write("slw_loss.csv", &String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8"))?;

    let layers: Vec<_> = summaries
        .iter()
        .map(|s| {
            json!({
                "layer": s.layer,
                "reference": s.reference,
                "rows": s.rows,
                "steps": s.trace.len(),
                "initial_loss": s.initial_loss,
                "final_loss": s.final_loss,
            })
        })
        .collect();
    let result = json!({
        "schedule": schedule.to_listing(),
        "rank": r,
        "captured_sequences": cache.sequences,
        "recovery_params": rec.param_count(),
        "layers": layers,
        "recovery": artifacts::SLW,
        "recovery_sha256": sha256_file(&run.cfg.artifact(artifacts::SLW))?,
    });
    run.finish(result)
}

/// Fine-tune the warmed-up factors (or fresh ones with `only_sft`) and,
/// if enabled, the layer-dropping baseline with the same budget.
pub fn cmd_sft(cfg: &ExperimentConfig) -> Result<Report> {
    let mut run = Run::new(cfg, "sft")?;
    let ws = run.checkpoint()?;
    let schedule = run.schedule(ws.n_layers())?;
    let r = run.cfg.effective_rank();
    let mut rec = if run.cfg.only_sft {
        init_recovery(run.cfg.kind, &schedule, &ws.config, r, derive_seed(run.cfg.seed, tag::RECOVERY_INIT))?
    } else {
        run.recovery(artifacts::SLW, &schedule)?
    };
    let (train, _) = run.corpus()?;
    let sft_cfg = run.cfg.sft;
    let report = sft(&ws, &mut rec, &train, &sft_cfg)?;
    let out_name = if run.cfg.only_sft { artifacts::ONLY_SFT } else { artifacts::SFT };
    rec.save(run.cfg.artifact(out_name))?;
    write_loss_csv(run.cfg.artifact("sft_loss.csv"), &report.losses)?;
    let mut result = json!({
        "label": if run.cfg.only_sft { "SHARP (only SFT)" } else { "SHARP" },
        "steps": report.steps,
        "warmup_steps": report.warmup_steps,
        "first_loss": report.losses.first(),
        "final_loss": report.losses.last(),
        "recovery_params": rec.param_count(),
        "recovery": out_name,
        "recovery_sha256": sha256_file(&run.cfg.artifact(out_name))?,
    });
    if run.cfg.drop_baseline {
        let mut drop = RecoveryParams::drop_baseline(&schedule, &ws.config, r, derive_seed(run.cfg.seed, tag::DROP_INIT))?;
        let dr = sft(&ws, &mut drop, &train, &sft_cfg)?;
        drop.save(run.cfg.artifact(artifacts::DROP))?;
        write_loss_csv(run.cfg.artifact("sft_drop_loss.csv"), &dr.losses)?;
        result["drop_baseline"] = json!({
            "steps": dr.steps,
            "final_loss": dr.losses.last(),
            "recovery": artifacts::DROP,
            "recovery_sha256": sha256_file(&run.cfg.artifact(artifacts::DROP))?,
        });
    }
    run.finish(result)
}

/// One row of the perplexity table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub ppl: f64,
    pub relative_to_base: f64,
}

/// Held-out perplexity of every variant whose artifacts exist.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Report> {
    let mut run = Run::new(cfg, "eval")?;
    let ws = run.checkpoint()?;
    let (_, eval) = run.corpus()?;
    let schedule = run.schedule(ws.n_layers())?;
    let d = docs(&eval);
    let p0 = perplexity(&ws, d)?;
    let mut rows = vec![("Original", p0)];
    rows.push(("Direct sharing", perplexity(&direct_sharing_view(&ws, &schedule)?, d)?));
    rows.push(("LayerPruning (drop)", perplexity(&drop_view(&ws, &schedule)?, d)?));
    let exists = |run: &Run, name: &str| run.cfg.artifact(name).exists();
    if exists(&run, artifacts::DROP) {
        let drop = run.recovery_drop(&schedule)?;
        rows.push(("LayerPruning (drop) + SFT", perplexity(&materialize_view(&ws, &drop)?, d)?));
    }
    for (name, label) in [
        (artifacts::SLW, "SHARP (w/o f.t.)"),
        (artifacts::SFT, "SHARP"),
        (artifacts::ONLY_SFT, "SHARP (only SFT)"),
    ] {
        if exists(&run, name) {
            let rec = run.recovery(name, &schedule)?;
            rows.push((label, perplexity(&materialize_view(&ws, &rec)?, d)?));
        }
    }
    let rows: Vec<EvalRow> = rows
        .into_iter()
        .map(|(label, ppl)| EvalRow {
            label: label.to_string(),
            ppl,
            relative_to_base: ppl / p0,
        })
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row).expect("in-memory csv");
    }
    run.write("eval.csv", &String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8"))?;
    let result = json!({
        "schedule": schedule.to_listing(),
        "eval_sequences": eval.len(),
        "eval_tokens": eval.token_count(),
        "rows": rows,
    });
    run.finish(result)
}

impl Run {
    fn recovery_drop(&mut self, schedule: &ReplacementSchedule) -> Result<RecoveryParams> {
        let path = self.cfg.artifact(artifacts::DROP);
        self.input(&path)?;
        let rec = RecoveryParams::load(&path)?;
        if rec.schedule != *schedule {
            return Err(CliError::Config(format!("{} was trained for another schedule", path.display())));
        }
        Ok(rec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeChoice {
    Replace,
    RelativeError,
    ZeroOut,
}

impl FromStr for ProbeChoice {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replace" => Ok(ProbeChoice::Replace),
            "relative-error" => Ok(ProbeChoice::RelativeError),
            "zero-out" => Ok(ProbeChoice::ZeroOut),
            other => Err(CliError::Config(format!(
                "unknown probe {other:?} (expected replace, relative-error or zero-out)"
            ))),
        }
    }
}

impl ProbeChoice {
    fn stem(self) -> &'static str {
        match self {
            ProbeChoice::Replace => "probe_replace",
            ProbeChoice::RelativeError => "probe_relative_error",
            ProbeChoice::ZeroOut => "probe_zero_out",
        }
    }
}

pub fn cmd_probe(cfg: &ExperimentConfig, probe: ProbeChoice) -> Result<Report> {
    let mut run = Run::new(cfg, probe.stem())?;
    let ws = run.checkpoint()?;
    let report: ProbeReport = match probe {
        ProbeChoice::RelativeError => relative_error_report(&ws),
        ProbeChoice::Replace => {
            let (_, eval) = run.corpus()?;
            replace_sweep(&ws, &adjacent_pairs(ws.n_layers()), docs(&eval))?
        }
        ProbeChoice::ZeroOut => {
            let (_, eval) = run.corpus()?;
            zero_out_sensitivity(&ws, docs(&eval), None)?
        }
    };
    run.write(&format!("{}.csv", probe.stem()), &report.to_csv())?;
    run.finish(serde_json::to_value(&report).expect("report serialises"))
}

/// Storage and time estimates for the base model and the shared one.
pub fn cmd_latency(cfg: &ExperimentConfig) -> Result<Report> {
    let mut run = Run::new(cfg, "latency")?;
    let (desc, n) = plan_dims(&run.cfg);
    let schedule = run.schedule(n)?;
    let cost = match run.cfg.cost_model.clone() {
        Some(path) => {
            run.input(&path)?;
            CostModel::load(&path)?
        }
        None => match run.cfg.target_model {
            TargetModel::Llama2_7b => calibrate(&desc, &Calibration::phone_llama2_7b())?,
            TargetModel::Toy => CostModel::default(),
        },
    };
    let (d1, d2) = (desc.d_model, desc.d_hidden);
    let r = if run.cfg.no_lora {
        0
    } else {
        match run.cfg.matched_rank_base {
            Some(r0) => matched_rank(run.cfg.kind, r0, d1, d2),
            None => run.cfg.rank,
        }
    };
    let kind = run.cfg.kind;
    let base = simulate_run(&desc, &ReplacementSchedule::empty(n), kind, r, &cost)?;
    let shared = simulate_run(&desc, &schedule, kind, r, &cost)?;
    let savings = savings_report(&base, &shared)?;
    let shared_label = format!("SHARP ({})", schedule.kind().name());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row", "load_init_s", "forward_s", "total_s", "model_bytes"]).expect("in-memory csv");
    for (label, e) in [("base", &base), (shared_label.as_str(), &shared)] {
        w.write_record([
            label.to_string(),
            format!("{:.6}", e.load_init_time),
            format!("{:.6}", e.forward_time),
            format!("{:.6}", e.total_time),
            format!("{:.0}", e.stored_bytes),
        ])
        .expect("in-memory csv");
    }
    w.write_record([
        "saving".to_string(),
        format!("{:.6}", savings.load_init),
        format!("{:.6}", savings.forward),
        format!("{:.6}", savings.total),
        format!("{:.6}", savings.model_size),
    ])
    .expect("in-memory csv");
    run.write("latency.csv", &String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8"))?;
    let result = json!({
        "model": desc,
        "schedule": schedule.to_listing(),
        "rank": r,
        "cost_model": cost,
        "base": base,
        "shared": shared,
        "savings": savings,
        "table": crate::latency::format_table("base", &base, &shared_label, &shared)?,
    });
    run.finish(result)
}
