//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any failed. Artifacts and reports are left under
//! `$CARGO_TARGET_TMPDIR/acceptance`.
//!
//! `ACCEPTANCE_ONLY=3,7` restricts the run to the listed criteria.

#[path = "support/grad_suite.rs"]
mod grad_suite;

use std::collections::BTreeMap;
use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use sharp::data::{synthetic_text, Corpus};
use sharp::experiment::{cmd_eval, cmd_pretrain, cmd_sft, cmd_slw, ExperimentConfig, Report};
use sharp::latency::{savings_report, simulate_run, stored_bytes, CostModel, ModelDescription};
use sharp::model::{init_model, logits, perplexity, MlpProj, ModelConfig, WeightStore};
use sharp::probes::{adjacent_relative_error, replace_probe, zero_out_sensitivity};
use sharp::recovery::{slw_fit, SftConfig, SlwConfig};
use sharp::sharing::{
    apply_transform, audit, compression_ratio_for, init_factors, init_recovery, materialize_view, matched_rank,
    LayerFactors, RecoveryParams, ReplacementSchedule, ScheduleKind, TransformKind,
};
use sharp::tensor::Tensor;

type Res<T> = Result<T, Box<dyn Error>>;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn fresh_dir(p: &Path) -> Res<PathBuf> {
    if p.exists() {
        std::fs::remove_dir_all(p)?;
    }
    std::fs::create_dir_all(p)?;
    Ok(p.to_path_buf())
}

// ---------------------------------------------------------------------------
// 1. schedule and storage arithmetic

const LLAMA: (usize, usize, usize) = (32, 4096, 11008);

fn criterion_1() -> Res<Outcome> {
    let start = Instant::now();
    let (n, d1, d2) = LLAMA;
    let mut problems = Vec::new();
    let mut parts = Vec::new();

    let stored = [
        (ScheduleKind::Next, 56),
        (ScheduleKind::Next2, 44),
        (ScheduleKind::Back, 38),
        (ScheduleKind::Front, 38),
        (ScheduleKind::More, 25),
        (ScheduleKind::Max, 16),
    ];
    let mut nominal = BTreeMap::new();
    for (kind, want) in stored {
        let a = audit(&ReplacementSchedule::build(kind, n)?);
        let x = a.nominal_targets();
        nominal.insert(kind.name(), x);
        let tau = (100.0 * (n - x) as f64 / n as f64).round() as u32;
        if tau != want {
            problems.push(format!("tau({}) = {tau}%, want {want}%", kind.name()));
        }
        if kind == ScheduleKind::More {
            match &a.discrepancy {
                Some(note) if note.contains("12") && a.targets != x => parts.push(format!(
                    "more: listing tau {}% ({} targets) vs nominal {tau}% flagged",
                    a.stored_percent, a.targets
                )),
                _ => problems.push("T_more discrepancy not reported".into()),
            }
        } else if a.targets != x || a.stored_percent != want || a.discrepancy.is_some() {
            problems.push(format!("{}: listing and nominal counts disagree", kind.name()));
        }
    }
    parts.insert(0, "tau 56/44/38/38/25/16".into());

    for (kind, want) in [(ScheduleKind::Next, 62.0), (ScheduleKind::Back, 46.0), (ScheduleKind::More, 35.0)] {
        let s = 100.0 * compression_ratio_for(nominal[kind.name()], n, TransformKind::G0, 400, d1, d2).exact;
        if (s - want).abs() > 1.0 {
            problems.push(format!("s({}) = {s:.2}%, want {want}%", kind.name()));
        }
        parts.push(format!("s({})={s:.2}%", kind.name()));
    }

    // The linearised form is the additive-LoRA one; other kinds are reported.
    let gap = |kind: TransformKind| {
        let mut worst: f64 = 0.0;
        for &x in nominal.values() {
            for r in 1..=512 {
                let c = compression_ratio_for(x, n, kind, r, d1, d2);
                worst = worst.max(c.relative_gap());
            }
        }
        worst
    };
    let worst = gap(TransformKind::G0);
    if !(worst < 0.05) {
        problems.push(format!("linearised gap {worst:.4}"));
    }
    let others: Vec<String> = [TransformKind::G1, TransformKind::G2, TransformKind::G3]
        .into_iter()
        .map(|k| format!("{k} {:.1}%", 100.0 * gap(k)))
        .collect();
    parts.push(format!("max linearised gap g0 {:.2}% (info: {})", 100.0 * worst, others.join(", ")));

    let ranks: Vec<usize> = [TransformKind::G1, TransformKind::G2, TransformKind::G3]
        .into_iter()
        .map(|k| matched_rank(k, 400, d1, d2))
        .collect();
    if ranks != [163, 259, 200] {
        problems.push(format!("matched ranks {ranks:?}"));
    }
    parts.push(format!("matched {ranks:?}"));

    let took = start.elapsed();
    if took >= Duration::from_secs(1) {
        problems.push(format!("took {}", secs(took)));
    }
    parts.push(secs(took));
    let pass = problems.is_empty();
    if !pass {
        parts.push(format!("failing: {}", problems.join(", ")));
    }
    Ok(Outcome::new(pass, parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 2. gradient suite

fn criterion_2() -> Res<Outcome> {
    let checks = grad_suite::run_suite(20, 2024);
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !(c.max_rel_error < grad_suite::TOLERANCE) || c.instances < 20)
        .map(|c| format!("{} {:.2e}", c.op, c.max_rel_error))
        .collect();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(Outcome::new(
        failed.is_empty(),
        format!(
            "{} ops x 20 instances, f64, h={}, worst rel err {worst:.2e}{}",
            checks.len(),
            grad_suite::STEP,
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    ))
}

// ---------------------------------------------------------------------------
// 3. warmup realizability

const REAL_D1: usize = 64;
const REAL_D2: usize = 172;
const REAL_R: usize = 8;
const REAL_ROWS: usize = 102_400;

fn rms(t: &Tensor) -> f64 {
    t.frobenius_norm() / (t.numel() as f64).sqrt()
}

fn perturbed(t: &Tensor, frac: f64, rng: &mut ChaCha8Rng) -> Res<Tensor> {
    Ok(t.add(&Tensor::randn(t.shape(), frac * rms(t), rng))?)
}

/// Fresh warmup start point, and a ground-truth factor set of the same
/// kind and rank: `α* = 1.1`, `A* ~ N(0, 0.02)`, `B* ~ N(0, 0.1)` and the
/// multiplicative pair of the start point moved by 10% of its scale.
fn realizable_pair(kind: TransformKind, seed: u64) -> Res<(LayerFactors, LayerFactors)> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut init = Vec::new();
    let mut truth = Vec::new();
    for p in MlpProj::ALL {
        let (rows, cols) = p.dims(REAL_D1, REAL_D2);
        let f = init_factors(kind, rows, cols, REAL_R, &mut init_rng)?;
        let mut t = f.clone();
        t.alpha = Tensor::full(&[1], 1.1);
        t.a = Tensor::randn(&[rows, REAL_R], 0.02, &mut rng);
        t.b = Tensor::randn(&[REAL_R, cols], 0.1, &mut rng);
        if let Some((x, y)) = &f.extra {
            t.extra = Some((perturbed(x, 0.1, &mut rng)?, perturbed(y, 0.1, &mut rng)?));
        }
        init.push(f);
        truth.push(t);
    }
    let arr = |v: Vec<_>| -> LayerFactors { v.try_into().expect("three projections") };
    Ok((arr(init), arr(truth)))
}

fn criterion_3() -> Res<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let reference = sharp::model::MlpWeights {
        gate: Tensor::randn(&[REAL_D1, REAL_D2], 0.1, &mut rng),
        up: Tensor::randn(&[REAL_D1, REAL_D2], 0.1, &mut rng),
        down: Tensor::randn(&[REAL_D2, REAL_D1], 0.1, &mut rng),
    };
    let rows = Tensor::randn(&[REAL_ROWS, REAL_D1], 1.0, &mut rng);
    let cfg = SlwConfig::default();
    let mut parts = Vec::new();
    let mut pass = true;
    for (i, kind) in TransformKind::ALL.into_iter().enumerate() {
        let (init, truth) = realizable_pair(kind, 300 + i as u64)?;
        let target = sharp::model::MlpWeights {
            gate: apply_transform(kind, &reference.gate, &truth[0])?,
            up: apply_transform(kind, &reference.up, &truth[1])?,
            down: apply_transform(kind, &reference.down, &truth[2])?,
        };
        let fit = slw_fit(kind, &reference, &target, &rows, init, true, &cfg)?;
        let ok = fit.final_loss < 1e-6 && fit.initial_loss >= 1e-4;
        pass &= ok;
        parts.push(format!(
            "{kind} {:.1e}->{:.1e}{}",
            fit.initial_loss,
            fit.final_loss,
            if ok { "" } else { " (over 1e-6)" }
        ));
    }
    let took = start.elapsed();
    pass &= took < Duration::from_secs(120);
    parts.push(format!("{} steps/kind, {}", cfg.epochs * REAL_ROWS.div_ceil(cfg.batch_size), secs(took)));
    Ok(Outcome::new(pass, parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 4-6. toy pipeline

const CORPUS_BYTES: usize = 1_100_000;

struct Pipeline {
    dir: PathBuf,
    cfg: ExperimentConfig,
    p0: f64,
    g0_eval: Report,
    slw_r8: f64,
    elapsed: Duration,
}

fn pipeline_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        corpus: dir.join("corpus.txt"),
        out_dir: dir.join("g0_r8"),
        schedule: "next".parse().expect("built-in"),
        kind: TransformKind::G0,
        rank: 8,
        sft: SftConfig {
            lr: 1e-3,
            max_steps: Some(200),
            ..SftConfig::default()
        },
        seed: 0,
        ..ExperimentConfig::default()
    }
}

fn row(report: &Report, label: &str) -> Option<f64> {
    report.result["rows"]
        .as_array()?
        .iter()
        .find(|r| r["label"] == label)
        .and_then(|r| r["ppl"].as_f64())
}

fn need(report: &Report, label: &str) -> Res<f64> {
    row(report, label).ok_or_else(|| format!("eval report lacks row {label:?}").into())
}

fn run_pipeline() -> Res<Pipeline> {
    let start = Instant::now();
    let dir = fresh_dir(&root().join("pipeline"))?;
    let text = synthetic_text(7, CORPUS_BYTES);
    std::fs::write(dir.join("corpus.txt"), &text)?;
    let cfg = pipeline_config(&dir);
    let pre = cmd_pretrain(&cfg)?;
    let p0 = pre.result["baseline_ppl"].as_f64().ok_or("no baseline ppl")?;
    cmd_slw(&cfg)?;
    cmd_sft(&cfg)?;
    let g0_eval = cmd_eval(&cfg)?;
    let slw_r8 = need(&g0_eval, "SHARP (w/o f.t.)")?;
    Ok(Pipeline {
        dir,
        cfg,
        p0,
        g0_eval,
        slw_r8,
        elapsed: start.elapsed(),
    })
}

fn variant_dir(p: &Pipeline, name: &str) -> Res<PathBuf> {
    let d = fresh_dir(&p.dir.join(name))?;
    std::fs::copy(p.cfg.out_dir.join("base.shrp"), d.join("base.shrp"))?;
    Ok(d)
}

fn criterion_4(p: &Pipeline) -> Res<Outcome> {
    let bytes = std::fs::metadata(&p.cfg.corpus)?.len();
    let e = &p.g0_eval;
    let direct = need(e, "Direct sharing")?;
    let slw = need(e, "SHARP (w/o f.t.)")?;
    let sharp = need(e, "SHARP")?;
    let drop = need(e, "LayerPruning (drop) + SFT")?;
    let checks = [
        (bytes >= 1 << 20, "corpus >= 1 MiB"),
        (direct > slw, "direct > slw"),
        (slw > sharp, "slw > slw+sft"),
        (sharp <= 1.25 * p.p0, "slw+sft <= 1.25 P0"),
        (sharp <= drop, "slw+sft <= drop+sft"),
        (p.elapsed < Duration::from_secs(30 * 60), "under 30 min"),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.0).map(|c| c.1).collect();
    Ok(Outcome::new(
        failed.is_empty(),
        format!(
            "P0 {:.4}, direct {direct:.4}, slw {slw:.4}, slw+sft {sharp:.4}, drop+sft {drop:.4}, {} byte corpus, {}{}",
            p.p0,
            bytes,
            secs(p.elapsed),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    ))
}

fn criterion_5(p: &Pipeline) -> Res<Outcome> {
    let mut ppl = BTreeMap::new();
    ppl.insert(8usize, p.slw_r8);
    for r in [2usize, 32] {
        let out = variant_dir(p, &format!("slw_r{r}"))?;
        let cfg = ExperimentConfig {
            rank: r,
            out_dir: out,
            ..p.cfg.clone()
        };
        cmd_slw(&cfg)?;
        ppl.insert(r, need(&cmd_eval(&cfg)?, "SHARP (w/o f.t.)")?);
    }
    let (a, b, c) = (ppl[&2], ppl[&8], ppl[&32]);
    Ok(Outcome::new(
        a >= b && b >= c,
        format!("slw-only ppl r=2 {a:.4}, r=8 {b:.4}, r=32 {c:.4}"),
    ))
}

fn criterion_6(p: &Pipeline) -> Res<Outcome> {
    let mut results = BTreeMap::new();
    let g0_rank = matched_rank(TransformKind::G0, 8, 64, 172);
    if g0_rank != p.cfg.rank {
        return Err("g0 matched rank differs from the pipeline rank".into());
    }
    results.insert("g0", (g0_rank, need(&p.g0_eval, "SHARP")?));
    for kind in [TransformKind::G1, TransformKind::G2, TransformKind::G3] {
        let out = variant_dir(p, &format!("matched_{}", kind.name()))?;
        let cfg = ExperimentConfig {
            kind,
            matched_rank_base: Some(8),
            drop_baseline: false,
            out_dir: out,
            ..p.cfg.clone()
        };
        cmd_slw(&cfg)?;
        cmd_sft(&cfg)?;
        results.insert(kind.name(), (cfg.effective_rank(), need(&cmd_eval(&cfg)?, "SHARP")?));
    }
    let lo = results.values().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let hi = results.values().map(|v| v.1).fold(0.0, f64::max);
    let spread = (hi - lo) / lo;
    let pass = spread <= 0.10;
    let report = json!({
        "matched_rank_base": 8,
        "tolerance": 0.10,
        "kinds": results.iter().map(|(k, (r, ppl))| (k.to_string(), json!({"rank": r, "ppl": ppl}))).collect::<BTreeMap<_, _>>(),
        "relative_spread": spread,
        "pass": pass,
    });
    let path = root().join("transform_equivalence.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    let listing: Vec<String> = results.iter().map(|(k, (r, ppl))| format!("{k}(r={r}) {ppl:.4}")).collect();
    Ok(Outcome::new(
        pass,
        format!("{}; spread {:.2}%; report {}", listing.join(", "), 100.0 * spread, path.display()),
    ))
}

// ---------------------------------------------------------------------------
// 7. view equals materialisation

fn jitter(rec: &mut RecoveryParams, rng: &mut ChaCha8Rng) {
    for t in rec.trainable_mut() {
        let noise = Tensor::randn(t.shape(), 0.05, rng);
        *t = t.add(&noise).expect("same shape");
    }
}

fn criterion_7() -> Res<Outcome> {
    let cfg = ModelConfig {
        seed: 71,
        ..ModelConfig::toy()
    };
    let ws = init_model(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut combos = 0;
    let mut mismatches = Vec::new();
    for sk in ScheduleKind::BUILT_IN {
        let schedule = ReplacementSchedule::build(sk, cfg.n_layers)?;
        for (ki, kind) in TransformKind::ALL.into_iter().enumerate() {
            let mut rec = init_recovery(kind, &schedule, &cfg, 8, rng.gen())?;
            if (ki + combos) % 2 == 1 {
                rec.attach_adapters(4, rng.gen())?;
            }
            jitter(&mut rec, &mut rng);
            let view = materialize_view(&ws, &rec)?;
            let explicit = view.materialize()?;
            let mut bad = 0;
            for _ in 0..100 {
                let len = rng.gen_range(1..=cfg.max_seq_len);
                let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
                if !logits(&view, &ids)?.bit_eq(&logits(&explicit, &ids)?) {
                    bad += 1;
                }
            }
            if bad > 0 {
                mismatches.push(format!("{}/{kind}: {bad}", sk.name()));
            }
            combos += 1;
        }
    }
    Ok(Outcome::new(
        mismatches.is_empty(),
        format!(
            "{combos} schedule x kind combinations x 100 inputs{}",
            if mismatches.is_empty() { ", all bitwise equal".into() } else { format!("; mismatches: {}", mismatches.join(", ")) }
        ),
    ))
}

// ---------------------------------------------------------------------------
// 8. storage accounting

/// Every stored tensor's shape for a model with `desc`'s dimensions, by name.
fn enumerate_shapes(desc: &ModelDescription) -> Vec<(String, Vec<usize>)> {
    let (d, h, v) = (desc.d_model, desc.d_hidden, desc.vocab_size);
    let mut out = vec![("tok_embed".to_string(), vec![v, d])];
    if desc.pos_embed_rows > 0 {
        out.push(("pos_embed".into(), vec![desc.pos_embed_rows, d]));
    }
    for l in 1..=desc.n_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("layer.{l}.attn.{w}"), vec![d, d]));
        }
        out.push((format!("layer.{l}.attn_norm"), vec![d]));
        out.push((format!("layer.{l}.mlp_norm"), vec![d]));
        out.push((format!("layer.{l}.mlp.gate"), vec![d, h]));
        out.push((format!("layer.{l}.mlp.up"), vec![d, h]));
        out.push((format!("layer.{l}.mlp.down"), vec![h, d]));
    }
    out.push(("final_norm".into(), vec![d]));
    out.push(("head".into(), vec![d, v]));
    out
}

fn factor_shapes(kind: TransformKind, rows: usize, cols: usize, r: usize) -> Vec<Vec<usize>> {
    let mut s = vec![vec![1], vec![rows, r], vec![r, cols]];
    match kind {
        TransformKind::G0 => {}
        TransformKind::G1 => s.extend([vec![r, cols], vec![r, cols]]),
        TransformKind::G2 => s.extend([vec![rows, r], vec![rows, r]]),
        TransformKind::G3 => s.extend([vec![rows, r], vec![r, cols]]),
    }
    s
}

fn is_target_mlp(name: &str, schedule: &ReplacementSchedule) -> bool {
    schedule
        .targets()
        .iter()
        .any(|t| name.starts_with(&format!("layer.{t}.mlp.")))
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn enumerated_params(desc: &ModelDescription, schedule: &ReplacementSchedule, kind: TransformKind, r: usize) -> usize {
    let base: usize = enumerate_shapes(desc)
        .iter()
        .filter(|(n, _)| !is_target_mlp(n, schedule))
        .map(|(_, s)| numel(s))
        .sum();
    let per_target: usize = if r == 0 {
        0
    } else {
        MlpProj::ALL
            .iter()
            .map(|p| {
                let (rows, cols) = p.dims(desc.d_model, desc.d_hidden);
                factor_shapes(kind, rows, cols, r).iter().map(|s| numel(s)).sum::<usize>()
            })
            .sum()
    };
    base + schedule.target_count() * per_target
}

fn criterion_8() -> Res<Outcome> {
    let cost = CostModel::default();
    let toy_cfg = ModelConfig::toy();
    let toy = init_model(&toy_cfg)?;
    let mut checked = 0;
    let mut problems = Vec::new();
    for desc in [ModelDescription::from_config(&toy_cfg), ModelDescription::llama2_7b()] {
        let total: usize = enumerate_shapes(&desc).iter().map(|(_, s)| numel(s)).sum();
        for sk in ScheduleKind::BUILT_IN {
            let schedule = ReplacementSchedule::build(sk, desc.n_layers)?;
            for kind in TransformKind::ALL {
                for r in [0usize, 1, 8, 400] {
                    let want = cost.bytes_per_param * enumerated_params(&desc, &schedule, kind, r) as f64;
                    let got = stored_bytes(&desc, &schedule, kind, r, &cost)?;
                    if got != want {
                        problems.push(format!("{} {} {kind} r={r}: {got} vs {want}", desc.name, sk.name()));
                    }
                    checked += 1;
                }
                if desc.name == "toy" {
                    let rec = init_recovery(kind, &schedule, &toy_cfg, 8, 1)?;
                    let live: usize = toy
                        .named_tensors()
                        .iter()
                        .filter(|(n, _)| !is_target_mlp(n, &schedule))
                        .map(|(_, t)| t.numel())
                        .sum::<usize>()
                        + rec.trainable().iter().map(|t| t.numel()).sum::<usize>();
                    let got = stored_bytes(&desc, &schedule, kind, 8, &cost)?;
                    if got != cost.bytes_per_param * live as f64 {
                        problems.push(format!("toy {} {kind}: live tensors {live}", sk.name()));
                    }
                    checked += 1;
                }
            }
            let base = simulate_run(&desc, &ReplacementSchedule::empty(desc.n_layers), TransformKind::G0, 0, &cost)?;
            let shared = simulate_run(&desc, &schedule, TransformKind::G0, 0, &cost)?;
            let saving = savings_report(&base, &shared)?.model_size;
            let closed = (schedule.target_count() * 3 * desc.d_model * desc.d_hidden) as f64 / total as f64;
            if (saving - closed).abs() > 1e-12 {
                problems.push(format!("{} {} r=0 saving {saving} vs {closed}", desc.name, sk.name()));
            }
            checked += 1;
        }
    }
    Ok(Outcome::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{checked} checks against shape enumeration and live tensors")
        } else {
            problems.join("; ")
        },
    ))
}

// ---------------------------------------------------------------------------
// 9. CLI determinism

const TINY_CONFIG: &str = r#"{
  "schema_version": 1,
  "model": {"n_layers": 6, "d_model": 16, "d_hidden": 24, "n_heads": 2, "vocab_size": 257, "max_seq_len": 16},
  "corpus": "corpus.txt",
  "pretrain": {"steps": 20, "batch_size": 4, "seq_len": 16},
  "slw": {"epochs": 1, "batch_size": 64},
  "sft": {"lr": 1e-3, "max_steps": 5, "batch_size": 4, "seq_len": 16},
  "out_dir": "out",
  "seed": 5
}
"#;

const CLI_RUNS: &[&[&str]] = &[
    &["pretrain"],
    &["plan"],
    &["plan", "--schedule", "custom=plan.txt"],
    &["slw"],
    &["sft"],
    &["sft", "--only-sft"],
    &["eval"],
    &["probe", "replace"],
    &["probe", "relative-error"],
    &["probe", "zero-out"],
    &["latency"],
    &["latency", "--no-lora"],
];

fn snapshot(dir: &Path) -> Res<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir)?.display().to_string(), std::fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn cli_session(dir: &Path, corpus: &str) -> Res<Vec<Vec<u8>>> {
    fresh_dir(dir)?;
    std::fs::write(dir.join("corpus.txt"), corpus)?;
    std::fs::write(dir.join("config.json"), TINY_CONFIG)?;
    std::fs::write(dir.join("plan.txt"), "(3:4),(5:6)\n")?;
    let mut stdout = Vec::new();
    for args in CLI_RUNS {
        let out = Command::new(env!("CARGO_BIN_EXE_sharp"))
            .args(args.iter().copied())
            .args(["--config", "config.json"])
            .current_dir(dir)
            .output()?;
        if !out.status.success() {
            return Err(format!("sharp {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()).into());
        }
        stdout.push(out.stdout);
    }
    Ok(stdout)
}

fn criterion_9() -> Res<Outcome> {
    let corpus = synthetic_text(3, 60_000);
    let a = root().join("cli_a");
    let b = root().join("cli_b");
    let out_a = cli_session(&a, &corpus)?;
    let out_b = cli_session(&b, &corpus)?;
    let (sa, sb) = (snapshot(&a)?, snapshot(&b)?);
    let mut diffs: Vec<String> = sa
        .iter()
        .filter(|(k, v)| sb.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();
    diffs.extend(sb.keys().filter(|k| !sa.contains_key(*k)).cloned());
    for (i, args) in CLI_RUNS.iter().enumerate() {
        if out_a[i] != out_b[i] {
            diffs.push(format!("stdout of {}", args.join(" ")));
        }
    }
    Ok(Outcome::new(
        diffs.is_empty(),
        if diffs.is_empty() {
            format!("{} commands, {} artifacts byte-identical across two runs", CLI_RUNS.len(), sa.len())
        } else {
            format!("differences: {}", diffs.join(", "))
        },
    ))
}

// ---------------------------------------------------------------------------
// 10. probes

fn probe_model() -> Res<(WeightStore, Corpus)> {
    let cfg = ModelConfig {
        n_layers: 6,
        d_model: 16,
        d_hidden: 24,
        n_heads: 2,
        vocab_size: 257,
        max_seq_len: 16,
        seed: 10,
    };
    let mut ws = init_model(&cfg)?;
    ws.layers[3].mlp = ws.layers[2].mlp.clone();
    let doubled = ws.layers[3].mlp.clone();
    ws.layers[4].mlp = sharp::model::MlpWeights {
        gate: doubled.gate.scale(2.0),
        up: doubled.up.scale(2.0),
        down: doubled.down.scale(2.0),
    };
    let corpus = Corpus::from_bytes(synthetic_text(11, 4_000).as_bytes(), "probe")?;
    Ok((ws, corpus))
}

fn criterion_10() -> Res<Outcome> {
    let (ws, corpus) = probe_model()?;
    let docs = &corpus.sequences;
    let base = perplexity(&ws, docs)?;
    let tied_delta = replace_probe(&ws, 3, 4, docs)? - base;
    let mut problems = Vec::new();
    if tied_delta != 0.0 {
        problems.push(format!("tied replace delta {tied_delta:e}"));
    }
    let mut rel = Vec::new();
    for proj in MlpProj::ALL {
        let (ratios, _) = adjacent_relative_error(&ws, proj);
        // ratios[i] compares layers i + 1 and i + 2
        let (tied, doubled) = (ratios[2], ratios[3]);
        if tied != 0.0 || (doubled - 1.0).abs() > 1e-12 {
            problems.push(format!("{}: tied {tied:e}, doubled {doubled}", proj.name()));
        }
        rel.push(format!("{} {tied}/{doubled:.12}", proj.name()));
    }
    let z1 = zero_out_sensitivity(&ws, docs, None)?;
    let z2 = zero_out_sensitivity(&ws, docs, None)?;
    if z1.to_json() != z2.to_json() || z1.to_csv() != z2.to_csv() {
        problems.push("zero-out reports differ between runs".into());
    }
    Ok(Outcome::new(
        problems.is_empty(),
        format!(
            "tied replace delta {tied_delta}; rel err tied/doubled {}; zero-out {} rows reproducible{}",
            rel.join(", "),
            z1.rows.len(),
            if problems.is_empty() { String::new() } else { format!("; problems: {}", problems.join(", ")) }
        ),
    ))
}

// ---------------------------------------------------------------------------

const TITLES: [&str; 10] = [
    "schedule and compression arithmetic",
    "finite-difference gradient suite",
    "single-layer warmup realizability",
    "pipeline perplexity ordering",
    "rank monotonicity of warmup-only perplexity",
    "transformation equivalence at matched budget",
    "shared view equals materialisation bitwise",
    "stored bytes against tensor enumeration",
    "CLI determinism",
    "probe outputs",
];

fn selected() -> Option<Vec<usize>> {
    let v = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    // A positional filter from `cargo test <filter>` that does not name this
    // suite skips it.
    if let Some(f) = args.iter().find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(f.as_str()) {
            return;
        }
    }
    let only = selected();
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    std::fs::create_dir_all(root()).expect("acceptance output dir");

    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut record = |i: usize, r: Res<Outcome>| {
        let o = r.unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        println!(
            "criterion {i:>2} {}: {}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            TITLES[i - 1],
            o.detail
        );
        results.push((i, o));
    };

    let simple: [(usize, fn() -> Res<Outcome>); 3] = [(1, criterion_1), (2, criterion_2), (3, criterion_3)];
    for (i, f) in simple {
        if wanted(i) {
            record(i, f());
        }
    }
    if wanted(4) || wanted(5) || wanted(6) {
        match run_pipeline() {
            Ok(p) => {
                let staged: [(usize, fn(&Pipeline) -> Res<Outcome>); 3] =
                    [(4, criterion_4), (5, criterion_5), (6, criterion_6)];
                for (i, f) in staged {
                    if wanted(i) {
                        record(i, f(&p));
                    }
                }
            }
            Err(e) => {
                for i in 4..=6 {
                    if wanted(i) {
                        record(i, Err(format!("pipeline failed: {e}").into()));
                    }
                }
            }
        }
    }
    let rest: [(usize, fn() -> Res<Outcome>); 4] =
        [(7, criterion_7), (8, criterion_8), (9, criterion_9), (10, criterion_10)];
    for (i, f) in rest {
        if wanted(i) {
            record(i, f());
        }
    }

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(i, _)| *i).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" (criteria {failed:?})") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
