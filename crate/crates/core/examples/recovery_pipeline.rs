//! Share adjacent MLPs of a briefly pretrained 8-layer model, then recover
//! the lost quality with single-layer warmup followed by fine-tuning.
//! Prints the held-out perplexity of every stage.
//!
//! ```text
//! cargo run --release --example recovery_pipeline -- [g0|g1|g2|g3] [rank]
//! ```

use sharp::data::{split, synthetic_text, Corpus};
use sharp::model::{init_model, perplexity, pretrain, ModelConfig, PretrainConfig};
use sharp::recovery::{capture_activations, sft, slw_all, SftConfig, SlwConfig};
use sharp::sharing::{
    direct_sharing_view, drop_view, init_recovery, materialize_view, ReplacementSchedule, ScheduleKind, TransformKind,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let kind: TransformKind = args.next().map_or(Ok(TransformKind::G0), |s| s.parse())?;
    let rank: usize = args.next().map_or(Ok(8), |s| s.parse())?;

    let corpus = Corpus::from_bytes(synthetic_text(2, 300_000).as_bytes(), "synthetic")?;
    let (train, eval) = split(&corpus, 0.02, 1)?;
    let docs = &eval.sequences;
    let cfg = ModelConfig {
        n_layers: 8,
        ..ModelConfig::toy()
    };
    let mut base = init_model(&cfg)?;
    pretrain(
        &mut base,
        &train,
        &PretrainConfig {
            steps: 150,
            ..PretrainConfig::default()
        },
    )?;

    let schedule = ReplacementSchedule::build(ScheduleKind::Next, cfg.n_layers)?;
    println!("schedule {schedule}, {kind}, r = {rank}");
    let mut table = vec![
        ("original", perplexity(&base, docs)?),
        ("direct sharing", perplexity(&direct_sharing_view(&base, &schedule)?, docs)?),
        ("drop targets", perplexity(&drop_view(&base, &schedule)?, docs)?),
    ];

    let init = init_recovery(kind, &schedule, &cfg, rank, 3)?;
    let cache = capture_activations(&base, &schedule.targets(), &train, 0.10, 4)?;
    let (mut rec, summaries) = slw_all(&base, &init, &cache, &SlwConfig::default(), true)?;
    for s in &summaries {
        println!(
            "  warmup layer {} <- {}: {} rows, block mse {:.2e} -> {:.2e}",
            s.layer, s.reference, s.rows, s.initial_loss, s.final_loss
        );
    }
    table.push(("warmup only", perplexity(&materialize_view(&base, &rec)?, docs)?));

    let report = sft(
        &base,
        &mut rec,
        &train,
        &SftConfig {
            lr: 1e-3,
            max_steps: Some(60),
            ..SftConfig::default()
        },
    )?;
    println!("  fine-tuned {} steps ({} warmup)", report.steps, report.warmup_steps);
    table.push(("warmup + fine-tune", perplexity(&materialize_view(&base, &rec)?, docs)?));

    println!("{:<20} {:>8}", "model", "ppl");
    for (label, ppl) in table {
        println!("{label:<20} {ppl:>8.4}");
    }
    println!("recovery parameters: {}", rec.param_count());
    Ok(())
}
