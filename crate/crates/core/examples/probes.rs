//! Layer-redundancy probes on a briefly pretrained 8-layer model:
//! swapping in the previous layer's MLP, the weight-space distance between
//! neighbours, and the cost of removing one MLP.
//!
//! ```text
//! cargo run --release --example probes -- [out_dir]
//! ```

use sharp::data::{split, synthetic_text, Corpus};
use sharp::model::{init_model, pretrain, ModelConfig, PretrainConfig};
use sharp::probes::{adjacent_pairs, relative_error_report, replace_sweep, zero_out_sensitivity};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1);
    let corpus = Corpus::from_bytes(synthetic_text(3, 200_000).as_bytes(), "synthetic")?;
    let (train, eval) = split(&corpus, 0.02, 1)?;
    let cfg = ModelConfig {
        n_layers: 8,
        ..ModelConfig::toy()
    };
    let mut base = init_model(&cfg)?;
    pretrain(
        &mut base,
        &train,
        &PretrainConfig {
            steps: 100,
            ..PretrainConfig::default()
        },
    )?;
    let docs = &eval.sequences;

    let replace = replace_sweep(&base, &adjacent_pairs(cfg.n_layers), docs)?;
    println!("replace MLP, baseline ppl {:.4}", replace.baseline);
    for r in &replace.rows {
        let note = r.note.as_deref().map_or(String::new(), |n| format!(" {n}"));
        println!("  {} -> {}: {:.4} ({:+.4}){note}", r.reference.unwrap(), r.layer, r.value, r.delta.unwrap());
    }

    let rel = relative_error_report(&base);
    println!("adjacent relative error");
    for (name, v) in &rel.summary {
        println!("  {name}: {v:.4}");
    }

    let zero = zero_out_sensitivity(&base, docs, None)?;
    println!("zero out one MLP, baseline ppl {:.4}", zero.baseline);
    for r in &zero.rows {
        println!("  layer {}: {:.4} ({:+.4})", r.layer, r.value, r.delta.unwrap());
    }

    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        replace.write(&dir, "probe_replace")?;
        rel.write(&dir, "probe_relative_error")?;
        zero.write(&dir, "probe_zero_out")?;
        println!("reports written to {dir}");
    }
    Ok(())
}
