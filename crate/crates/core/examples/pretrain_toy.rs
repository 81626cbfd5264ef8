//! Pretrain a small decoder on synthetic text, report held-out perplexity
//! and round-trip the weights through a checkpoint file.
//!
//! ```text
//! cargo run --release --example pretrain_toy -- [steps]
//! ```

use sharp::data::{split, synthetic_text, Corpus};
use sharp::model::{init_model, load_checkpoint, perplexity, pretrain, save_checkpoint, ModelConfig, PretrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::args().nth(1).map_or(Ok(120), |s| s.parse())?;
    let corpus = Corpus::from_bytes(synthetic_text(1, 200_000).as_bytes(), "synthetic")?;
    let (train, eval) = split(&corpus, 0.02, 9)?;
    let cfg = ModelConfig {
        n_layers: 6,
        ..ModelConfig::toy()
    };
    let mut ws = init_model(&cfg)?;
    println!("{} parameters, {} train / {} eval documents", ws.param_count(), train.len(), eval.len());
    println!("untrained ppl {:.3}", perplexity(&ws, &eval.sequences)?);

    let trace = pretrain(
        &mut ws,
        &train,
        &PretrainConfig {
            steps,
            ..PretrainConfig::default()
        },
    )?;
    if let Some((head, tail)) = trace.head_tail_mean(10) {
        println!("loss {head:.3} -> {tail:.3} over {steps} steps");
    }
    let p0 = perplexity(&ws, &eval.sequences)?;
    println!("trained ppl {p0:.3}");

    let dir = tempfile_dir()?;
    let path = dir.join("toy.shrp");
    save_checkpoint(&ws, &path)?;
    let back = load_checkpoint(&path)?;
    println!(
        "checkpoint {} bytes, reload bit-identical: {}",
        std::fs::metadata(&path)?.len(),
        back.bit_eq(&ws)
    );
    std::fs::remove_dir_all(dir)?;
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let d = std::env::temp_dir().join(format!("sharp-example-{}", std::process::id()));
    std::fs::create_dir_all(&d)?;
    Ok(d)
}
