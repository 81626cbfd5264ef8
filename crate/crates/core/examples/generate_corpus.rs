//! Write a deterministic synthetic English-like corpus.
//!
//! ```text
//! cargo run --release --example generate_corpus -- corpus.txt 1100000 7
//! ```

use sharp::data::{load_and_tokenize, synthetic_text};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "corpus.txt".into());
    let bytes: usize = args.next().map_or(Ok(1_100_000), |s| s.parse())?;
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse())?;
    std::fs::write(&path, synthetic_text(seed, bytes))?;
    let corpus = load_and_tokenize(&path)?;
    println!("{path}: {} documents, {} tokens", corpus.len(), corpus.token_count());
    Ok(())
}
