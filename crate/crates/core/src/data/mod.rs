//! Byte-level corpora: loading, deterministic splits and training blocks.

mod synthetic;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synthetic::synthetic_text;

use crate::derive_seed;

/// Padding id, one past the 256 byte values.
pub const PAD: u32 = 256;
/// Byte vocabulary plus the pad id.
pub const VOCAB_SIZE: usize = 257;

/// Separator inserted between documents when they are streamed.
const DOC_SEPARATOR: [u32; 2] = [b'\n' as u32, b'\n' as u32];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus {0} is empty")]
    Empty(String),
    #[error("fraction {0} outside its valid range")]
    Fraction(f64),
    #[error("{n} sequences cannot yield an eval split at fraction {fraction}")]
    TooSmall { n: usize, fraction: f64 },
    #[error("id {0} is not a byte")]
    NotAByte(u32),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Ordered token sequences (one per document).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub sequences: Vec<Vec<u32>>,
    pub provenance: String,
    pub split_seed: Option<u64>,
}

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| u8::try_from(id).map_err(|_| DataError::NotAByte(id)))
        .collect()
}

/// Split on blank lines; each non-empty block becomes one document.
fn documents(bytes: &[u8]) -> Vec<Vec<u32>> {
    let mut docs = Vec::new();
    let mut current: Vec<u8> = Vec::new();
    for line in bytes.split(|&b| b == b'\n') {
        if line.iter().all(|b| b.is_ascii_whitespace()) {
            if !current.is_empty() {
                docs.push(tokenize(&current));
                current.clear();
            }
        } else {
            if !current.is_empty() {
                current.push(b'\n');
            }
            current.extend_from_slice(line);
        }
    }
    if !current.is_empty() {
        docs.push(tokenize(&current));
    }
    docs
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8], provenance: impl Into<String>) -> Result<Self> {
        let provenance = provenance.into();
        let sequences = documents(bytes);
        if sequences.is_empty() {
            return Err(DataError::Empty(provenance));
        }
        Ok(Self {
            sequences,
            provenance,
            split_seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// All documents joined by a blank line.
    pub fn stream(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.token_count() + 2 * self.len());
        for (i, s) in self.sequences.iter().enumerate() {
            if i > 0 {
                out.extend_from_slice(&DOC_SEPARATOR);
            }
            out.extend_from_slice(s);
        }
        out
    }

    fn subset(&self, idx: &[usize], seed: u64) -> Self {
        Self {
            sequences: idx.iter().map(|&i| self.sequences[i].clone()).collect(),
            provenance: self.provenance.clone(),
            split_seed: Some(seed),
        }
    }
}

/// Read a text or raw-bytes file; documents are blank-line separated blocks.
pub fn load_and_tokenize(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Corpus::from_bytes(&bytes, path.display().to_string())
}

/// Sequence-level train/eval partition. The eval part holds
/// `round(n · eval_fraction)` sequences chosen without replacement.
pub fn split(corpus: &Corpus, eval_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(DataError::Fraction(eval_fraction));
    }
    let n = corpus.len();
    let n_eval = (n as f64 * eval_fraction).round() as usize;
    if n_eval == 0 || n_eval >= n {
        return Err(DataError::TooSmall {
            n,
            fraction: eval_fraction,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5b11)));
    let mut eval: Vec<usize> = order[..n_eval].to_vec();
    let mut train: Vec<usize> = order[n_eval..].to_vec();
    eval.sort_unstable();
    train.sort_unstable();
    Ok((corpus.subset(&train, seed), corpus.subset(&eval, seed)))
}

/// `ceil(q · n)` sequences sampled without replacement, in corpus order.
pub fn sample_fraction(corpus: &Corpus, q: f64, seed: u64) -> Result<Corpus> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(DataError::Fraction(q));
    }
    let n = corpus.len();
    // Guard against 0.1 * 50 = 5.000000000000001 rounding up to 6.
    let k = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let k = k.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5a3f)));
    let mut pick = order[..k].to_vec();
    pick.sort_unstable();
    Ok(corpus.subset(&pick, seed))
}

/// One training block: `seq` input ids and their next-token targets.
/// Targets past the end of the stream are padded and masked out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Chunk the stream into `ceil(n / seq_len)` blocks.
pub fn blocks(stream: &[u32], seq_len: usize) -> Vec<Block> {
    assert!(seq_len > 0, "seq_len must be positive");
    let n = stream.len();
    let count = n.div_ceil(seq_len);
    (0..count)
        .map(|b| {
            let start = b * seq_len;
            let mut inputs = Vec::with_capacity(seq_len);
            let mut targets = Vec::with_capacity(seq_len);
            let mut mask = Vec::with_capacity(seq_len);
            for p in start..start + seq_len {
                inputs.push(stream.get(p).map_or(PAD, |&t| t) as usize);
                match stream.get(p + 1) {
                    Some(&t) if p < n => {
                        targets.push(t as usize);
                        mask.push(true);
                    }
                    _ => {
                        targets.push(PAD as usize);
                        mask.push(false);
                    }
                }
            }
            Block {
                inputs,
                targets,
                mask,
            }
        })
        .collect()
}

/// A stack of equally long blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn from_blocks(blocks: &[Block]) -> Self {
        let seq = blocks.first().map_or(0, |b| b.inputs.len());
        let mut out = Batch {
            batch: blocks.len(),
            seq,
            inputs: Vec::with_capacity(blocks.len() * seq),
            targets: Vec::with_capacity(blocks.len() * seq),
            mask: Vec::with_capacity(blocks.len() * seq),
        };
        for b in blocks {
            assert_eq!(b.inputs.len(), seq, "blocks in a batch share one length");
            out.inputs.extend_from_slice(&b.inputs);
            out.targets.extend_from_slice(&b.targets);
            out.mask.extend_from_slice(&b.mask);
        }
        out
    }

    pub fn counted(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Shuffled batches for one epoch; the order is a function of `(seed, epoch)`.
pub fn batches(corpus: &Corpus, batch_size: usize, seq_len: usize, seed: u64, epoch: u64) -> Vec<Batch> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut all = blocks(&corpus.stream(), seq_len);
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch)));
    all.chunks(batch_size).map(Batch::from_blocks).collect()
}
