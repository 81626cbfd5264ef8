//! A deterministic English-like text generator, so experiments can run
//! without shipping a corpus.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: &[&str] = &[
    "Ada", "Basil", "Cora", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonas",
    "Kira", "Lior", "Mona", "Nils", "Olga", "Pavel",
];
const ADJECTIVES: &[&str] = &[
    "small", "old", "quiet", "bright", "heavy", "narrow", "warm", "green", "empty", "careful",
    "sharp", "gentle", "broken", "distant", "red", "clever",
];
const NOUNS: &[&str] = &[
    "river", "garden", "engine", "letter", "window", "market", "bridge", "lamp", "forest",
    "station", "kettle", "harbor", "ladder", "school", "violin", "orchard", "map", "tower",
];
const VERBS: &[&str] = &[
    "found", "carried", "painted", "repaired", "watched", "opened", "counted", "followed",
    "described", "measured", "visited", "cleaned",
];
const PLACES: &[&str] = &[
    "the village", "the old city", "the north shore", "the valley", "the mountain road",
    "the museum", "the quiet lane", "the central square",
];
const TIMES: &[&str] = &[
    "in the morning", "after dinner", "at noon", "before the storm", "on a cold evening",
    "during the festival", "at dawn", "late at night",
];
const CONNECTIVES: &[&str] = &["because", "although", "while", "so", "and then", "but"];

fn pick<'a, R: Rng>(rng: &mut R, xs: &'a [&'a str]) -> &'a str {
    xs.choose(rng).copied().unwrap_or("")
}

fn noun_phrase<R: Rng>(rng: &mut R) -> String {
    if rng.gen_bool(0.5) {
        format!("the {} {}", pick(rng, ADJECTIVES), pick(rng, NOUNS))
    } else {
        format!("the {}", pick(rng, NOUNS))
    }
}

fn clause<R: Rng>(rng: &mut R) -> String {
    match rng.gen_range(0..4) {
        0 => format!("{} {} {}", pick(rng, NAMES), pick(rng, VERBS), noun_phrase(rng)),
        1 => format!("{} {} {} in {}", pick(rng, NAMES), pick(rng, VERBS), noun_phrase(rng), pick(rng, PLACES)),
        2 => format!(
            "{} was {} {}",
            capitalize(&noun_phrase(rng)),
            pick(rng, ADJECTIVES),
            pick(rng, TIMES)
        ),
        _ => format!(
            "{} and {} {} {} {} {}",
            pick(rng, NAMES),
            pick(rng, NAMES),
            pick(rng, VERBS),
            rng.gen_range(2..40),
            pick(rng, NOUNS),
            if rng.gen_bool(0.5) { "together" } else { "alone" }
        ),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence<R: Rng>(rng: &mut R) -> String {
    let body = if rng.gen_bool(0.3) {
        format!("{} {} {}", clause(rng), pick(rng, CONNECTIVES), lower_first(&clause(rng)))
    } else {
        clause(rng)
    };
    let end = if rng.gen_bool(0.1) { "!" } else { "." };
    format!("{}{}", capitalize(&body), end)
}

fn lower_first(s: &str) -> String {
    // Names stay capitalized; only a leading article is lowered.
    s.strip_prefix("The ").map_or_else(|| s.to_string(), |rest| format!("the {rest}"))
}

/// Roughly `target_bytes` of paragraphs separated by blank lines.
pub fn synthetic_text(seed: u64, target_bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(target_bytes + 512);
    while out.len() < target_bytes {
        let n = rng.gen_range(3..9);
        let para: Vec<String> = (0..n).map(|_| sentence(&mut rng)).collect();
        out.push_str(&para.join(" "));
        out.push_str("\n\n");
    }
    out
}
