pub mod data;
pub mod experiment;
pub mod latency;
pub mod model;
pub mod probes;
pub mod recovery;
pub mod sharing;
pub mod tensor;

/// Mix a base seed with a stream tag (SplitMix64 finaliser).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
