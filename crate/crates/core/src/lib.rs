//! Community-aware location modelling for location-based social networks.

pub mod communities;
pub mod corpus;
pub mod diversity;
pub mod error;
pub mod eval;
pub mod geo;
pub mod influence;
pub mod pipeline;
pub mod predict;
pub mod synth;

pub use error::{Error, Result};

/// Mixes a base seed with a key and a tag into an independent stream seed.
pub(crate) fn derive_seed(seed: u64, key: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(key.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
