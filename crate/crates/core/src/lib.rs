//! Memory-bounded class-incremental learning for sensor-based activity
//! recognition.
//!
//! A fully connected embedding network is trained with a margin contrastive
//! loss; classification is nearest-class-mean over prototypes computed from a
//! small per-class exemplar memory. New classes are learned on the device by
//! replaying the exemplars and distilling the old network's embeddings into
//! the updated one.

pub mod bundle;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod memory;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};

/// Dense class identifier.
pub type Label = u32;

/// Derives an independent sub-seed (splitmix64 finalizer over the inputs).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    mix(mix(mix(seed) ^ stream) ^ index)
}
