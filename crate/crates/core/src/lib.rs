//! Few-shot binary semantic segmentation framework.
//!
//! The crate covers the full episodic pipeline: FSS-style dataset modelling,
//! validation and synthesis; C-way-K-shot episode sampling; an
//! encoder–relation–decoder network with hand-written forward and backward
//! passes; losses and IoU metrics; the episodic training/evaluation harness;
//! and the auto-labeling / hard-case-mining workflow for novel classes.
//!
//! Everything is deterministic per seed: episodes are a pure function of
//! `(seed, index)`, parameter updates are applied by a single sequential
//! optimizer, and checkpoints round-trip bit-exactly.

pub mod dataset;
pub mod episodes;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod runconfig;
pub mod train;
pub mod workflow;

/// Spatial side of every image and mask after loading.
pub const IMAGE_SIDE: usize = 224;

/// Images per class in a conforming FSS-style registry.
pub const PAIRS_PER_CLASS: usize = 10;

/// Top-level superclass count in a conforming FSS-style hierarchy.
pub const TOP_LEVEL_COUNT: usize = 12;

/// Highest permitted instance label in an instance mask.
pub const MAX_INSTANCE_LABEL: u8 = 10;

pub(crate) mod seed {
    /// splitmix64 finalizer; used to derive independent RNG streams.
    pub fn splitmix64(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Mix a base seed with a stream id into a fresh seed.
    pub fn mix(base: u64, stream: u64) -> u64 {
        splitmix64(base ^ splitmix64(stream))
    }

    /// Three-way mix for per-(class, item) streams.
    pub fn mix3(base: u64, a: u64, b: u64) -> u64 {
        mix(mix(base, a), b)
    }
}
