//! Deterministic seed derivation.
//!
//! Every episode, rollout worker, and sampler gets its own seed derived from
//! a base seed, a stream tag, and an index, so that runs are reproducible
//! and streams never share state.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Well-known stream tags.
pub mod stream {
    pub const PPO_INIT: u64 = 1;
    pub const PPO_EPISODES: u64 = 2;
    pub const PPO_ACTIONS: u64 = 3;
    pub const PPO_MINIBATCH: u64 = 4;
    pub const HARVEST_EPISODES: u64 = 5;
    pub const HARVEST_ACTIONS: u64 = 6;
    pub const DIFFUSION_INIT: u64 = 7;
    pub const DIFFUSION_TRAIN: u64 = 8;
    pub const EVAL_POLICY: u64 = 9;
}

pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(mix64(base) ^ stream.wrapping_mul(0xA24B_AED4_963E_E407)) ^ index)
}
