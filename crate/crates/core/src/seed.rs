//! Deterministic random-stream derivation.
//!
//! Every episode uses independent substreams for the world, the defender,
//! the attacker, and the engine, all derived from one master seed. The
//! derivation is pure arithmetic on `(master_seed, episode, role)`, so any
//! episode can be reproduced in isolation and episodes can run in parallel
//! without sharing generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Master seed for a scenario. All per-episode randomness derives from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeedSpec(pub u64);

/// The independent random streams used inside a single episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    /// World construction and natural point draws.
    World = 0,
    /// Defender-side sampling (stochastic predictions, randomized wrappers).
    Defender = 1,
    /// Attacker-side sampling (probe draws, tie-breaking).
    Attacker = 2,
    /// Engine-owned randomness (e.g. offline screening phases).
    Engine = 3,
}

const STREAMS_PER_EPISODE: u64 = 4;

/// SplitMix64 output function: a bijective 64-bit mixer with good avalanche
/// behavior, used here to turn structured lane indices into key material.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl SeedSpec {
    /// Derive the generator for `(episode, role)`.
    ///
    /// Each lane's 256-bit ChaCha key is produced by running SplitMix64 from
    /// a state that combines the mixed master seed with the mixed lane index,
    /// so distinct `(master, episode, role)` triples get unrelated keys.
    pub fn stream(&self, episode: u64, role: StreamRole) -> ChaCha8Rng {
        let lane = episode
            .checked_mul(STREAMS_PER_EPISODE)
            .and_then(|base| base.checked_add(role as u64))
            .expect("episode index overflows stream lane space");
        let mut state = mix64(self.0) ^ mix64(lane ^ 0x9e3779b97f4a7c15);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            state = state.wrapping_add(0x9e3779b97f4a7c15);
            chunk.copy_from_slice(&mix64(state).to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn first_draws(rng: &mut ChaCha8Rng, n: usize) -> Vec<u64> {
        (0..n).map(|_| rng.random::<u64>()).collect()
    }

    #[test]
    fn same_lane_reproduces_identical_output() {
        let seed = SeedSpec(42);
        let a = first_draws(&mut seed.stream(7, StreamRole::Attacker), 16);
        let b = first_draws(&mut seed.stream(7, StreamRole::Attacker), 16);
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_lanes_diverge() {
        let seed = SeedSpec(42);
        let mut outputs = Vec::new();
        for episode in 0..4 {
            for role in [
                StreamRole::World,
                StreamRole::Defender,
                StreamRole::Attacker,
                StreamRole::Engine,
            ] {
                outputs.push(first_draws(&mut seed.stream(episode, role), 4));
            }
        }
        for i in 0..outputs.len() {
            for j in (i + 1)..outputs.len() {
                assert_ne!(outputs[i], outputs[j], "lanes {i} and {j} collide");
            }
        }
    }

    #[test]
    fn distinct_masters_diverge() {
        let a = first_draws(&mut SeedSpec(1).stream(0, StreamRole::World), 8);
        let b = first_draws(&mut SeedSpec(2).stream(0, StreamRole::World), 8);
        assert_ne!(a, b);
    }

    #[test]
    fn episode_zero_role_mapping_is_stable() {
        // Pin the derivation so config files keep meaning the same runs.
        let mut rng = SeedSpec(0).stream(0, StreamRole::World);
        let first = rng.random::<u64>();
        let again = SeedSpec(0).stream(0, StreamRole::World).random::<u64>();
        assert_eq!(first, again);
    }
}
