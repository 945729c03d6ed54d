//! Seed derivation and replica-parallel execution.
//!
//! Replica `i` of a run with master seed `m` is driven by a ChaCha8 stream
//! seeded with the `i`-th output of a SplitMix64 sequence started at `m`.
//! SplitMix64 has O(1) random access (the state after `i` steps is
//! `m + (i+1)·γ`), so every replica seed is a direct jump. Results are
//! collected by replica index, which makes runs independent of the thread
//! count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Rng = ChaCha8Rng;

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The `index`-th SplitMix64 output of the sequence seeded with `master`.
pub fn jump_seed(master: u64, index: u64) -> u64 {
    mix64(master.wrapping_add(index.wrapping_add(1).wrapping_mul(GAMMA)))
}

/// A family of independent random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    master: u64,
}

impl Streams {
    pub fn new(master: u64) -> Self {
        Streams { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, index: u64) -> Rng {
        Rng::seed_from_u64(jump_seed(self.master, index))
    }

    /// An unrelated family for a different purpose within the same run.
    pub fn derive(&self, tag: &str) -> Streams {
        let h = tag
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        Streams {
            master: mix64(self.master ^ mix64(h)),
        }
    }
}

/// Runs `f(i, rng_i)` for `i in 0..replicas` on a pool of `threads`
/// workers (0 means one per core) and returns results in replica order.
pub fn run_replicas<T, F>(streams: Streams, replicas: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut Rng) -> Result<T> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invariant(format!("cannot build worker pool: {e}")))?;
    pool.install(|| {
        (0..replicas)
            .into_par_iter()
            .map(|i| {
                let mut rng = streams.stream(i as u64);
                f(i, &mut rng)
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of SplitMix64 seeded with 0, as published with the
        // reference implementation.
        assert_eq!(jump_seed(0, 0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(jump_seed(0, 1), 0x6e78_9e6a_a1b9_65f4);
        assert_eq!(jump_seed(0, 2), 0x06c4_5d18_8009_454f);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let s = Streams::new(42);
        let draw = |_: usize, r: &mut Rng| Ok(r.random::<u64>());
        let one = run_replicas(s, 64, 1, draw).unwrap();
        let four = run_replicas(s, 64, 4, draw).unwrap();
        assert_eq!(one, four);
        assert_ne!(one[0], one[1]);
    }

    #[test]
    fn derived_families_differ() {
        let s = Streams::new(7);
        assert_ne!(s.derive("plain").master(), s.derive("spine").master());
        assert_eq!(s.derive("plain"), s.derive("plain"));
    }
}
