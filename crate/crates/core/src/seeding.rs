//! Deterministic seed derivation. Every random stream in the crate is a
//! `ChaCha8Rng` keyed by a root seed plus a path of labels, so independent
//! streams never share state and reruns are reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// A label in a seed path.
#[derive(Clone, Copy, Debug)]
pub enum Key<'a> {
    Tag(&'a str),
    Index(u64),
}

impl From<u64> for Key<'_> {
    fn from(v: u64) -> Self {
        Key::Index(v)
    }
}

impl From<usize> for Key<'_> {
    fn from(v: usize) -> Self {
        Key::Index(v as u64)
    }
}

impl<'a> From<&'a str> for Key<'a> {
    fn from(v: &'a str) -> Self {
        Key::Tag(v)
    }
}

pub fn derive(seed: u64, path: &[Key<'_>]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, k| {
        let v = match k {
            Key::Tag(s) => fnv1a(s),
            Key::Index(i) => splitmix64(*i ^ 0xA5A5_5A5A_DEAD_BEEF),
        };
        splitmix64(acc ^ v)
    })
}

pub fn rng(seed: u64, path: &[Key<'_>]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}
