//! Seed derivation.
//!
//! Every random stream is seeded by folding a list of tags into the master
//! seed with the splitmix64 finalizer:
//!
//! ```text
//! s <- master
//! for tag in tags: s <- splitmix64(s ^ splitmix64(tag))
//! ```
//!
//! String tags are first reduced with 64-bit FNV-1a. Because the result
//! depends only on the tag path, a partial rerun draws the same numbers as
//! a full run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// One component of a seed path.
#[derive(Debug, Clone, Copy)]
pub enum Tag<'a> {
    Name(&'a str),
    Index(u64),
}

impl From<u64> for Tag<'_> {
    fn from(v: u64) -> Self {
        Tag::Index(v)
    }
}

impl From<usize> for Tag<'_> {
    fn from(v: usize) -> Self {
        Tag::Index(v as u64)
    }
}

impl<'a> From<&'a str> for Tag<'a> {
    fn from(v: &'a str) -> Self {
        Tag::Name(v)
    }
}

pub fn derive(master: u64, tags: &[Tag<'_>]) -> u64 {
    tags.iter().fold(master, |s, t| {
        let v = match *t {
            Tag::Name(n) => fnv1a(n),
            Tag::Index(i) => i,
        };
        splitmix64(s ^ splitmix64(v))
    })
}

pub fn rng(master: u64, tags: &[Tag<'_>]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tags))
}

/// `derive(master, &[a.into(), b.into(), ...])` without the noise.
#[macro_export]
macro_rules! seed_of {
    ($master:expr $(, $tag:expr)* $(,)?) => {
        $crate::seed::derive($master, &[$($crate::seed::Tag::from($tag)),*])
    };
}
