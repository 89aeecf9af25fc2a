//! Training-loop plumbing shared by the two learned modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Parameters;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent RNG for one (seed, stream, epoch) triple, so a run resumed at
/// any epoch boundary replays the same draws.
pub fn epoch_rng(seed: u64, stream: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ epoch as u64))
}

/// Stable 64-bit tag for a stream name.
pub fn stream_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x1000_0000_01b3))
}

/// Run `f` over `items` in parallel and sum the returned gradients in item order.
pub fn summed_gradients<T, P, S, F>(items: &[T], zero: &P, f: F) -> Result<(P, Vec<S>)>
where
    T: Sync,
    P: Parameters,
    S: Send,
    F: Fn(&T) -> Result<(P, S)> + Sync,
{
    let results: Vec<Result<(P, S)>> = items.par_iter().map(&f).collect();
    let mut total = zero.zeros_like();
    let mut stats = Vec::with_capacity(items.len());
    for r in results {
        let (g, s) = r?;
        total.accumulate(&g);
        stats.push(s);
    }
    Ok((total, stats))
}

/// First 16 hex digits of the SHA-256 of `value`'s JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    format!("{:x}", Sha256::digest(&bytes))[..16].to_string()
}

pub fn check_finite(value: f64, what: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite loss {value} at {}", what())))
    }
}
