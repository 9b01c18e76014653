//! Keyed permutation of the flat value sequence.
//!
//! Values are permuted within groups of identical dtype so every slot keeps a
//! valid code for its tensor. The permutation is Fisher–Yates driven by
//! ChaCha20 keyed from the lock key, with bounded draws done here rather
//! than through `rand`'s range sampling so the result is pinned across crate
//! versions.

use crate::dtype::Dtype;
use crate::fingerprint::Key;
use crate::param_store::Schema;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Uniform integer in `[0, bound)` (Lemire's multiply-and-reject).
fn bounded(rng: &mut impl RngCore, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let m = rng.next_u64() as u128 * bound as u128;
        if (m as u64) >= threshold {
            return (m >> 64) as u64;
        }
    }
}

/// Permutation `p` of `0..n`: the locked sequence is `values[p[i]]`.
pub fn permutation(rng: &mut impl RngCore, n: usize) -> Vec<u32> {
    let mut p: Vec<u32> = (0..n as u32).collect();
    for i in (1..n).rev() {
        let j = bounded(rng, i as u64 + 1) as usize;
        p.swap(i, j);
    }
    p
}

fn keystream(key: &Key) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"mlock-shuffle");
    h.update(key.as_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Byte offsets of the values in each dtype group, in flat order.
fn groups(schema: &Schema) -> Vec<(usize, Vec<usize>)> {
    let mut groups: Vec<(Dtype, usize, Vec<usize>)> = Vec::new();
    let mut off = 0;
    for spec in &schema.0 {
        let w = spec.dtype.width();
        let idx = match groups.iter().position(|g| g.0 == spec.dtype) {
            Some(i) => i,
            None => {
                groups.push((spec.dtype, w, Vec::new()));
                groups.len() - 1
            }
        };
        groups[idx].2.extend((0..spec.count()).map(|k| off + k * w));
        off += spec.byte_len();
    }
    groups.into_iter().map(|(_, w, offs)| (w, offs)).collect()
}

pub(crate) fn permute(flat: &[u8], schema: &Schema, key: &Key, inverse: bool) -> Vec<u8> {
    let mut rng = keystream(key);
    let mut out = vec![0u8; flat.len()];
    for (w, offs) in groups(schema) {
        let p = permutation(&mut rng, offs.len());
        for (i, &src) in p.iter().enumerate() {
            let (a, b) = (offs[i], offs[src as usize]);
            let (from, to) = if inverse { (a, b) } else { (b, a) };
            out[to..to + w].copy_from_slice(&flat[from..from + w]);
        }
    }
    out
}

/// `log10(n!)` by Stirling's series.
pub fn log10_factorial(n: u64) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let x = n as f64;
    let ln = x * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI * x).ln() + 1.0 / (12.0 * x) - 1.0 / (360.0 * x.powi(3));
    ln / std::f64::consts::LN_10
}
