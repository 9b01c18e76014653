use super::fuzzy::{fuzzy_rep, FuzzyHelper};
use super::{Fingerprint, FingerprintError, Method};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Simulated SRAM power-up state: a hidden ground truth read back with
/// independent bit flips.
#[derive(Debug, Clone)]
pub struct SyntheticPuf {
    truth: Vec<bool>,
    error_rate: f64,
    rng: ChaCha8Rng,
}

impl SyntheticPuf {
    pub const DEFAULT_ERROR_RATE: f64 = 0.05;

    /// `seed` fixes the device (ground truth); `read_seed` fixes the noise
    /// sequence of subsequent reads.
    pub fn new(seed: u64, bits: usize, error_rate: f64, read_seed: u64) -> Result<Self, FingerprintError> {
        if !(0.0..=1.0).contains(&error_rate) {
            return Err(FingerprintError::InvalidArgument(format!("error rate {error_rate}")));
        }
        let mut dev = ChaCha8Rng::seed_from_u64(seed);
        let truth = (0..bits).map(|_| dev.gen::<bool>()).collect();
        Ok(SyntheticPuf { truth, error_rate, rng: ChaCha8Rng::seed_from_u64(read_seed) })
    }

    pub fn ground_truth(&self) -> &[bool] {
        &self.truth
    }

    pub fn read(&mut self, bits: usize) -> Result<Vec<bool>, FingerprintError> {
        if bits > self.truth.len() {
            return Err(FingerprintError::Capacity { needed: bits, available: self.truth.len() });
        }
        let p = self.error_rate;
        Ok(self.truth[..bits].iter().map(|&b| b ^ self.rng.gen_bool(p)).collect())
    }
}

/// Reads `bits` bits (LSB first within each byte) from a raw dump.
pub fn puf_read_file(path: impl AsRef<Path>, bits: usize) -> Result<Vec<bool>, FingerprintError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() * 8 < bits {
        return Err(FingerprintError::Capacity { needed: bits, available: bytes.len() * 8 });
    }
    let mut v = unpack_bits(&bytes);
    v.truncate(bits);
    Ok(v)
}

/// Recovers the fuzzy-extracted key from a noisy read and renders it as a
/// 64-symbol fingerprint.
pub fn puf_fingerprint(noisy: &[bool], helper: &FuzzyHelper) -> Result<Fingerprint, FingerprintError> {
    let key = fuzzy_rep(noisy, helper)?;
    Fingerprint::new(Method::Puf, key.to_hex(), 256)
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        out[i / 8] |= (b as u8) << (i % 8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8]) -> Vec<bool> {
    bytes.iter().flat_map(|&byte| (0..8).map(move |i| (byte >> i) & 1 == 1)).collect()
}
