//! Code-offset secure sketch over a repetition code.
//!
//! `gen` picks a random 256-bit secret, repeats every bit `r` times and
//! publishes `codeword XOR reference` as helper data. `rep` XORs a fresh read
//! with the helper, majority-decodes each block and reconstructs the
//! reference. The key is SHA-256 of the reconstructed reference.

use super::puf::{pack_bits, unpack_bits};
use super::{FingerprintError, Key};
use rand::Rng;
use sha2::{Digest, Sha256};

pub const KEY_BITS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuzzyHelper {
    pub repetition: usize,
    /// Packed code offset, `repetition * 32` bytes.
    pub helper_data: Vec<u8>,
    pub key_check: [u8; 8],
}

fn key_check(key: &Key) -> [u8; 8] {
    let mut h = Sha256::new();
    h.update(b"mlock-fuzzy-check");
    h.update(key.as_bytes());
    h.finalize()[..8].try_into().unwrap()
}

fn validate(repetition: usize, len: usize) -> Result<(), FingerprintError> {
    if repetition < 3 || repetition.is_multiple_of(2) {
        return Err(FingerprintError::InvalidArgument(format!(
            "repetition length must be odd and at least 3, got {repetition}"
        )));
    }
    if len != KEY_BITS * repetition {
        return Err(FingerprintError::InvalidArgument(format!(
            "expected {} reference bits, got {len}",
            KEY_BITS * repetition
        )));
    }
    Ok(())
}

pub fn fuzzy_gen(
    reference: &[bool],
    repetition: usize,
    rng: &mut impl Rng,
) -> Result<(Key, FuzzyHelper), FingerprintError> {
    validate(repetition, reference.len())?;
    let offset: Vec<bool> = reference
        .chunks(repetition)
        .flat_map(|block| {
            let s: bool = rng.gen();
            block.iter().map(move |&b| b ^ s)
        })
        .collect();
    let key = Key(Sha256::digest(pack_bits(reference)).into());
    let helper = FuzzyHelper { repetition, helper_data: pack_bits(&offset), key_check: key_check(&key) };
    Ok((key, helper))
}

pub fn fuzzy_rep(noisy: &[bool], helper: &FuzzyHelper) -> Result<Key, FingerprintError> {
    let r = helper.repetition;
    validate(r, noisy.len())?;
    if helper.helper_data.len() * 8 != noisy.len() {
        return Err(FingerprintError::InvalidArgument("helper data length mismatch".into()));
    }
    let offset = unpack_bits(&helper.helper_data);
    let mut corrected = Vec::with_capacity(noisy.len());
    for (noisy_block, off_block) in noisy.chunks(r).zip(offset.chunks(r)) {
        let ones = noisy_block.iter().zip(off_block).filter(|(a, b)| *a ^ *b).count();
        let s = 2 * ones > r;
        corrected.extend(off_block.iter().map(|&o| o ^ s));
    }
    let key = Key(Sha256::digest(pack_bits(&corrected)).into());
    if key_check(&key) != helper.key_check {
        return Err(FingerprintError::RecoveryFailed);
    }
    Ok(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reference(r: usize, seed: u64) -> Vec<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..KEY_BITS * r).map(|_| rng.gen()).collect()
    }

    #[test]
    fn zero_noise_recovers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bits = reference(9, 2);
        let (key, helper) = fuzzy_gen(&bits, 9, &mut rng).unwrap();
        assert_eq!(helper.helper_data.len(), 9 * 32);
        assert_eq!(fuzzy_rep(&bits, &helper).unwrap(), key);
    }

    #[test]
    fn corrects_up_to_half_block_exhaustively() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for r in [3usize, 5, 7, 9, 11] {
            let bits = reference(r, r as u64);
            let (key, helper) = fuzzy_gen(&bits, r, &mut rng).unwrap();
            let t_max = (r - 1) / 2;
            for t in 0..=t_max {
                // flip t bits in every block, at rotating positions
                let mut noisy = bits.clone();
                for block in 0..KEY_BITS {
                    for j in 0..t {
                        let pos = block * r + (block + j * 2) % r;
                        noisy[pos] = !noisy[pos];
                    }
                }
                assert_eq!(fuzzy_rep(&noisy, &helper).unwrap(), key, "r={r} t={t}");
            }
            // one more flip in a single block breaks recovery
            let mut noisy = bits.clone();
            for b in &mut noisy[..=t_max] {
                *b = !*b;
            }
            assert!(matches!(fuzzy_rep(&noisy, &helper), Err(FingerprintError::RecoveryFailed)));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(fuzzy_gen(&reference(4, 0), 4, &mut rng).is_err());
        assert!(fuzzy_gen(&reference(1, 0), 1, &mut rng).is_err());
        assert!(fuzzy_gen(&reference(3, 0)[1..], 3, &mut rng).is_err());
    }
}
