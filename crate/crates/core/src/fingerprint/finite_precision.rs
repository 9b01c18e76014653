use super::{entropy_estimate, Fingerprint, FingerprintError, Method};
use crate::dtype::Dtype;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Summation order of the native dot products.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accumulation {
    Sequential,
    Reversed,
    /// Recursive halving.
    Pairwise,
    /// `n` interleaved partial sums combined at the end, like a SIMD kernel.
    Lanes(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct FinitePrecisionConfig {
    pub seed: u64,
    pub layers: usize,
    pub width: usize,
    pub dtype: Dtype,
    pub accumulation: Accumulation,
}

impl FinitePrecisionConfig {
    pub fn new(seed: u64, layers: usize, width: usize, dtype: Dtype) -> Self {
        FinitePrecisionConfig { seed, layers, width, dtype, accumulation: Accumulation::Lanes(8) }
    }

    /// One probe operation per output element of every layer.
    pub fn probe_ops(&self) -> u32 {
        (self.layers * self.width).min(u32::MAX as usize) as u32
    }
}

pub fn finite_precision_fingerprint(
    seed: u64,
    layers: usize,
    width: usize,
    dtype: Dtype,
) -> Result<Fingerprint, FingerprintError> {
    finite_precision_fingerprint_with(&FinitePrecisionConfig::new(seed, layers, width, dtype))
}

/// Runs a chain of seeded linear layers natively in f32 and against an f64
/// reference with fixed sequential accumulation, then hashes the
/// per-layer error vectors.
///
/// Both paths consume the native activations, so each layer's error is the
/// rounding difference of that layer alone.
pub fn finite_precision_fingerprint_with(cfg: &FinitePrecisionConfig) -> Result<Fingerprint, FingerprintError> {
    if cfg.layers == 0 || cfg.width == 0 {
        return Err(FingerprintError::InvalidArgument("layers and width must be at least 1".into()));
    }
    if let Accumulation::Lanes(0) = cfg.accumulation {
        return Err(FingerprintError::InvalidArgument("lane count must be at least 1".into()));
    }
    let dtype = cfg.dtype;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // variance-preserving weights: U(-sqrt3, sqrt3) / sqrt(width)
    let limit = (3.0f64).sqrt() / (cfg.width as f64).sqrt();
    let mut x: Vec<f32> = (0..cfg.width).map(|_| dtype.round(rng.gen_range(-1.0f32..1.0))).collect();
    let mut hasher = Sha256::new();
    let mut products = vec![0f32; cfg.width];
    let mut next = vec![0f32; cfg.width];
    for _ in 0..cfg.layers {
        for out in next.iter_mut() {
            let mut reference = 0f64;
            for (p, &xi) in products.iter_mut().zip(&x) {
                let w = dtype.round(rng.gen_range(-limit..limit) as f32);
                *p = w * xi;
                reference += w as f64 * xi as f64;
            }
            let native = dtype.round(accumulate(&products, cfg.accumulation));
            let err = native - dtype.round(reference as f32);
            hasher.update(err.to_le_bytes());
            *out = native;
        }
        std::mem::swap(&mut x, &mut next);
    }
    let digest = hasher.finalize();
    let bits = entropy_estimate(Method::FinitePrecision, cfg.probe_ops()).bits;
    Fingerprint::new(Method::FinitePrecision, hex::encode(digest), bits)
}

fn accumulate(xs: &[f32], order: Accumulation) -> f32 {
    match order {
        Accumulation::Sequential => xs.iter().fold(0.0, |a, &b| a + b),
        Accumulation::Reversed => xs.iter().rev().fold(0.0, |a, &b| a + b),
        Accumulation::Pairwise => pairwise(xs),
        Accumulation::Lanes(n) => {
            let mut lanes = vec![0f32; n];
            for (i, &v) in xs.iter().enumerate() {
                lanes[i % n] += v;
            }
            lanes.iter().fold(0.0, |a, &b| a + b)
        }
    }
}

fn pairwise(xs: &[f32]) -> f32 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise(&xs[..n / 2]) + pairwise(&xs[n / 2..]),
    }
}
