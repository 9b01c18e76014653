//! Public maps that make parameter values look uniform before encryption.
//!
//! Two modes:
//!
//! * [`PreTransform::GaussianAnalytic`] sends each value through the normal
//!   CDF and stores `floor(Y * 2^n)` as an n-bit code. Lossy, and values in
//!   the two extreme codes have lost their magnitude (saturation).
//! * [`EmpiricalLut`] is a cumulative frequency table over every code of the
//!   dtype, built from the parameter histogram. Values are entropy-coded
//!   against it, so the coded stream is uniform and decoding any uniform
//!   stream reproduces the parameter distribution. Exactly invertible.

use super::rans::{Decoder, Encoder, PROB_BITS, PROB_SCALE};
use super::TransformError;
use crate::dtype::Dtype;
use crate::param_store::{ParamStore, ParamTensor, Schema};
use rand::RngCore;
use statrs::function::erf::{erf_inv, erfc};

/// Standard normal CDF of `(x - mean) / std`.
///
/// Uses the complementary error function, so the lower tail keeps full
/// relative precision.
pub fn gaussian_cdf(x: f64, mean: f64, std: f64) -> f64 {
    assert!(std > 0.0, "std must be positive");
    0.5 * erfc(-(x - mean) / (std * std::f64::consts::SQRT_2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SaturationPolicy {
    /// Fail with [`TransformError::OutlierSaturation`].
    Reject,
    /// Clamp to the nearest interior code and report the count.
    #[default]
    Clamp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PreTransform {
    GaussianAnalytic { mean: f64, std: f64 },
    EmpiricalLut(EmpiricalLut),
}

impl PreTransform {
    /// Fits mean and standard deviation over all finite values.
    pub fn fit_gaussian(store: &ParamStore) -> Result<Self, TransformError> {
        let vals: Vec<f64> = store.values().into_iter().filter(|v| v.is_finite()).map(f64::from).collect();
        if vals.len() < 2 {
            return Err(TransformError::Descriptor("need at least two finite values".into()));
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        if var <= 0.0 {
            return Err(TransformError::Descriptor("zero variance".into()));
        }
        Ok(PreTransform::GaussianAnalytic { mean, std: var.sqrt() })
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            PreTransform::GaussianAnalytic { .. } => "gaussian",
            PreTransform::EmpiricalLut(_) => "empirical",
        }
    }

    /// Maps the store to a byte stream of `flatten().len()` bytes, or longer
    /// when a tiny store cannot hold the coded stream.
    /// Returns the stream and the number of saturated values.
    pub(crate) fn encode(
        &self,
        store: &ParamStore,
        policy: SaturationPolicy,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<u8>, usize), TransformError> {
        let target_len = store.schema().byte_len();
        match self {
            PreTransform::GaussianAnalytic { mean, std } => {
                let mut out = Vec::with_capacity(target_len);
                let mut saturated = 0;
                for t in store.tensors() {
                    let bits = t.dtype.code_bits();
                    let top = (1u64 << bits) - 1;
                    for v in t.values() {
                        let y = if v.is_nan() { 0.5 } else { gaussian_cdf(v as f64, *mean, *std) };
                        let mut u = ((y * (top + 1) as f64).floor() as u64).min(top);
                        if u == 0 || u == top {
                            saturated += 1;
                            u = u.clamp(1, top - 1);
                        }
                        t.dtype.write_code(u as u32, &mut out);
                    }
                }
                if saturated > 0 && policy == SaturationPolicy::Reject {
                    return Err(TransformError::OutlierSaturation { count: saturated });
                }
                Ok((out, saturated))
            }
            PreTransform::EmpiricalLut(lut) => {
                lut.check_store(store)?;
                let codes: Vec<u32> = store.tensors().iter().flat_map(|t| t.codes()).collect();
                let mut out = lut.encode_codes(&codes)?;
                if out.len() < target_len {
                    let mut pad = vec![0u8; target_len - out.len()];
                    rng.fill_bytes(&mut pad);
                    out.extend_from_slice(&pad);
                }
                Ok((out, 0))
            }
        }
    }

    /// Inverse of [`PreTransform::encode`]; total on every byte stream.
    pub(crate) fn decode(&self, bytes: &[u8], schema: &Schema) -> Result<ParamStore, TransformError> {
        let mut store = ParamStore::new();
        match self {
            PreTransform::GaussianAnalytic { mean, std } => {
                let mut off = 0;
                for spec in &schema.0 {
                    let w = spec.dtype.width();
                    let scale = (1u64 << spec.dtype.code_bits()) as f64;
                    let mut data = Vec::with_capacity(spec.byte_len());
                    for chunk in bytes[off..off + spec.byte_len()].chunks_exact(w) {
                        let u = spec.dtype.read_code(chunk) as f64;
                        let y = (u + 0.5) / scale;
                        let v = mean + std * std::f64::consts::SQRT_2 * erf_inv(2.0 * y - 1.0);
                        spec.dtype.write_code(spec.dtype.encode(v as f32), &mut data);
                    }
                    off += spec.byte_len();
                    store.push(ParamTensor::from_bytes(spec.name.clone(), spec.shape.clone(), spec.dtype, data)?)?;
                }
            }
            PreTransform::EmpiricalLut(lut) => {
                for spec in &schema.0 {
                    lut.check_dtype(&spec.dtype)?;
                }
                let codes = lut.decode_codes(bytes, schema.value_count());
                let mut it = codes.into_iter();
                for spec in &schema.0 {
                    let mut data = Vec::with_capacity(spec.byte_len());
                    for c in it.by_ref().take(spec.count()) {
                        spec.dtype.write_code(c, &mut data);
                    }
                    store.push(ParamTensor::from_bytes(spec.name.clone(), spec.shape.clone(), spec.dtype, data)?)?;
                }
            }
        }
        Ok(store)
    }
}

/// Cumulative frequency table over the codes of one dtype.
///
/// Codes wider than [`MAX_TABLE_BITS`] are split: the high `table_bits` bits
/// go through the table, the remaining low bits are coded raw. For floats the
/// codes sharing a high part form a contiguous value range, so the table stays
/// monotone in value order.
///
/// `forward[h]` is the start of high part `h`'s interval in `[0, 2^31]`;
/// `inverse[rank]` is the high part at position `rank` in value order. Starts
/// never decrease in value order. High parts absent from the source store
/// get an empty interval, so random input never decodes to them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalLut {
    pub bits: u32,
    pub table_bits: u32,
    pub dtype_tag: u8,
    forward: Vec<u32>,
    inverse: Vec<u32>,
    rank: Vec<u32>,
    starts_by_rank: Vec<u64>,
}

pub const MAX_TABLE_BITS: u32 = 16;

impl EmpiricalLut {
    pub fn forward(&self) -> &[u32] {
        &self.forward
    }

    pub fn inverse(&self) -> &[u32] {
        &self.inverse
    }

    pub fn from_tables(bits: u32, dtype_tag: u8, forward: Vec<u32>, inverse: Vec<u32>) -> Result<Self, TransformError> {
        if bits == 0 || bits > 32 {
            return Err(TransformError::Capacity(format!("{bits}-bit codes")));
        }
        let table_bits = bits.min(MAX_TABLE_BITS);
        let n = 1usize << table_bits;
        if forward.len() != n || inverse.len() != n {
            return Err(TransformError::Descriptor("table length mismatch".into()));
        }
        let mut rank = vec![u32::MAX; n];
        for (r, &c) in inverse.iter().enumerate() {
            let c = c as usize;
            if c >= n || rank[c] != u32::MAX {
                return Err(TransformError::Descriptor("inverse table is not a permutation".into()));
            }
            rank[c] = r as u32;
        }
        let starts_by_rank: Vec<u64> = inverse.iter().map(|&c| forward[c as usize] as u64).collect();
        if starts_by_rank[0] != 0 || starts_by_rank.windows(2).any(|w| w[0] > w[1]) {
            return Err(TransformError::Descriptor("forward table decreases in value order".into()));
        }
        if *starts_by_rank.last().unwrap() > PROB_SCALE {
            return Err(TransformError::Descriptor("forward table exceeds probability scale".into()));
        }
        Ok(EmpiricalLut { bits, table_bits, dtype_tag, forward, inverse, rank, starts_by_rank })
    }

    fn low_bits(&self) -> u32 {
        self.bits - self.table_bits
    }

    fn check_dtype(&self, dtype: &Dtype) -> Result<(), TransformError> {
        if dtype.tag() != self.dtype_tag || dtype.code_bits() != self.bits {
            return Err(TransformError::Descriptor(format!(
                "table built for dtype tag {} ({} bits), tensor is {dtype}",
                self.dtype_tag, self.bits
            )));
        }
        Ok(())
    }

    fn check_store(&self, store: &ParamStore) -> Result<(), TransformError> {
        if store.is_empty() {
            return Err(TransformError::Descriptor("empty store".into()));
        }
        store.tensors().iter().try_for_each(|t| self.check_dtype(&t.dtype))
    }

    fn rank_of_slot(&self, slot: u64) -> usize {
        self.starts_by_rank.partition_point(|&s| s <= slot) - 1
    }

    fn freq_at_rank(&self, r: usize) -> u64 {
        self.starts_by_rank.get(r + 1).copied().unwrap_or(PROB_SCALE) - self.starts_by_rank[r]
    }

    /// High part owning `slot`; the inverse table lookup.
    pub fn high_for_slot(&self, slot: u64) -> u32 {
        self.inverse[self.rank_of_slot(slot)]
    }

    pub fn start_of(&self, high: u32) -> u64 {
        self.forward[high as usize] as u64
    }

    fn freq_of(&self, high: u32) -> u64 {
        self.freq_at_rank(self.rank[high as usize] as usize)
    }

    /// Probability mass assigned to a full code.
    pub fn mass(&self, code: u32) -> f64 {
        let h = code >> self.low_bits();
        self.freq_of(h) as f64 / PROB_SCALE as f64 / (1u64 << self.low_bits()) as f64
    }

    fn encode_codes(&self, codes: &[u32]) -> Result<Vec<u8>, TransformError> {
        let lb = self.low_bits();
        let raw = PROB_BITS - lb;
        let mut enc = Encoder::new();
        for &c in codes.iter().rev() {
            if lb > 0 {
                let l = (c & ((1u32 << lb) - 1)) as u64;
                enc.put(l << raw, 1 << raw);
            }
            let h = (c as u64 >> lb) as u32;
            let freq = self.freq_of(h);
            if freq == 0 {
                return Err(TransformError::Descriptor(format!("code {c:#x} has no mass in the table")));
            }
            enc.put(self.start_of(h), freq);
        }
        Ok(enc.finish())
    }

    fn decode_codes(&self, bytes: &[u8], count: usize) -> Vec<u32> {
        let lb = self.low_bits();
        let raw = PROB_BITS - lb;
        let mut dec = Decoder::new(bytes);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let r = self.rank_of_slot(dec.slot());
            dec.advance(self.starts_by_rank[r], self.freq_at_rank(r));
            let mut code = (self.inverse[r] as u64) << lb;
            if lb > 0 {
                let l = dec.slot() >> raw;
                dec.advance(l << raw, 1 << raw);
                code |= l;
            }
            out.push(code as u32);
        }
        out
    }
}

/// Builds the empirical table from the global code histogram of `store`.
///
/// Every high part present in the store gets one slot of the `2^31` total;
/// the remainder is shared in proportion to the histogram by largest
/// remainder. Absent high parts get nothing. All tensors
/// must share one dtype with `bits`-bit codes.
pub fn build_empirical_pretransform(store: &ParamStore, bits: u32) -> Result<PreTransform, TransformError> {
    if bits > 32 {
        return Err(TransformError::Capacity(format!("{bits}-bit precision exceeds 32")));
    }
    let first = store.tensors().first().ok_or_else(|| TransformError::Descriptor("empty store".into()))?;
    let dtype = first.dtype;
    if dtype.code_bits() != bits {
        return Err(TransformError::Descriptor(format!("{dtype} has {}-bit codes, not {bits}", dtype.code_bits())));
    }
    if let Some(t) = store.tensors().iter().find(|t| !t.dtype.same_kind(&dtype)) {
        return Err(TransformError::Descriptor(format!("mixed dtypes: '{}' is {}", t.name, t.dtype)));
    }
    let table_bits = bits.min(MAX_TABLE_BITS);
    let low_bits = bits - table_bits;
    let n = 1usize << table_bits;
    let mut counts = vec![0u64; n];
    let mut total = 0u64;
    for t in store.tensors() {
        for c in t.codes() {
            counts[(c as u64 >> low_bits) as usize] += 1;
            total += 1;
        }
    }
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| dtype.cmp_codes(a << low_bits, b << low_bits));

    let used = counts.iter().filter(|&&c| c > 0).count() as u64;
    let spare = PROB_SCALE - used;
    let mut freqs: Vec<u64> = order.iter().map(|&c| (counts[c as usize] > 0) as u64).collect();
    let mut remainders: Vec<(u64, usize)> = Vec::with_capacity(n);
    let mut assigned = 0u64;
    for (r, &c) in order.iter().enumerate() {
        let num = spare as u128 * counts[c as usize] as u128;
        let share = (num / total as u128) as u64;
        freqs[r] += share;
        assigned += share;
        remainders.push(((num % total as u128) as u64, r));
    }
    // hand out leftover slots by largest remainder, ties to lower rank
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, r) in remainders.iter().take((spare - assigned) as usize) {
        freqs[r] += 1;
    }
    let mut forward = vec![0u32; n];
    let mut acc = 0u64;
    for (r, &c) in order.iter().enumerate() {
        forward[c as usize] = acc as u32;
        acc += freqs[r];
    }
    debug_assert_eq!(acc, PROB_SCALE);
    Ok(PreTransform::EmpiricalLut(EmpiricalLut::from_tables(bits, dtype.tag(), forward, order)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Composite Simpson integration of the standard normal density.
    fn phi_by_quadrature(z: f64) -> f64 {
        let lo = -12.0;
        let n = 200_000;
        let h = (z - lo) / n as f64;
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(lo) + pdf(z);
        for i in 1..n {
            s += pdf(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn cdf_against_quadrature() {
        let oracle = phi_by_quadrature(1.0);
        assert!((oracle - 0.841345).abs() < 1e-6);
        assert!((gaussian_cdf(3.0, 2.0, 1.0) - oracle).abs() < 1e-7);
        for z in [-6.0, -3.0, -1.5, -0.2, 0.7, 2.5, 5.0] {
            assert!((gaussian_cdf(z * 0.3 + 1.0, 1.0, 0.3) - phi_by_quadrature(z)).abs() < 1e-7, "z={z}");
        }
        assert_eq!(gaussian_cdf(4.0, 4.0, 2.0), 0.5);
        assert_eq!(gaussian_cdf(f64::INFINITY, 0.0, 1.0), 1.0);
        assert_eq!(gaussian_cdf(f64::NEG_INFINITY, 0.0, 1.0), 0.0);
    }

    #[test]
    fn cdf_is_monotone() {
        let mut prev = 0.0;
        for i in -4000..4000 {
            let y = gaussian_cdf(i as f64 / 500.0, 0.0, 1.0);
            assert!(y >= prev);
            prev = y;
        }
    }

    fn gaussian_store(n: usize, dtype: Dtype, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.05).unwrap();
        let vals: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let mut s = ParamStore::new();
        s.push(ParamTensor::from_values("w", vec![n], dtype, &vals).unwrap()).unwrap();
        s
    }

    fn lut(p: &PreTransform) -> &EmpiricalLut {
        match p {
            PreTransform::EmpiricalLut(l) => l,
            _ => unreachable!(),
        }
    }

    #[test]
    fn every_fp16_code_inverts() {
        // the table only covers codes it has seen, so show it all of them
        let mut s = gaussian_store(10_000, Dtype::Fp16, 1);
        let data: Vec<u8> = (0..=u16::MAX).flat_map(|c| c.to_le_bytes()).collect();
        s.push(ParamTensor::from_bytes("all", vec![1 << 16], Dtype::Fp16, data).unwrap()).unwrap();
        let pre = build_empirical_pretransform(&s, 16).unwrap();
        let l = lut(&pre);
        assert_eq!(l.table_bits, 16);
        for c in 0..=u16::MAX as u32 {
            assert_eq!(l.high_for_slot(l.start_of(c)), c);
        }
        let codes: Vec<u32> = s.tensors()[1].codes().collect();
        assert_eq!(l.decode_codes(&l.encode_codes(&codes).unwrap(), codes.len()), codes);
    }

    #[test]
    fn absent_codes_are_never_sampled() {
        let s = gaussian_store(5_000, Dtype::Fp16, 2);
        let present: std::collections::HashSet<u32> = s.tensors()[0].codes().collect();
        let pre = build_empirical_pretransform(&s, 16).unwrap();
        let l = lut(&pre);
        let nan = Dtype::Fp16.encode(f32::NAN);
        assert!(!present.contains(&nan));
        assert_eq!(l.mass(nan), 0.0);
        assert!(l.encode_codes(&[nan]).is_err());
        let total: f64 = present.iter().map(|&c| l.mass(c)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<u8> = (0..40_000).map(|_| rng.gen()).collect();
        assert!(l.decode_codes(&noise, 20_000).iter().all(|c| present.contains(c)));
    }

    #[test]
    fn forward_is_monotone_in_value_order() {
        let pre = build_empirical_pretransform(&gaussian_store(5_000, Dtype::Fp16, 2), 16).unwrap();
        let l = lut(&pre);
        let mut codes: Vec<u32> = (0..1 << 16).collect();
        codes.sort_by(|&a, &b| Dtype::Fp16.cmp_codes(a, b));
        assert!(codes.windows(2).all(|w| l.start_of(w[0]) <= l.start_of(w[1])));
        // strictly increasing over the codes that carry mass
        let live: Vec<u32> = codes.into_iter().filter(|&c| l.mass(c) > 0.0).collect();
        assert!(live.windows(2).all(|w| l.start_of(w[0]) < l.start_of(w[1])));
    }

    #[test]
    fn fp32_codes_split_into_table_and_raw_bits() {
        let s = gaussian_store(20_000, Dtype::Fp32, 7);
        let pre = build_empirical_pretransform(&s, 32).unwrap();
        let l = lut(&pre);
        assert_eq!((l.bits, l.table_bits), (32, 16));
        // any low half goes through raw, whatever the high half's mass
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let highs: Vec<u32> = s.tensors()[0].codes().map(|c| c >> 16).collect();
        let codes: Vec<u32> = (0..5000).map(|i| highs[i] << 16 | rng.gen_range(0..1 << 16)).collect();
        assert_eq!(l.decode_codes(&l.encode_codes(&codes).unwrap(), codes.len()), codes);
        assert!(l.encode_codes(&[0x7fc0_0001]).is_err());
        let (bytes, _) = pre.encode(&s, SaturationPolicy::Reject, &mut rng).unwrap();
        assert_eq!(pre.decode(&bytes, &s.schema()).unwrap().flatten(), s.flatten());
    }

    #[test]
    fn uniform_store_gives_rank_map() {
        // every MiniFloat8 code exactly once: equal masses, forward = rank * 2^23
        let mut s = ParamStore::new();
        let data: Vec<u8> = (0..=255u8).collect();
        s.push(ParamTensor::from_bytes("u", vec![256], Dtype::MiniFloat8, data).unwrap()).unwrap();
        let l = lut(&build_empirical_pretransform(&s, 8).unwrap()).clone();
        for (r, &c) in l.inverse().iter().enumerate() {
            assert_eq!(l.start_of(c), r as u64 * (PROB_SCALE / 256));
        }
    }

    #[test]
    fn masses_track_histogram() {
        let s = gaussian_store(100_000, Dtype::Fp16, 3);
        let l = lut(&build_empirical_pretransform(&s, 16).unwrap()).clone();
        let mut counts = std::collections::HashMap::new();
        for c in s.tensors()[0].codes() {
            *counts.entry(c).or_insert(0u64) += 1;
        }
        for (&c, &k) in counts.iter().take(200) {
            let expect = k as f64 / 100_000.0;
            assert!((l.mass(c) - expect).abs() < 1e-4, "code {c}");
        }
    }

    #[test]
    fn capacity_and_dtype_errors() {
        let s = gaussian_store(100, Dtype::Fp32, 4);
        assert!(matches!(build_empirical_pretransform(&s, 33), Err(TransformError::Capacity(_))));
        assert!(matches!(build_empirical_pretransform(&s, 16), Err(TransformError::Descriptor(_))));
        let s = gaussian_store(100, Dtype::Fp16, 4);
        assert!(matches!(build_empirical_pretransform(&s, 8), Err(TransformError::Descriptor(_))));
        assert!(build_empirical_pretransform(&ParamStore::new(), 16).is_err());
    }

    #[test]
    fn lut_round_trip_and_uniform_bytes() {
        let s = gaussian_store(50_000, Dtype::Fp16, 5);
        let pre = build_empirical_pretransform(&s, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (bytes, sat) = pre.encode(&s, SaturationPolicy::Reject, &mut rng).unwrap();
        assert_eq!(sat, 0);
        assert_eq!(bytes.len(), s.flatten().len());
        assert_eq!(pre.decode(&bytes, &s.schema()).unwrap().flatten(), s.flatten());
    }

    #[test]
    fn gaussian_outlier_saturates() {
        let mut vals = vec![0.0f32; 99];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = (i as f32 - 49.0) / 49.0;
        }
        let mut s = ParamStore::new();
        s.push(ParamTensor::from_values("w", vec![99], Dtype::Fp16, &vals).unwrap()).unwrap();
        let PreTransform::GaussianAnalytic { mean, std } = PreTransform::fit_gaussian(&s).unwrap() else {
            unreachable!()
        };
        vals.push((mean + 6.0 * std) as f32);
        let mut s = ParamStore::new();
        s.push(ParamTensor::from_values("w", vec![100], Dtype::Fp16, &vals).unwrap()).unwrap();
        let pre = PreTransform::GaussianAnalytic { mean, std };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            pre.encode(&s, SaturationPolicy::Reject, &mut rng),
            Err(TransformError::OutlierSaturation { count: 1 })
        ));
        let (bytes, sat) = pre.encode(&s, SaturationPolicy::default(), &mut rng).unwrap();
        assert_eq!(sat, 1);
        let top = bytes[198..].iter().rev().fold(0u32, |a, &b| a << 8 | b as u32);
        assert!(top > 0 && top < 0xffff);
        let back = pre.decode(&bytes, &s.schema()).unwrap().values();
        assert!(back.iter().all(|v| v.is_finite()));
        // clamped, not exact
        assert!(back[99] < vals[99]);
    }
}
