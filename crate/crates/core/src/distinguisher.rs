//! Cheap statistical tests an attacker runs on a candidate decryption before
//! paying for a model evaluation.
//!
//! [`distinguish`] combines two tests against a reference set of parameters:
//!
//! * byte test: two-sample chi-square homogeneity of the byte histogram at
//!   every byte position within a value (positions are tested separately
//!   because bytes of one value are not independent);
//! * value test: two-sample Kolmogorov–Smirnov on the values, or a chi-square
//!   over 64 equal-probability reference bins when the reference sample
//!   itself is not available.
//!
//! The level `alpha` is split evenly between the two and across positions
//! (Bonferroni), so correct-looking candidates are rejected at most at rate
//! `alpha`.

use crate::param_store::ParamStore;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

pub const DEFAULT_ALPHA: f64 = 0.01;
pub const VALUE_BINS: usize = 64;
const MAX_WIDTH: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistinguisherError {
    #[error("sample error: {0}")]
    Sample(String),
}

/// Pearson chi-square of `bytes` against the uniform byte law (255 dof).
pub fn uniformity_chi2(bytes: &[u8]) -> Result<(f64, f64), DistinguisherError> {
    if bytes.len() < 256 * 20 {
        return Err(DistinguisherError::Sample(format!("{} bytes, need at least {}", bytes.len(), 256 * 20)));
    }
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    Ok(uniformity_chi2_counts(&counts))
}

pub fn uniformity_chi2_counts(counts: &[u64; 256]) -> (f64, f64) {
    let n: u64 = counts.iter().sum();
    let e = n as f64 / 256.0;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    (stat, chi2_sf(stat, 255.0))
}

/// Upper tail of the chi-square distribution.
pub fn chi2_sf(stat: f64, dof: f64) -> f64 {
    if dof <= 0.0 {
        return 1.0;
    }
    if stat <= 0.0 {
        return 1.0;
    }
    gamma_ur(dof / 2.0, stat / 2.0)
}

/// Two-sample chi-square homogeneity over paired bin counts; empty bins in
/// both samples are dropped from the degrees of freedom.
pub fn chi2_two_sample(a: &[u64], b: &[u64]) -> (f64, f64) {
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    if na == 0 || nb == 0 {
        return (0.0, 1.0);
    }
    let (ra, rb) = ((nb as f64 / na as f64).sqrt(), (na as f64 / nb as f64).sqrt());
    let mut stat = 0.0;
    let mut bins = 0;
    for (&x, &y) in a.iter().zip(b) {
        if x + y == 0 {
            continue;
        }
        bins += 1;
        stat += (ra * x as f64 - rb * y as f64).powi(2) / (x + y) as f64;
    }
    (stat, chi2_sf(stat, bins as f64 - 1.0))
}

/// Kolmogorov distribution tail `Q(λ) = 2 Σ (-1)^(k-1) exp(-2 k² λ²)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// KS statistic and asymptotic p-value for samples that are already sorted.
pub fn ks_two_sample_sorted(a: &[f64], b: &[f64]) -> Result<(f64, f64), DistinguisherError> {
    if a.is_empty() || b.is_empty() {
        return Err(DistinguisherError::Sample("both samples must be non-empty".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = if a[i].total_cmp(&b[j]).is_le() { a[i] } else { b[j] };
        while i < a.len() && a[i].total_cmp(&x).is_le() {
            i += 1;
        }
        while j < b.len() && b[j].total_cmp(&x).is_le() {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let p = kolmogorov_q((ne + 0.12 + 0.11 / ne) * d);
    Ok((d, p))
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64), DistinguisherError> {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    ks_two_sample_sorted(&a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    /// Excess kurtosis (0 for a Gaussian).
    pub kurtosis: f64,
}

impl Moments {
    fn of(vals: &[f64]) -> Self {
        let n = vals.len() as f64;
        if vals.is_empty() {
            return Moments { mean: f64::NAN, variance: f64::NAN, kurtosis: f64::NAN };
        }
        let mean = vals.iter().sum::<f64>() / n;
        let m2 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let m4 = vals.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        Moments { mean, variance: m2, kurtosis: m4 / (m2 * m2) - 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub sample_size: u64,
    /// Counts of every byte value over the flat stream.
    pub byte_histogram: Vec<u64>,
    /// Byte counts split by position within a value, up to 4 positions.
    pub position_histograms: Vec<Vec<u64>>,
    /// Interior edges of the equal-probability bins (`VALUE_BINS - 1`).
    pub bin_edges: Vec<f64>,
    /// Counts per value bin; finite values only.
    pub value_histogram: Vec<u64>,
    pub nan_count: u64,
    /// Moments over finite values.
    pub moments: Moments,
    /// Sorted non-NaN values, kept in memory for the KS test.
    #[serde(skip)]
    pub sorted_values: Vec<f64>,
}

fn byte_counts(store: &ParamStore) -> (Vec<u64>, Vec<Vec<u64>>) {
    let mut pooled = vec![0u64; 256];
    let mut by_pos = vec![vec![0u64; 256]; MAX_WIDTH];
    for t in store.tensors() {
        let w = t.dtype.width();
        for (i, &b) in t.bytes().iter().enumerate() {
            pooled[b as usize] += 1;
            by_pos[i % w][b as usize] += 1;
        }
    }
    by_pos.retain(|h| h.iter().any(|&c| c > 0));
    (pooled, by_pos)
}

fn sorted_non_nan(store: &ParamStore) -> (Vec<f64>, u64) {
    let all = store.values();
    let mut v: Vec<f64> = all.iter().filter(|x| !x.is_nan()).map(|&x| x as f64).collect();
    let nans = (all.len() - v.len()) as u64;
    v.sort_by(f64::total_cmp);
    (v, nans)
}

fn bin_counts(sorted: &[f64], edges: &[f64]) -> Vec<u64> {
    let mut counts = vec![0u64; edges.len() + 1];
    for &x in sorted.iter().filter(|x| x.is_finite()) {
        counts[edges.partition_point(|&e| e <= x)] += 1;
    }
    counts
}

impl DistributionStats {
    pub fn from_store(store: &ParamStore) -> Self {
        let (byte_histogram, position_histograms) = byte_counts(store);
        let (sorted_values, nan_count) = sorted_non_nan(store);
        let finite: Vec<f64> = sorted_values.iter().copied().filter(|x| x.is_finite()).collect();
        let bin_edges: Vec<f64> = if finite.is_empty() {
            Vec::new()
        } else {
            (1..VALUE_BINS).map(|k| finite[k * finite.len() / VALUE_BINS]).collect()
        };
        let value_histogram = bin_counts(&sorted_values, &bin_edges);
        DistributionStats {
            sample_size: store.value_count() as u64,
            byte_histogram,
            position_histograms,
            bin_edges,
            value_histogram,
            nan_count,
            moments: Moments::of(&finite),
            sorted_values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Plausible,
    Implausible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distinction {
    pub verdict: Verdict,
    pub alpha: f64,
    /// Smallest per-position byte p-value.
    pub byte_p_value: f64,
    pub byte_statistic: f64,
    /// `ks` or `chi2-bins`.
    pub value_test: String,
    pub value_statistic: f64,
    pub value_p_value: f64,
}

pub fn distinguish(
    candidate: &ParamStore,
    reference: &DistributionStats,
    alpha: f64,
) -> Result<Distinction, DistinguisherError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DistinguisherError::Sample(format!("alpha {alpha} outside (0, 1)")));
    }
    if candidate.value_count() == 0 || reference.sample_size == 0 {
        return Err(DistinguisherError::Sample("empty sample".into()));
    }
    let (_, positions) = byte_counts(candidate);
    let tested = positions.len().min(reference.position_histograms.len()).max(1);
    let (mut byte_statistic, mut byte_p_value) = (0.0, 1.0);
    for (c, r) in positions.iter().zip(&reference.position_histograms) {
        let (s, p) = chi2_two_sample(c, r);
        if p < byte_p_value {
            (byte_statistic, byte_p_value) = (s, p);
        }
    }
    let byte_reject = positions.len() != reference.position_histograms.len()
        || byte_p_value < alpha / 2.0 / tested as f64;

    let (sorted, _) = sorted_non_nan(candidate);
    let (value_test, value_statistic, value_p_value) = if sorted.is_empty() {
        ("ks", 1.0, 0.0)
    } else if !reference.sorted_values.is_empty() {
        let (d, p) = ks_two_sample_sorted(&sorted, &reference.sorted_values)?;
        ("ks", d, p)
    } else {
        let (s, p) = chi2_two_sample(&bin_counts(&sorted, &reference.bin_edges), &reference.value_histogram);
        ("chi2-bins", s, p)
    };
    let value_reject = value_p_value < alpha / 2.0;
    Ok(Distinction {
        verdict: if byte_reject || value_reject { Verdict::Implausible } else { Verdict::Plausible },
        alpha,
        byte_p_value,
        byte_statistic,
        value_test: value_test.into(),
        value_statistic,
        value_p_value,
    })
}
