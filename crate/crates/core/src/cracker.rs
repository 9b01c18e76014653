//! Brute-force search over a small fingerprint space.
//!
//! Candidate `i` is the clock fingerprint `{i:05x}`. Each candidate is
//! detransformed, optionally screened by the distinguisher, and confirmed by
//! evaluating the unlocked model. The winner is the confirmed candidate with
//! the highest test accuracy, ties going to the lowest index.

use crate::distinguisher::{distinguish, DistributionStats, Verdict, DEFAULT_ALPHA};
use crate::fingerprint::Fingerprint;
use crate::param_store::ParamStore;
use crate::tinynet::{Dataset, TinyNet};
use crate::transform::{unlock, LockedModel, TransformKind};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Five hex symbols.
pub const MAX_BITS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Screen with the distinguisher, evaluate only plausible candidates.
    StatFirst,
    /// Evaluate every candidate.
    AccuracyOnly,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stat" | "stat-first" => Ok(Strategy::StatFirst),
            "acc" | "accuracy-only" => Ok(Strategy::AccuracyOnly),
            _ => Err(format!("unknown strategy '{s}' (stat, acc)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrackConfig {
    pub bits: u32,
    pub strategy: Strategy,
    pub alpha: f64,
    pub workers: usize,
}

impl CrackConfig {
    pub fn new(bits: u32, strategy: Strategy) -> Self {
        CrackConfig { bits, strategy, alpha: DEFAULT_ALPHA, workers: 1 }
    }

    /// Accuracy a candidate must beat to count as the key.
    pub fn threshold(classes: usize) -> f64 {
        1.0 / classes as f64 + 0.1
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CrackError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no candidate above chance; best was {best_fingerprint} at accuracy {best_accuracy:.3}")]
    NotFound { best_fingerprint: String, best_accuracy: f64, report: Box<CrackReport> },
}

pub fn candidate(index: u32) -> Fingerprint {
    Fingerprint::clock_value(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Found {
    pub index: u32,
    pub fingerprint: String,
    pub key: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrackReport {
    pub kind: TransformKind,
    pub bits: u32,
    pub strategy: Strategy,
    pub found: Option<Found>,
    pub candidates_tested: u64,
    /// Candidates screened out before evaluation.
    pub discarded: u64,
    pub evaluated: u64,
    /// Seconds; per-candidate costs are summed over all workers.
    pub wall_time: f64,
    pub detransform_time: f64,
    pub stat_time: f64,
    pub eval_time: f64,
}

impl CrackReport {
    /// Model evaluation time over all per-candidate time.
    pub fn eval_share(&self) -> f64 {
        let total = self.detransform_time + self.stat_time + self.eval_time;
        if total > 0.0 {
            self.eval_time / total
        } else {
            0.0
        }
    }

    pub fn discard_rate(&self) -> f64 {
        self.discarded as f64 / self.candidates_tested.max(1) as f64
    }
}

#[derive(Default)]
struct Partial {
    tested: u64,
    discarded: u64,
    evaluated: u64,
    detransform: f64,
    stat: f64,
    eval: f64,
    best: Option<(f64, u32)>,
}

fn better(a: Option<(f64, u32)>, b: Option<(f64, u32)>) -> Option<(f64, u32)> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.0 > x.0 || (y.0 == x.0 && y.1 < x.1) { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

fn run_range(
    locked: &LockedModel,
    cfg: &CrackConfig,
    data: &Dataset,
    reference: &DistributionStats,
    indices: impl Iterator<Item = u32>,
) -> Partial {
    let mut p = Partial::default();
    for i in indices {
        p.tested += 1;
        let t = Instant::now();
        let key = candidate(i).derive_key();
        let store = unlock(locked, &key).expect("schema checked before the search");
        p.detransform += t.elapsed().as_secs_f64();
        if cfg.strategy == Strategy::StatFirst {
            let t = Instant::now();
            let verdict = distinguish(&store, reference, cfg.alpha).map(|d| d.verdict);
            p.stat += t.elapsed().as_secs_f64();
            if verdict != Ok(Verdict::Plausible) {
                p.discarded += 1;
                continue;
            }
        }
        let t = Instant::now();
        let acc = TinyNet::from_store(&store).map(|n| n.accuracy(data)).unwrap_or(0.0);
        p.eval += t.elapsed().as_secs_f64();
        p.evaluated += 1;
        p.best = better(p.best, Some((acc, i)));
    }
    p
}

pub fn brute_force(
    locked: &LockedModel,
    cfg: &CrackConfig,
    data: &Dataset,
    reference: &DistributionStats,
) -> Result<CrackReport, CrackError> {
    if cfg.bits > MAX_BITS {
        return Err(CrackError::InvalidArgument(format!("{} bits exceeds the {MAX_BITS}-bit space", cfg.bits)));
    }
    if cfg.workers == 0 {
        return Err(CrackError::InvalidArgument("need at least one worker".into()));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(CrackError::InvalidArgument(format!("alpha {}", cfg.alpha)));
    }
    // fail fast on a broken container rather than inside every worker
    unlock(locked, &candidate(0).derive_key()).map_err(|e| CrackError::InvalidArgument(e.to_string()))?;

    let n = 1u32 << cfg.bits;
    let start = Instant::now();
    let workers = cfg.workers.min(n as usize);
    let parts: Vec<Partial> = if workers == 1 {
        vec![run_range(locked, cfg, data, reference, 0..n)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let idx = (w as u32..n).step_by(workers);
                    s.spawn(move || run_range(locked, cfg, data, reference, idx))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    let wall_time = start.elapsed().as_secs_f64();

    let mut total = Partial::default();
    for p in parts {
        total.tested += p.tested;
        total.discarded += p.discarded;
        total.evaluated += p.evaluated;
        total.detransform += p.detransform;
        total.stat += p.stat;
        total.eval += p.eval;
        total.best = better(total.best, p.best);
    }
    let classes = data.classes;
    let mut report = CrackReport {
        kind: locked.kind(),
        bits: cfg.bits,
        strategy: cfg.strategy,
        found: None,
        candidates_tested: total.tested,
        discarded: total.discarded,
        evaluated: total.evaluated,
        wall_time,
        detransform_time: total.detransform,
        stat_time: total.stat,
        eval_time: total.eval,
    };
    match total.best {
        Some((acc, i)) if acc > CrackConfig::threshold(classes) => {
            let fp = candidate(i);
            report.found = Some(Found { index: i, key: fp.derive_key().to_hex(), fingerprint: fp.symbols, accuracy: acc });
            Ok(report)
        }
        best => {
            let (best_accuracy, i) = best.unwrap_or((0.0, 0));
            Err(CrackError::NotFound {
                best_fingerprint: best.map(|_| candidate(i).symbols).unwrap_or_default(),
                best_accuracy,
                report: Box::new(report),
            })
        }
    }
}

/// Wall time of a full search at each `bits`, best of `repeats` runs.
/// Repeats sweep all sizes in turn so slow drift hits every size alike.
pub fn cost_scaling(
    locked: &LockedModel,
    bits: &[u32],
    cfg: &CrackConfig,
    data: &Dataset,
    reference: &DistributionStats,
    repeats: usize,
) -> Result<Vec<(u32, f64)>, CrackError> {
    let mut best = vec![f64::INFINITY; bits.len()];
    for _ in 0..repeats.max(1) {
        for (slot, &b) in best.iter_mut().zip(bits) {
            let c = CrackConfig { bits: b, ..*cfg };
            let t = match brute_force(locked, &c, data, reference) {
                Ok(r) => r.wall_time,
                Err(CrackError::NotFound { report, .. }) => report.wall_time,
                Err(e) => return Err(e),
            };
            *slot = slot.min(t);
        }
    }
    Ok(bits.iter().copied().zip(best).collect())
}

/// What an attacker can learn about the parameter distribution without the
/// key: the value multiset for shuffle and a sample from the public
/// pre-transform for pt-AES. Plain AES reveals nothing, so the caller's
/// surrogate (a model of the same architecture) stands in.
pub fn attacker_reference(locked: &LockedModel, surrogate: Option<&ParamStore>, seed: u64) -> Option<DistributionStats> {
    let schema = &locked.descriptor.schema;
    let revealed = match locked.kind() {
        TransformKind::Aes => None,
        TransformKind::Shuffle => ParamStore::unflatten(&locked.payload, schema).ok(),
        TransformKind::PretransformedAes => locked.pretransform.as_ref().and_then(|pre| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bytes = vec![0u8; schema.byte_len()];
            rng.fill_bytes(&mut bytes);
            pre.decode(&bytes, schema).ok()
        }),
    };
    revealed.as_ref().or(surrogate).map(DistributionStats::from_store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::{train, TrainConfig};
    use crate::transform::{aes_lock, build_empirical_pretransform, lock, shuffle_lock};

    fn trained() -> (Dataset, ParamStore) {
        let data = Dataset::blobs(0, 800, 400);
        let net = train(&TinyNet::default_net(1), &data, &TrainConfig { epochs: 8, ..TrainConfig::new(2) }).unwrap();
        (data, net.to_store())
    }

    #[test]
    fn candidates_are_clock_fingerprints() {
        assert_eq!(candidate(0).symbols, "00000");
        assert_eq!(candidate(0x4b85a).symbols, "4b85a");
    }

    #[test]
    fn zero_bits_tests_one_candidate() {
        let (data, store) = trained();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let locked = aes_lock(&store, &candidate(0).derive_key(), &mut rng);
        let reference = DistributionStats::from_store(&store);
        let r = brute_force(&locked, &CrackConfig::new(0, Strategy::StatFirst), &data, &reference).unwrap();
        assert_eq!(r.candidates_tested, 1);
        assert_eq!(r.evaluated, 1);
        assert_eq!(r.found.unwrap().index, 0);
    }

    #[test]
    fn finds_planted_key_for_every_kind_and_worker_count() {
        let (data, store) = trained();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lut = build_empirical_pretransform(&store, 32).unwrap();
        let reference = DistributionStats::from_store(&store);
        for kind in TransformKind::ALL {
            let planted = rng.next_u32() % 64;
            let locked = lock(kind, &store, &candidate(planted).derive_key(), Some(&lut), &mut rng).unwrap();
            let mut reports = Vec::new();
            for workers in [1, 3] {
                let cfg = CrackConfig { workers, ..CrackConfig::new(6, Strategy::StatFirst) };
                let r = brute_force(&locked, &cfg, &data, &reference).unwrap();
                assert_eq!(r.found.as_ref().unwrap().index, planted, "{kind}");
                assert_eq!(r.candidates_tested, 64);
                reports.push(r);
            }
            assert_eq!(reports[0].found, reports[1].found);
            assert_eq!(reports[0].discarded, reports[1].discarded);
        }
    }

    #[test]
    fn missing_key_is_not_found() {
        let (data, store) = trained();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let locked = aes_lock(&store, &crate::fingerprint::Key([9; 32]), &mut rng);
        let reference = DistributionStats::from_store(&store);
        let err = brute_force(&locked, &CrackConfig::new(4, Strategy::StatFirst), &data, &reference).unwrap_err();
        match err {
            CrackError::NotFound { report, .. } => {
                assert_eq!(report.discarded, 16);
                assert_eq!(report.evaluated, 0);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn accuracy_only_evaluates_everything() {
        let (data, store) = trained();
        let locked = shuffle_lock(&store, &candidate(5).derive_key());
        let reference = DistributionStats::from_store(&store);
        let r = brute_force(&locked, &CrackConfig::new(3, Strategy::AccuracyOnly), &data, &reference).unwrap();
        assert_eq!((r.evaluated, r.discarded), (8, 0));
        assert_eq!(r.found.unwrap().index, 5);
        assert_eq!(r.stat_time, 0.0);
    }

    #[test]
    fn rejects_oversized_space() {
        let (data, store) = trained();
        let locked = shuffle_lock(&store, &candidate(0).derive_key());
        let reference = DistributionStats::from_store(&store);
        assert!(matches!(
            brute_force(&locked, &CrackConfig::new(21, Strategy::StatFirst), &data, &reference),
            Err(CrackError::InvalidArgument(_))
        ));
    }
}
