use super::{Fingerprint, FingerprintError};
use std::collections::HashMap;
use std::hint::black_box;

/// Source of monotonically increasing ticks.
pub trait TickCounter {
    fn ticks(&mut self) -> Result<u64, FingerprintError>;
}

/// The host cycle counter (`rdtsc` on x86-64, a monotonic nanosecond clock
/// elsewhere).
#[derive(Debug, Default)]
pub struct CycleCounter {
    #[cfg(not(target_arch = "x86_64"))]
    origin: Option<std::time::Instant>,
}

impl TickCounter for CycleCounter {
    #[cfg(target_arch = "x86_64")]
    fn ticks(&mut self) -> Result<u64, FingerprintError> {
        // SAFETY: rdtsc is available on every x86-64 CPU.
        Ok(unsafe { core::arch::x86_64::_rdtsc() })
    }

    #[cfg(not(target_arch = "x86_64"))]
    fn ticks(&mut self) -> Result<u64, FingerprintError> {
        let origin = *self.origin.get_or_insert_with(std::time::Instant::now);
        Ok(origin.elapsed().as_nanos() as u64)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClockConfig {
    pub iters: u64,
    /// Odd trial counts avoid tied votes.
    pub trials: usize,
    /// Elapsed ticks are divided by this before masking. `None` uses `iters`,
    /// i.e. ticks per addition.
    pub divisor: Option<u64>,
}

impl ClockConfig {
    pub fn new(iters: u64, trials: usize) -> Self {
        ClockConfig { iters, trials, divisor: None }
    }
}

#[inline(never)]
fn dependent_adds(iters: u64) -> u64 {
    let mut acc = 0u64;
    for i in 0..iters {
        acc = black_box(acc.wrapping_add(i));
    }
    acc
}

pub fn clock_fingerprint(iters: u64, trials: usize) -> Result<Fingerprint, FingerprintError> {
    clock_fingerprint_with(&mut CycleCounter::default(), ClockConfig::new(iters, trials))
}

/// Times `iters` serialized additions per trial and majority-votes the
/// quantized tick counts.
pub fn clock_fingerprint_with(
    counter: &mut impl TickCounter,
    cfg: ClockConfig,
) -> Result<Fingerprint, FingerprintError> {
    if cfg.iters == 0 {
        return Err(FingerprintError::InvalidArgument("iters must be at least 1".into()));
    }
    if cfg.trials == 0 {
        return Err(FingerprintError::InvalidArgument("trials must be at least 1".into()));
    }
    let divisor = cfg.divisor.unwrap_or(cfg.iters).max(1);
    let mut samples = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let start = counter.ticks()?;
        black_box(dependent_adds(black_box(cfg.iters)));
        let end = counter.ticks()?;
        let elapsed = end.checked_sub(start).ok_or_else(|| {
            FingerprintError::Capability("tick counter went backwards".into())
        })?;
        samples.push(((elapsed / divisor) & 0xf_ffff) as u32);
    }
    let mut votes: HashMap<u32, usize> = HashMap::new();
    for &s in &samples {
        *votes.entry(s).or_default() += 1;
    }
    let (mode, count) = votes
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .expect("at least one trial");
    if 2 * count <= cfg.trials {
        return Err(FingerprintError::Unstable {
            mode,
            votes: count,
            trials: cfg.trials,
            min: *samples.iter().min().unwrap(),
            max: *samples.iter().max().unwrap(),
        });
    }
    Ok(Fingerprint::clock_value(mode))
}
