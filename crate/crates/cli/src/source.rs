//! Fingerprint measurement and inline fingerprint parsing.

use crate::{AccumulationArg, CliError, FpMethod, MeasureArgs, SourceArgs};
use mlock_core::fingerprint::{
    clock_fingerprint_with, finite_precision_fingerprint_with, fuzzy_gen, puf_fingerprint, puf_read_file,
    Accumulation, ClockConfig, CycleCounter, FingerprintError, FinitePrecisionConfig, FuzzyHelper, SyntheticPuf,
    KEY_BITS,
};
use mlock_core::{Dtype, Fingerprint, Method};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub fn fp_error(e: FingerprintError) -> CliError {
    match e {
        FingerprintError::Unstable { .. } => CliError::domain("unstable-fingerprint", e),
        FingerprintError::InvalidArgument(m) | FingerprintError::InvalidSymbols(m) => CliError::usage(m),
        FingerprintError::Io(e) => CliError::domain("io", e),
        e => CliError::domain("fingerprint", e),
    }
}

#[derive(Serialize, Deserialize)]
struct HelperFile {
    repetition: usize,
    helper_data: String,
    key_check: String,
}

fn load_helper(path: &Path) -> Result<FuzzyHelper, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::domain("io", format!("{}: {e}", path.display())))?;
    let f: HelperFile =
        serde_json::from_str(&text).map_err(|e| CliError::domain("helper", format!("{}: {e}", path.display())))?;
    let bad = |m: &str| CliError::domain("helper", format!("{}: {m}", path.display()));
    let helper_data = hex::decode(&f.helper_data).map_err(|_| bad("helper_data is not hex"))?;
    let key_check: [u8; 8] = hex::decode(&f.key_check)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| bad("key_check must be 8 hex bytes"))?;
    Ok(FuzzyHelper { repetition: f.repetition, helper_data, key_check })
}

fn save_helper(path: &Path, h: &FuzzyHelper) -> Result<(), CliError> {
    let f = HelperFile {
        repetition: h.repetition,
        helper_data: hex::encode(&h.helper_data),
        key_check: hex::encode(h.key_check),
    };
    std::fs::write(path, serde_json::to_string_pretty(&f).unwrap())
        .map_err(|e| CliError::domain("io", format!("{}: {e}", path.display())))
}

pub fn measure(method: FpMethod, m: &MeasureArgs, seed: u64) -> Result<Fingerprint, CliError> {
    match method {
        FpMethod::Clock => {
            let cfg = ClockConfig { divisor: m.divisor, ..ClockConfig::new(m.iters, m.trials) };
            clock_fingerprint_with(&mut CycleCounter::default(), cfg).map_err(fp_error)
        }
        FpMethod::Fp => {
            let dtype: Dtype = m.dtype.parse().map_err(CliError::usage)?;
            let accumulation = match m.accumulation {
                AccumulationArg::Sequential => Accumulation::Sequential,
                AccumulationArg::Reversed => Accumulation::Reversed,
                AccumulationArg::Pairwise => Accumulation::Pairwise,
                AccumulationArg::Lanes8 => Accumulation::Lanes(8),
            };
            let cfg = FinitePrecisionConfig { accumulation, ..FinitePrecisionConfig::new(seed, m.layers, m.width, dtype) };
            finite_precision_fingerprint_with(&cfg).map_err(fp_error)
        }
        FpMethod::Puf => {
            let bits = KEY_BITS * m.repetition;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6675_7a7a);
            match &m.puf_file {
                Some(file) => {
                    let helper_path = m
                        .helper
                        .as_ref()
                        .ok_or_else(|| CliError::usage("--puf-file needs --helper to enrol or reproduce"))?;
                    let read = puf_read_file(file, bits).map_err(fp_error)?;
                    let helper = if helper_path.exists() {
                        load_helper(helper_path)?
                    } else {
                        let (_, h) = fuzzy_gen(&read, m.repetition, &mut rng).map_err(fp_error)?;
                        save_helper(helper_path, &h)?;
                        h
                    };
                    puf_fingerprint(&read, &helper).map_err(fp_error)
                }
                None => {
                    // device identity comes from --seed, read noise from a fixed offset
                    let mut dev = SyntheticPuf::new(seed, bits, m.error_rate, seed.wrapping_add(1)).map_err(fp_error)?;
                    let helper = match &m.helper {
                        Some(p) if p.exists() => load_helper(p)?,
                        other => {
                            let (_, h) = fuzzy_gen(dev.ground_truth(), m.repetition, &mut rng).map_err(fp_error)?;
                            if let Some(p) = other {
                                save_helper(p, &h)?;
                            }
                            h
                        }
                    };
                    let read = dev.read(bits).map_err(fp_error)?;
                    puf_fingerprint(&read, &helper).map_err(fp_error)
                }
            }
        }
    }
}

/// `clock:72100`, `fp:<64 hex>` or bare hex (method inferred from length).
pub fn parse_inline(s: &str) -> Result<Fingerprint, CliError> {
    let s = s.trim();
    let (method, symbols) = match s.split_once(':') {
        Some((m, sym)) => (Some(m.parse::<Method>().map_err(CliError::usage)?), sym),
        None => (None, s),
    };
    Fingerprint::parse(symbols, method).map_err(fp_error)
}

pub fn resolve(src: &SourceArgs, seed: u64) -> Result<Fingerprint, CliError> {
    if let Some(s) = &src.fingerprint {
        return parse_inline(s);
    }
    if let Some(cmd) = &src.fingerprint_cmd {
        let out = std::process::Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .output()
            .map_err(|e| CliError::domain("fingerprint-cmd", e))?;
        if !out.status.success() {
            return Err(CliError::domain("fingerprint-cmd", format!("'{cmd}' exited with {}", out.status)));
        }
        return parse_inline(String::from_utf8_lossy(&out.stdout).trim());
    }
    if let Some(m) = src.measure {
        return measure(m, &src.measure_opts, seed);
    }
    Err(CliError::usage("one of --fingerprint, --fingerprint-cmd or --measure is required"))
}
