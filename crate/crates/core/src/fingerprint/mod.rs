//! Hardware fingerprints and key derivation.
//!
//! A [`Fingerprint`] is a hex symbol string tagged with the method that
//! produced it. Keys are SHA-256 over the method tag byte followed by the
//! UTF-8 symbols.

mod clock;
mod finite_precision;
mod fuzzy;
mod puf;

pub use clock::{clock_fingerprint, clock_fingerprint_with, ClockConfig, CycleCounter, TickCounter};
pub use finite_precision::{
    finite_precision_fingerprint, finite_precision_fingerprint_with, Accumulation, FinitePrecisionConfig,
};
pub use fuzzy::{fuzzy_gen, fuzzy_rep, FuzzyHelper, KEY_BITS};
pub use puf::{pack_bits, puf_fingerprint, puf_read_file, unpack_bits, SyntheticPuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum FingerprintError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tick counter unavailable: {0}")]
    Capability(String),
    #[error("unstable fingerprint: mode {mode:#x} seen in {votes}/{trials} trials, spread {min:#x}..{max:#x}")]
    Unstable { mode: u32, votes: usize, trials: usize, min: u32, max: u32 },
    #[error("source holds {available} bits, {needed} requested")]
    Capacity { needed: usize, available: usize },
    #[error("fuzzy extractor could not recover the key")]
    RecoveryFailed,
    #[error("invalid symbols: {0}")]
    InvalidSymbols(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Clock,
    FinitePrecision,
    Puf,
    Composite,
}

impl Method {
    pub fn tag(self) -> u8 {
        match self {
            Method::Clock => 1,
            Method::FinitePrecision => 2,
            Method::Puf => 3,
            Method::Composite => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Method> {
        Some(match tag {
            1 => Method::Clock,
            2 => Method::FinitePrecision,
            3 => Method::Puf,
            4 => Method::Composite,
            _ => return None,
        })
    }

    /// Required symbol count, if fixed.
    pub fn symbol_len(self) -> Option<usize> {
        match self {
            Method::Clock => Some(5),
            Method::FinitePrecision | Method::Puf => Some(64),
            Method::Composite => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Clock => "clock",
            Method::FinitePrecision => "fp",
            Method::Puf => "puf",
            Method::Composite => "composite",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clock" => Ok(Method::Clock),
            "fp" | "finite-precision" => Ok(Method::FinitePrecision),
            "puf" => Ok(Method::Puf),
            "composite" => Ok(Method::Composite),
            other => Err(format!("unknown fingerprint method '{other}'")),
        }
    }
}

/// 256-bit symmetric key.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Key(pub [u8; 32]);

impl Key {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Key({}..)", &self.to_hex()[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint {
    pub method: Method,
    pub symbols: String,
    pub entropy_bits: u32,
}

impl Fingerprint {
    pub fn new(method: Method, symbols: impl Into<String>, entropy_bits: u32) -> Result<Self, FingerprintError> {
        let symbols = symbols.into();
        if symbols.is_empty() {
            return Err(FingerprintError::InvalidSymbols("empty".into()));
        }
        if !symbols.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return Err(FingerprintError::InvalidSymbols(format!("'{symbols}' is not lowercase hex")));
        }
        if let Some(n) = method.symbol_len() {
            if symbols.len() != n {
                return Err(FingerprintError::InvalidSymbols(format!(
                    "{method} fingerprints have {n} symbols, got {}",
                    symbols.len()
                )));
            }
        }
        if entropy_bits as usize > 4 * symbols.len() {
            return Err(FingerprintError::InvalidArgument(format!(
                "{entropy_bits} bits of entropy in {} hex symbols",
                symbols.len()
            )));
        }
        Ok(Fingerprint { method, symbols, entropy_bits })
    }

    /// Parses user-supplied hex, inferring the method from its length when
    /// `method` is `None`: 5 symbols is a clock value, 64 a finite-precision
    /// hash, anything else a composite.
    pub fn parse(symbols: &str, method: Option<Method>) -> Result<Self, FingerprintError> {
        let symbols = symbols.trim().to_ascii_lowercase();
        let method = method.unwrap_or(match symbols.len() {
            5 => Method::Clock,
            64 => Method::FinitePrecision,
            _ => Method::Composite,
        });
        let bits = entropy_estimate(method, 0).bits.min(4 * symbols.len() as u32);
        Fingerprint::new(method, symbols, bits)
    }

    /// Clock-namespace fingerprint for a raw 20-bit value.
    pub fn clock_value(value: u32) -> Self {
        Fingerprint {
            method: Method::Clock,
            symbols: format!("{:05x}", value & 0xf_ffff),
            entropy_bits: 20,
        }
    }

    /// Concatenates fingerprints for additional key material.
    pub fn combine(parts: &[Fingerprint]) -> Result<Self, FingerprintError> {
        if parts.is_empty() {
            return Err(FingerprintError::InvalidArgument("no fingerprints to combine".into()));
        }
        let symbols: String = parts.iter().map(|p| p.symbols.as_str()).collect();
        let bits = parts.iter().map(|p| p.entropy_bits).sum::<u32>().min(256);
        Fingerprint::new(Method::Composite, symbols, bits)
    }

    pub fn derive_key(&self) -> Key {
        derive_key(self)
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.method, self.symbols)
    }
}

pub fn derive_key(fp: &Fingerprint) -> Key {
    let mut h = Sha256::new();
    h.update([fp.method.tag()]);
    h.update(fp.symbols.as_bytes());
    Key(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyBound {
    /// Number of output bits; real entropy is lower and unmeasured.
    UpperBound,
    /// Two bits per probe operation, from error equivalence classes.
    Theoretical,
    /// Capped at the key size.
    KeySize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub bits: u32,
    pub bound: EntropyBound,
}

/// Entropy budget per method. `probe_ops` is the number of operations in a
/// finite-precision probe and is ignored for other methods.
pub fn entropy_estimate(method: Method, probe_ops: u32) -> EntropyEstimate {
    match method {
        Method::Clock => EntropyEstimate { bits: 20, bound: EntropyBound::UpperBound },
        Method::FinitePrecision => EntropyEstimate {
            bits: (2 * probe_ops).min(256),
            bound: EntropyBound::Theoretical,
        },
        Method::Puf | Method::Composite => EntropyEstimate { bits: 256, bound: EntropyBound::KeySize },
    }
}

/// Fingerprints a model owner accepts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub label: String,
    pub authorized: Vec<Fingerprint>,
}

impl HardwareProfile {
    pub fn new(label: impl Into<String>, authorized: Vec<Fingerprint>) -> Result<Self, FingerprintError> {
        if authorized.is_empty() {
            return Err(FingerprintError::InvalidArgument("profile has no authorized fingerprints".into()));
        }
        Ok(HardwareProfile { label: label.into(), authorized })
    }

    pub fn is_authorized(&self, fp: &Fingerprint) -> bool {
        self.authorized.contains(fp)
    }
}
