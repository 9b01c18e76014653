//! Hard-locking parameter transforms and the `MLCK` container.
//!
//! ```text
//! "MLCK" | u16 version=1 | u8 kind (0 aes, 1 shuffle, 2 pt-aes) | 16-byte nonce
//! schema: u32 count, per tensor name/dtype/rank/dims as in MLPS
//! meta:   u32 count, key/value strings
//! pretransform: u8 tag
//!     0 none
//!     1 gaussian: f64 mean, f64 std
//!     2 lut: u8 code bits, u8 table bits, u8 dtype tag,
//!            2^table_bits u32 forward, 2^table_bits u32 inverse
//! u64 payload length, payload
//! SHA-256 of all preceding bytes
//! ```

mod aes;
pub mod pretransform;
pub mod rans;
pub mod shuffle;

pub use self::aes::apply_keystream;
pub use pretransform::{build_empirical_pretransform, gaussian_cdf, EmpiricalLut, PreTransform, SaturationPolicy};
pub use shuffle::log10_factorial;

use crate::fingerprint::Key;
use crate::param_store::{ParamStore, Schema, StoreError};
use crate::wire::{self, Reader, TrailerError, WireError};
use rand::RngCore;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"MLCK";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TransformError {
    #[error("descriptor error: {0}")]
    Descriptor(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("{count} values saturated the gaussian pre-transform")]
    OutlierSaturation { count: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("bad magic: expected MLCK")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("locked file truncated")]
    Truncated,
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed locked file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<WireError> for TransformError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Truncated(_) => TransformError::Truncated,
            WireError::Malformed(m) => TransformError::Malformed(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Aes,
    Shuffle,
    PretransformedAes,
}

impl TransformKind {
    pub const ALL: [TransformKind; 3] = [TransformKind::Aes, TransformKind::Shuffle, TransformKind::PretransformedAes];

    pub fn tag(self) -> u8 {
        match self {
            TransformKind::Aes => 0,
            TransformKind::Shuffle => 1,
            TransformKind::PretransformedAes => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn uses_aes(self) -> bool {
        self != TransformKind::Shuffle
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransformKind::Aes => "aes",
            TransformKind::Shuffle => "shuffle",
            TransformKind::PretransformedAes => "pt-aes",
        })
    }
}

impl std::str::FromStr for TransformKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "aes" => Ok(TransformKind::Aes),
            "shuffle" => Ok(TransformKind::Shuffle),
            "pt-aes" | "ptaes" => Ok(TransformKind::PretransformedAes),
            _ => Err(format!("unknown transform '{s}' (aes, shuffle, pt-aes)")),
        }
    }
}

/// Public description of how a payload was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformDescriptor {
    pub kind: TransformKind,
    /// Present iff the kind uses AES.
    pub nonce: Option<[u8; 16]>,
    pub schema: Schema,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LockedModel {
    pub descriptor: TransformDescriptor,
    pub payload: Vec<u8>,
    /// Public and unencrypted.
    pub pretransform: Option<PreTransform>,
    pub meta: BTreeMap<String, String>,
    pub integrity: [u8; 32],
    /// Values clamped by a gaussian pre-transform at lock time. Not stored.
    pub saturated: usize,
}

impl LockedModel {
    fn new(
        kind: TransformKind,
        nonce: Option<[u8; 16]>,
        store: &ParamStore,
        payload: Vec<u8>,
        pretransform: Option<PreTransform>,
    ) -> Self {
        LockedModel {
            descriptor: TransformDescriptor { kind, nonce, schema: store.schema() },
            integrity: wire::sha256(&payload),
            payload,
            pretransform,
            meta: store.meta.clone(),
            saturated: 0,
        }
    }

    pub fn kind(&self) -> TransformKind {
        self.descriptor.kind
    }

    fn nonce(&self) -> Result<[u8; 16], TransformError> {
        self.descriptor.nonce.ok_or_else(|| TransformError::Descriptor("missing nonce".into()))
    }

    fn check(&self, kind: TransformKind) -> Result<(), TransformError> {
        if self.descriptor.kind != kind {
            return Err(TransformError::Descriptor(format!(
                "payload was locked with {}, not {kind}",
                self.descriptor.kind
            )));
        }
        // an entropy-coded stream may outgrow a store of a few bytes
        let need = self.descriptor.schema.byte_len();
        let fits = match kind {
            TransformKind::PretransformedAes => self.payload.len() >= need,
            _ => self.payload.len() == need,
        };
        if !fits {
            return Err(TransformError::Store(StoreError::Schema(format!(
                "payload is {} bytes, schema needs {}",
                self.payload.len(),
                self.descriptor.schema.byte_len()
            ))));
        }
        Ok(())
    }

    fn restore(&self, store: ParamStore) -> ParamStore {
        let mut store = store;
        store.meta = self.meta.clone();
        store
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload.len() + 256);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.descriptor.kind.tag());
        out.extend_from_slice(&self.descriptor.nonce.unwrap_or([0; 16]));
        self.descriptor.schema.write(&mut out);
        wire::put_meta(&mut out, &self.meta);
        match &self.pretransform {
            None => out.push(0),
            Some(PreTransform::GaussianAnalytic { mean, std }) => {
                out.push(1);
                out.extend_from_slice(&mean.to_le_bytes());
                out.extend_from_slice(&std.to_le_bytes());
            }
            Some(PreTransform::EmpiricalLut(lut)) => {
                out.push(2);
                out.extend_from_slice(&[lut.bits as u8, lut.table_bits as u8, lut.dtype_tag]);
                for v in lut.forward().iter().chain(lut.inverse()) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let digest = wire::sha256(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TransformError> {
        if bytes.len() < 4 {
            return Err(TransformError::Truncated);
        }
        if bytes[..4] != MAGIC {
            return Err(TransformError::BadMagic);
        }
        if bytes.len() >= 6 {
            let version = u16::from_le_bytes([bytes[4], bytes[5]]);
            if version != VERSION {
                return Err(TransformError::UnsupportedVersion(version));
            }
        }
        let body = wire::check_trailer(bytes).map_err(|e| match e {
            TrailerError::Truncated => TransformError::Truncated,
            TrailerError::Mismatch => TransformError::ChecksumMismatch,
        })?;
        let mut r = Reader::new(&body[6..]);
        let tag = r.u8()?;
        let kind = TransformKind::from_tag(tag).ok_or_else(|| TransformError::Malformed(format!("kind {tag}")))?;
        let nonce: [u8; 16] = r.take(16)?.try_into().unwrap();
        let schema = Schema::read(&mut r)?;
        let meta = wire::get_meta(&mut r)?;
        let pretransform = match r.u8()? {
            0 => None,
            1 => {
                let (mean, std) = (r.f64()?, r.f64()?);
                if !(std > 0.0 && mean.is_finite() && std.is_finite()) {
                    return Err(TransformError::Malformed(format!("gaussian mean {mean}, std {std}")));
                }
                Some(PreTransform::GaussianAnalytic { mean, std })
            }
            2 => {
                let bits = r.u8()? as u32;
                let table_bits = r.u8()? as u32;
                let dtype_tag = r.u8()?;
                if bits == 0 || bits > 32 || table_bits != bits.min(pretransform::MAX_TABLE_BITS) {
                    return Err(TransformError::Malformed(format!("table of {table_bits} bits for {bits}-bit codes")));
                }
                let n = 1usize << table_bits;
                let mut read_table = || -> Result<Vec<u32>, WireError> { (0..n).map(|_| r.u32()).collect() };
                let forward = read_table()?;
                let inverse = read_table()?;
                Some(PreTransform::EmpiricalLut(EmpiricalLut::from_tables(bits, dtype_tag, forward, inverse)?))
            }
            t => return Err(TransformError::Malformed(format!("pretransform tag {t}"))),
        };
        let len = r.u64()? as usize;
        let payload = r.take(len)?.to_vec();
        if r.remaining() != 0 {
            return Err(TransformError::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        if kind == TransformKind::PretransformedAes && pretransform.is_none() {
            return Err(TransformError::Descriptor("pt-aes file without a pre-transform".into()));
        }
        let descriptor = TransformDescriptor { kind, nonce: kind.uses_aes().then_some(nonce), schema };
        Ok(LockedModel { descriptor, integrity: wire::sha256(&payload), payload, pretransform, meta, saturated: 0 })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TransformError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TransformError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn fresh_nonce(rng: &mut dyn RngCore) -> [u8; 16] {
    let mut n = [0u8; 16];
    rng.fill_bytes(&mut n);
    n
}

pub fn aes_lock(store: &ParamStore, key: &Key, rng: &mut dyn RngCore) -> LockedModel {
    let nonce = fresh_nonce(rng);
    let mut payload = store.flatten();
    apply_keystream(key, &nonce, &mut payload);
    LockedModel::new(TransformKind::Aes, Some(nonce), store, payload, None)
}

/// Never detects a wrong key: any key yields a schema-valid store.
pub fn aes_unlock(locked: &LockedModel, key: &Key) -> Result<ParamStore, TransformError> {
    locked.check(TransformKind::Aes)?;
    let mut bytes = locked.payload.clone();
    apply_keystream(key, &locked.nonce()?, &mut bytes);
    Ok(locked.restore(ParamStore::unflatten(&bytes, &locked.descriptor.schema)?))
}

pub fn shuffle_lock(store: &ParamStore, key: &Key) -> LockedModel {
    let schema = store.schema();
    let payload = shuffle::permute(&store.flatten(), &schema, key, false);
    LockedModel::new(TransformKind::Shuffle, None, store, payload, None)
}

pub fn shuffle_unlock(locked: &LockedModel, key: &Key) -> Result<ParamStore, TransformError> {
    locked.check(TransformKind::Shuffle)?;
    let schema = &locked.descriptor.schema;
    let bytes = shuffle::permute(&locked.payload, schema, key, true);
    Ok(locked.restore(ParamStore::unflatten(&bytes, schema)?))
}

pub fn pretransformed_aes_lock(
    store: &ParamStore,
    key: &Key,
    pre: &PreTransform,
    policy: SaturationPolicy,
    rng: &mut dyn RngCore,
) -> Result<LockedModel, TransformError> {
    let nonce = fresh_nonce(rng);
    let (mut payload, saturated) = pre.encode(store, policy, rng)?;
    apply_keystream(key, &nonce, &mut payload);
    let mut locked = LockedModel::new(TransformKind::PretransformedAes, Some(nonce), store, payload, Some(pre.clone()));
    locked.saturated = saturated;
    Ok(locked)
}

pub fn pretransformed_aes_unlock(locked: &LockedModel, key: &Key) -> Result<ParamStore, TransformError> {
    locked.check(TransformKind::PretransformedAes)?;
    let pre = locked
        .pretransform
        .as_ref()
        .ok_or_else(|| TransformError::Descriptor("missing pre-transform".into()))?;
    let mut bytes = locked.payload.clone();
    apply_keystream(key, &locked.nonce()?, &mut bytes);
    Ok(locked.restore(pre.decode(&bytes, &locked.descriptor.schema)?))
}

/// Locks with `kind`. `pre` is required for pt-AES and ignored otherwise.
pub fn lock(
    kind: TransformKind,
    store: &ParamStore,
    key: &Key,
    pre: Option<&PreTransform>,
    rng: &mut dyn RngCore,
) -> Result<LockedModel, TransformError> {
    match kind {
        TransformKind::Aes => Ok(aes_lock(store, key, rng)),
        TransformKind::Shuffle => Ok(shuffle_lock(store, key)),
        TransformKind::PretransformedAes => {
            let pre = pre.ok_or_else(|| TransformError::Descriptor("pt-aes needs a pre-transform".into()))?;
            pretransformed_aes_lock(store, key, pre, SaturationPolicy::default(), rng)
        }
    }
}

pub fn unlock(locked: &LockedModel, key: &Key) -> Result<ParamStore, TransformError> {
    match locked.kind() {
        TransformKind::Aes => aes_unlock(locked, key),
        TransformKind::Shuffle => shuffle_unlock(locked, key),
        TransformKind::PretransformedAes => pretransformed_aes_unlock(locked, key),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtype::Dtype;
    use crate::param_store::ParamTensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn store(seed: u64, n: usize, dtype: Dtype) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.1).unwrap();
        let a: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let b: Vec<f32> = (0..n / 4 + 1).map(|_| normal.sample(&mut rng)).collect();
        let mut s = ParamStore::new().with_meta("arch", "test");
        s.push(ParamTensor::from_values("a", vec![n], dtype, &a).unwrap()).unwrap();
        s.push(ParamTensor::from_values("b", vec![b.len()], dtype, &b).unwrap()).unwrap();
        s
    }

    fn key(i: u8) -> Key {
        Key([i; 32])
    }

    fn lock_all(s: &ParamStore, k: &Key, rng: &mut ChaCha8Rng) -> Vec<LockedModel> {
        let lut = build_empirical_pretransform(s, s.tensors()[0].dtype.code_bits()).unwrap();
        vec![
            aes_lock(s, k, rng),
            shuffle_lock(s, k),
            pretransformed_aes_lock(s, k, &lut, SaturationPolicy::Reject, rng).unwrap(),
        ]
    }

    #[test]
    fn tiny_store_survives_pretransform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = store(5, 5, Dtype::MiniFloat8);
        let lut = build_empirical_pretransform(&s, 8).unwrap();
        let locked = pretransformed_aes_lock(&s, &key(2), &lut, SaturationPolicy::Reject, &mut rng).unwrap();
        assert!(locked.payload.len() > s.flatten().len());
        let file = LockedModel::from_bytes(&locked.to_bytes()).unwrap();
        assert_eq!(unlock(&file, &key(2)).unwrap(), s);
        assert_eq!(unlock(&file, &key(3)).unwrap().schema(), s.schema());
    }

    #[test]
    fn round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (i, dtype) in [Dtype::Fp32, Dtype::Fp16, Dtype::MiniFloat8].into_iter().enumerate() {
            let s = store(i as u64, 3000, dtype);
            for locked in lock_all(&s, &key(1), &mut rng) {
                assert_eq!(locked.payload.len(), s.flatten().len());
                let back = unlock(&locked, &key(1)).unwrap();
                assert_eq!(back, s, "{}", locked.kind());
                let file = LockedModel::from_bytes(&locked.to_bytes()).unwrap();
                assert_eq!(file.saturated, 0);
                assert_eq!(unlock(&file, &key(1)).unwrap(), s);
            }
        }
    }

    #[test]
    fn wrong_key_is_structurally_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = store(2, 2000, Dtype::Fp16);
        for locked in lock_all(&s, &key(1), &mut rng) {
            let bad = unlock(&locked, &key(2)).unwrap();
            assert_eq!(bad.schema(), s.schema());
            assert_ne!(bad.flatten(), s.flatten());
        }
    }

    #[test]
    fn single_value_shuffle_is_identity() {
        let mut s = ParamStore::new();
        s.push(ParamTensor::from_values("x", vec![1], Dtype::Fp32, &[1.5]).unwrap()).unwrap();
        assert_eq!(shuffle_lock(&s, &key(9)).payload, s.flatten());
    }

    #[test]
    fn shuffle_preserves_value_multiset() {
        let s = store(3, 500, Dtype::Fp32);
        let locked = shuffle_lock(&s, &key(1));
        let mut a = unlock(&locked, &key(7)).unwrap().values();
        let mut b = s.values();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn shuffle_keeps_dtype_groups_apart() {
        let mut s = ParamStore::new();
        s.push(ParamTensor::from_values("h", vec![50], Dtype::Fp16, &[1.0; 50]).unwrap()).unwrap();
        s.push(ParamTensor::from_values("f", vec![50], Dtype::Fp32, &[2.0; 50]).unwrap()).unwrap();
        s.push(ParamTensor::from_values("h2", vec![50], Dtype::Fp16, &[3.0; 50]).unwrap()).unwrap();
        let bad = unlock(&shuffle_lock(&s, &key(1)), &key(2)).unwrap();
        assert!(bad.get("f").unwrap().values().iter().all(|&v| v == 2.0));
        let mixed: Vec<f32> = bad.get("h").unwrap().values();
        assert!(mixed.contains(&1.0) && mixed.contains(&3.0));
    }

    #[test]
    fn aes_payload_flips_half_the_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..5 {
            let s = store(seed, 4000, Dtype::Fp32);
            let locked = aes_lock(&s, &Key(rng.gen()), &mut rng);
            let plain = s.flatten();
            let diff: u32 = plain.iter().zip(&locked.payload).map(|(a, b)| (a ^ b).count_ones()).sum();
            let frac = diff as f64 / (plain.len() * 8) as f64;
            assert!(frac >= 0.49, "{frac}");
        }
    }

    #[test]
    fn fresh_nonce_per_lock() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = store(1, 100, Dtype::Fp32);
        let a = aes_lock(&s, &key(1), &mut rng);
        let b = aes_lock(&s, &key(1), &mut rng);
        assert_ne!(a.descriptor.nonce, b.descriptor.nonce);
        assert_ne!(a.payload, b.payload);
        assert!(shuffle_lock(&s, &key(1)).descriptor.nonce.is_none());
    }

    #[test]
    fn kind_mismatch_and_missing_pretransform() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = store(1, 100, Dtype::Fp16);
        let locked = aes_lock(&s, &key(1), &mut rng);
        assert!(matches!(shuffle_unlock(&locked, &key(1)), Err(TransformError::Descriptor(_))));
        assert!(matches!(
            lock(TransformKind::PretransformedAes, &s, &key(1), None, &mut rng),
            Err(TransformError::Descriptor(_))
        ));
        let mut pt = lock_all(&s, &key(1), &mut rng).pop().unwrap();
        pt.pretransform = None;
        assert!(matches!(unlock(&pt, &key(1)), Err(TransformError::Descriptor(_))));
    }

    #[test]
    fn gaussian_mode_survives_the_file_format() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = store(8, 1000, Dtype::Fp16);
        let pre = PreTransform::fit_gaussian(&s).unwrap();
        let locked = pretransformed_aes_lock(&s, &key(1), &pre, SaturationPolicy::Clamp, &mut rng).unwrap();
        let file = LockedModel::from_bytes(&locked.to_bytes()).unwrap();
        assert_eq!(file.pretransform, Some(pre));
        let back = unlock(&file, &key(1)).unwrap().values();
        // lossy: within a few code widths of the original
        for (a, b) in back.iter().zip(s.values()) {
            assert!((a - b).abs() < 0.01, "{a} vs {b}");
        }
    }

    #[test]
    fn file_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = store(1, 64, Dtype::Fp32);
        let bytes = aes_lock(&s, &key(1), &mut rng).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(LockedModel::from_bytes(&bad), Err(TransformError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(LockedModel::from_bytes(&bad), Err(TransformError::UnsupportedVersion(9))));
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(LockedModel::from_bytes(&bad), Err(TransformError::ChecksumMismatch)));
        assert!(matches!(LockedModel::from_bytes(&bytes[..20]), Err(TransformError::Truncated)));
    }
}
