//! Named, typed, ordered parameter tensors and the `MLPS` file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MLPS" | u16 version=1 | u32 tensor count
//! per tensor: u16 name len, name (UTF-8), u8 dtype tag
//!             [tag 4 only: f32 scale, i8 zero point]
//!             u8 rank, rank x u64 dims, raw data
//! u32 meta count, per entry: u16 key len, key, u32 value len, value
//! SHA-256 of all preceding bytes
//! ```

use crate::dtype::Dtype;
use crate::wire::{self, Reader, TrailerError, WireError};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"MLPS";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("bad magic: expected MLPS")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<WireError> for StoreError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Truncated(_) => StoreError::Truncated,
            WireError::Malformed(m) => StoreError::Malformed(m),
        }
    }
}

/// Shape and type of one tensor, without data.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

impl TensorSpec {
    pub fn count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.count() * self.dtype.width()
    }
}

/// Ordered list of tensor specs; enough to rebuild a store from a flat stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Schema(pub Vec<TensorSpec>);

impl Schema {
    pub fn byte_len(&self) -> usize {
        self.0.iter().map(TensorSpec::byte_len).sum()
    }

    pub fn value_count(&self) -> usize {
        self.0.iter().map(TensorSpec::count).sum()
    }

    /// Dtype of each value in flat order, run-length grouped by tensor.
    pub fn value_dtypes(&self) -> impl Iterator<Item = (Dtype, usize)> + '_ {
        self.0.iter().map(|t| (t.dtype, t.count()))
    }

    pub(crate) fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.0.len() as u32).to_le_bytes());
        for t in &self.0 {
            write_spec(out, t);
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let n = r.u32()?;
        let mut specs = Vec::new();
        for _ in 0..n {
            specs.push(read_spec(r)?);
        }
        Ok(Schema(specs))
    }
}

fn write_spec(out: &mut Vec<u8>, t: &TensorSpec) {
    wire::put_str16(out, &t.name);
    wire::put_dtype(out, &t.dtype);
    out.push(t.shape.len() as u8);
    for &d in &t.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn read_spec(r: &mut Reader<'_>) -> Result<TensorSpec, WireError> {
    let name = r.str16()?;
    let dtype = wire::get_dtype(r)?;
    let rank = r.u8()?;
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let d = r.u64()?;
        if d == 0 || d > u32::MAX as u64 {
            return Err(WireError::Malformed(format!("dimension {d} in '{name}'")));
        }
        shape.push(d as usize);
    }
    Ok(TensorSpec { name, shape, dtype })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    data: Vec<u8>,
}

impl ParamTensor {
    pub fn from_bytes(
        name: impl Into<String>,
        shape: Vec<usize>,
        dtype: Dtype,
        data: Vec<u8>,
    ) -> Result<Self, StoreError> {
        let name = name.into();
        if shape.contains(&0) {
            return Err(StoreError::Schema(format!("'{name}': zero dimension in {shape:?}")));
        }
        let count: usize = shape.iter().product();
        if data.len() != count * dtype.width() {
            return Err(StoreError::Schema(format!(
                "'{name}': {} bytes for {count} values of {dtype}",
                data.len()
            )));
        }
        Ok(ParamTensor { name, shape, dtype, data })
    }

    /// Encodes `values` into `dtype`.
    pub fn from_values(
        name: impl Into<String>,
        shape: Vec<usize>,
        dtype: Dtype,
        values: &[f32],
    ) -> Result<Self, StoreError> {
        let mut data = Vec::with_capacity(values.len() * dtype.width());
        for &v in values {
            dtype.write_code(dtype.encode(v), &mut data);
        }
        Self::from_bytes(name, shape, dtype, data)
    }

    pub fn spec(&self) -> TensorSpec {
        TensorSpec { name: self.name.clone(), shape: self.shape.clone(), dtype: self.dtype }
    }

    pub fn count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn codes(&self) -> impl Iterator<Item = u32> + '_ {
        self.data.chunks_exact(self.dtype.width()).map(|c| self.dtype.read_code(c))
    }

    pub fn values(&self) -> Vec<f32> {
        self.codes().map(|c| self.dtype.decode(c)).collect()
    }
}

/// The unit every lock, unlock and attack acts on.
///
/// Tensor order is part of identity: [`ParamStore::flatten`] concatenates
/// buffers in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
    pub meta: BTreeMap<String, String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: ParamTensor) -> Result<(), StoreError> {
        if self.tensors.iter().any(|t| t.name == tensor.name) {
            return Err(StoreError::Schema(format!("duplicate tensor name '{}'", tensor.name)));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn schema(&self) -> Schema {
        Schema(self.tensors.iter().map(ParamTensor::spec).collect())
    }

    pub fn value_count(&self) -> usize {
        self.tensors.iter().map(ParamTensor::count).sum()
    }

    /// All values decoded to f32, in flat order.
    pub fn values(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.value_count());
        for t in &self.tensors {
            out.extend(t.codes().map(|c| t.dtype.decode(c)));
        }
        out
    }

    /// Concatenated tensor buffers in declared order. No header.
    pub fn flatten(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.schema().byte_len());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn unflatten(bytes: &[u8], schema: &Schema) -> Result<Self, StoreError> {
        if bytes.len() != schema.byte_len() {
            return Err(StoreError::Schema(format!(
                "stream is {} bytes, schema needs {}",
                bytes.len(),
                schema.byte_len()
            )));
        }
        let mut seen = HashSet::new();
        let mut store = ParamStore::new();
        let mut off = 0;
        for spec in &schema.0 {
            if !seen.insert(spec.name.as_str()) {
                return Err(StoreError::Schema(format!("duplicate tensor name '{}'", spec.name)));
            }
            let n = spec.byte_len();
            store.tensors.push(ParamTensor::from_bytes(
                spec.name.clone(),
                spec.shape.clone(),
                spec.dtype,
                bytes[off..off + n].to_vec(),
            )?);
            off += n;
        }
        Ok(store)
    }

    /// Re-encodes every tensor into `dtype`. Int8 targets get a per-tensor
    /// symmetric scale of `max|w| / 127`.
    pub fn cast(&self, dtype: Dtype) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let values = t.values();
                let target = match dtype {
                    Dtype::Int8Affine { .. } => symmetric_int8(&values),
                    d => d,
                };
                ParamTensor::from_values(t.name.clone(), t.shape.clone(), target, &values)
                    .expect("shape unchanged")
            })
            .collect();
        ParamStore { tensors, meta: self.meta.clone() }
    }

    /// Replaces tensor values, keeping names, shapes, dtypes and order.
    pub fn map_values(&self, mut f: impl FnMut(usize, &ParamTensor, Vec<f32>) -> Vec<f32>) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let v = f(i, t, t.values());
                ParamTensor::from_values(t.name.clone(), t.shape.clone(), t.dtype, &v)
                    .expect("value count preserved")
            })
            .collect();
        ParamStore { tensors, meta: self.meta.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            write_spec(&mut out, &t.spec());
            out.extend_from_slice(&t.data);
        }
        wire::put_meta(&mut out, &self.meta);
        let digest = wire::sha256(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < 4 {
            return Err(StoreError::Truncated);
        }
        if bytes[..4] != MAGIC {
            return Err(StoreError::BadMagic);
        }
        if bytes.len() >= 6 {
            let version = u16::from_le_bytes([bytes[4], bytes[5]]);
            if version != VERSION {
                return Err(StoreError::UnsupportedVersion(version));
            }
        }
        let body = wire::check_trailer(bytes).map_err(|e| match e {
            TrailerError::Truncated => StoreError::Truncated,
            TrailerError::Mismatch => StoreError::ChecksumMismatch,
        })?;
        let mut r = Reader::new(&body[6..]);
        let n = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let spec = read_spec(&mut r)?;
            let data = r.take(spec.byte_len())?.to_vec();
            store.push(ParamTensor::from_bytes(spec.name, spec.shape, spec.dtype, data)?)?;
        }
        store.meta = wire::get_meta(&mut r)?;
        if r.remaining() != 0 {
            return Err(StoreError::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::from_file_bytes(&std::fs::read(path)?)
    }
}

pub(crate) fn symmetric_int8(values: &[f32]) -> Dtype {
    let max = values.iter().fold(0f32, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { max / 127.0 } else { 1.0 };
    Dtype::Int8Affine { scale, zero_point: 0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> ParamStore {
        let mut s = ParamStore::new().with_meta("arch", "test");
        s.push(ParamTensor::from_values("a", vec![2, 3], Dtype::Fp32, &[0.5; 6]).unwrap()).unwrap();
        s.push(ParamTensor::from_values("b", vec![5], Dtype::Fp16, &[1.0; 5]).unwrap()).unwrap();
        s.push(
            ParamTensor::from_values(
                "c",
                vec![7, 1],
                Dtype::Int8Affine { scale: 0.1, zero_point: 3 },
                &[0.2; 7],
            )
            .unwrap(),
        )
        .unwrap();
        s
    }

    #[test]
    fn flatten_single_zero() {
        let mut s = ParamStore::new();
        s.push(ParamTensor::from_values("w", vec![1], Dtype::Fp32, &[0.0]).unwrap()).unwrap();
        assert_eq!(s.flatten(), vec![0u8; 4]);
        assert!(ParamStore::new().flatten().is_empty());
    }

    #[test]
    fn flatten_length_is_sum_of_tensor_sizes() {
        // 6*4 + 5*2 + 7*1
        assert_eq!(fixture().flatten().len(), 24 + 10 + 7);
    }

    #[test]
    fn unflatten_rejects_short_stream() {
        let s = fixture();
        let mut flat = s.flatten();
        flat.pop();
        assert!(matches!(ParamStore::unflatten(&flat, &s.schema()), Err(StoreError::Schema(_))));
    }

    #[test]
    fn nan_payload_survives_round_trip() {
        let nan = f32::from_bits(0x7fc0_1234);
        let mut s = ParamStore::new();
        s.push(ParamTensor::from_values("n", vec![1], Dtype::Fp32, &[nan]).unwrap()).unwrap();
        let back = ParamStore::unflatten(&s.flatten(), &s.schema()).unwrap();
        assert_eq!(back.values()[0].to_bits(), 0x7fc0_1234);
        let back = ParamStore::from_file_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back.values()[0].to_bits(), 0x7fc0_1234);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = fixture();
        let t = ParamTensor::from_values("a", vec![1], Dtype::Fp32, &[1.0]).unwrap();
        assert!(matches!(s.push(t), Err(StoreError::Schema(_))));
    }

    #[test]
    fn file_errors_are_distinct() {
        let bytes = fixture().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ParamStore::from_file_bytes(&bad), Err(StoreError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(ParamStore::from_file_bytes(&bad), Err(StoreError::UnsupportedVersion(9))));
        assert!(matches!(ParamStore::from_file_bytes(&bytes[..5]), Err(StoreError::Truncated)));
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(ParamStore::from_file_bytes(&bad), Err(StoreError::ChecksumMismatch)));
    }

    #[test]
    fn cast_to_int8_uses_symmetric_scale() {
        let mut s = ParamStore::new();
        s.push(ParamTensor::from_values("w", vec![3], Dtype::Fp32, &[-1.0, 0.5, 1.27]).unwrap())
            .unwrap();
        let q = s.cast(Dtype::Int8Affine { scale: 1.0, zero_point: 0 });
        match q.tensors()[0].dtype {
            Dtype::Int8Affine { scale, zero_point } => {
                assert_eq!(scale, 1.27 / 127.0);
                assert_eq!(zero_point, 0);
            }
            d => panic!("{d:?}"),
        }
    }

    fn arb_store() -> impl Strategy<Value = ParamStore> {
        let dtype = prop_oneof![
            Just(Dtype::Fp32),
            Just(Dtype::Fp16),
            Just(Dtype::MiniFloat16),
            Just(Dtype::MiniFloat8),
            (0.001f32..1.0, any::<i8>()).prop_map(|(s, z)| Dtype::Int8Affine { scale: s, zero_point: z }),
        ];
        prop::collection::vec((dtype, prop::collection::vec(1usize..5, 1..3)), 0..5).prop_flat_map(
            |specs| {
                let lens: Vec<usize> =
                    specs.iter().map(|(d, s)| s.iter().product::<usize>() * d.width()).collect();
                let data = lens.iter().map(|&n| prop::collection::vec(any::<u8>(), n)).collect::<Vec<_>>();
                (Just(specs), data).prop_map(|(specs, data)| {
                    let mut s = ParamStore::new().with_meta("k", "v");
                    for (i, ((d, shape), bytes)) in specs.into_iter().zip(data).enumerate() {
                        s.push(ParamTensor::from_bytes(format!("t{i}"), shape, d, bytes).unwrap())
                            .unwrap();
                    }
                    s
                })
            },
        )
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(s in arb_store()) {
            let mut back = ParamStore::unflatten(&s.flatten(), &s.schema()).unwrap();
            back.meta = s.meta.clone();
            prop_assert_eq!(back.flatten(), s.flatten());
            prop_assert_eq!(back, s);
        }

        #[test]
        fn file_round_trip(s in arb_store()) {
            let back = ParamStore::from_file_bytes(&s.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), s.to_bytes());
        }
    }

    #[test]
    fn save_load_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mlps");
        let s = fixture();
        s.save(&path).unwrap();
        assert_eq!(ParamStore::load(&path).unwrap(), s);
    }
}
