//! Named-array checkpoint container.
//!
//! Layout, all integers little-endian: `DDTC`, `u32` schema version, `u64`
//! metadata length, metadata JSON, `u64` step, `u32` array count, then per
//! array: `u32` name length, UTF-8 name, `u8` element type, `u32` rank,
//! `u64` per dimension, row-major data.

use std::collections::BTreeMap;
use std::path::Path;

use ddt_core::Matrix;

use crate::error::{DdtError, FormatError, Result};
use crate::fsutil::{read_bytes, write_atomic};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DDTC";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

const TAG_F64: u8 = 1;
const TAG_U32: u8 = 2;

#[derive(Clone, Debug)]
pub enum ArrayData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tag(&self) -> u8 {
        match self {
            ArrayData::F64(_) => TAG_F64,
            ArrayData::U32(_) => TAG_U32,
        }
    }
}

/// Bitwise equality, so NaN payloads compare equal to themselves.
impl PartialEq for ArrayData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ArrayData::F64(a), ArrayData::F64(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (ArrayData::U32(a), ArrayData::U32(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: ArrayData,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self, FormatError> {
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        if n != Some(data.len()) {
            return Err(FormatError::new(0, format!("shape {shape:?} does not hold {} elements", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self { shape: vec![m.rows(), m.cols()], data: ArrayData::F64(m.as_slice().to_vec()) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &ArrayData {
        &self.data
    }

    /// Two-dimensional `f64` arrays as matrices.
    pub fn to_matrix(&self) -> Option<Matrix> {
        match (&self.shape[..], &self.data) {
            (&[r, c], ArrayData::F64(v)) => Matrix::from_vec(r, c, v.clone()).ok(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub step: u64,
    pub arrays: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value, step: u64) -> Self {
        Self { metadata, step, arrays: BTreeMap::new() }
    }

    pub fn insert_matrices(&mut self, named: impl IntoIterator<Item = (String, Matrix)>) {
        for (name, m) in named {
            self.arrays.insert(name, Array::from_matrix(&m));
        }
    }

    /// Every two-dimensional `f64` array as a matrix.
    pub fn matrices(&self) -> BTreeMap<String, Matrix> {
        self.arrays.iter().filter_map(|(k, a)| a.to_matrix().map(|m| (k.clone(), m))).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("JSON values serialize");
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(a.data.tag());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
                ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    /// Parses a container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let fmt = |e: FormatError| e.at(path);
        if r.take(4).map_err(fmt)? != CHECKPOINT_MAGIC {
            return Err(FormatError::new(0, "bad magic").at(path));
        }
        let version = r.u32().map_err(fmt)?;
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(DdtError::Version { path: path.into(), found: version, expected: CHECKPOINT_SCHEMA_VERSION });
        }
        let raw_len = r.u64().map_err(fmt)?;
        let meta_len = r.len(raw_len).map_err(fmt)?;
        let metadata = serde_json::from_slice(r.take(meta_len).map_err(fmt)?)
            .map_err(|e| DdtError::Metadata { path: path.into(), reason: e.to_string() })?;
        let step = r.u64().map_err(fmt)?;
        let count = r.u32().map_err(fmt)?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32().map_err(fmt)? as usize;
            let name = std::str::from_utf8(r.take(name_len).map_err(fmt)?)
                .map_err(|_| FormatError::new(at + 4, "array name is not UTF-8").at(path))?
                .to_string();
            let tag_at = r.pos;
            let tag = r.take(1).map_err(fmt)?[0];
            let rank = r.u32().map_err(fmt)? as usize;
            let shape = (0..rank).map(|_| r.u64().and_then(|d| r.len(d))).collect::<Result<Vec<_>, _>>().map_err(fmt)?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| FormatError::new(tag_at + 1, "array size overflows").at(path))?;
            let data = match tag {
                TAG_F64 => ArrayData::F64(r.chunks::<8>(n).map_err(fmt)?.map(|b| f64::from_bits(u64::from_le_bytes(b))).collect()),
                TAG_U32 => ArrayData::U32(r.chunks::<4>(n).map_err(fmt)?.map(u32::from_le_bytes).collect()),
                other => return Err(FormatError::new(tag_at, format!("unknown element type {other}")).at(path)),
            };
            if arrays.insert(name.clone(), Array { shape, data }).is_some() {
                return Err(FormatError::new(at, format!("duplicate array name `{name}`")).at(path));
            }
        }
        if r.pos != bytes.len() {
            return Err(FormatError::new(r.pos, "trailing bytes").at(path));
        }
        Ok(Self { metadata, step, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(FormatError::new(self.bytes.len(), format!("truncated: needed {n} bytes at offset {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn len(&self, v: u64) -> Result<usize, FormatError> {
        usize::try_from(v).map_err(|_| FormatError::new(self.pos, format!("length {v} does not fit in memory")))
    }

    fn chunks<const N: usize>(&mut self, n: usize) -> Result<impl Iterator<Item = [u8; N]> + 'a, FormatError> {
        let total = n.checked_mul(N).ok_or_else(|| FormatError::new(self.pos, "array size overflows"))?;
        Ok(self.take(total)?.chunks_exact(N).map(|c| c.try_into().expect("exact chunk")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn path() -> &'static Path {
        Path::new("mem.ddtc")
    }

    #[test]
    fn identity_matrix_round_trip() {
        let mut c = Checkpoint::new(json!({"schema": "test"}), 3);
        c.insert_matrices([("eye".to_string(), Matrix::identity(2))]);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, path()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.matrices()["eye"], Matrix::identity(2));
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let mut b = Checkpoint::new(json!(null), 0).to_bytes();
        b[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b, path()), Err(DdtError::Version { found: 9, expected: 1, .. })));
    }

    #[test]
    fn three_names_survive() {
        let mut c = Checkpoint::new(json!({}), 0);
        for n in ["b", "a", "c"] {
            c.insert_matrices([(n.to_string(), Matrix::zeros(1, 1))]);
        }
        let back = Checkpoint::from_bytes(&c.to_bytes(), path()).unwrap();
        assert_eq!(back.arrays.keys().collect::<Vec<_>>(), ["a", "b", "c"]);
    }

    #[test]
    fn unknown_element_type_and_bad_metadata() {
        let mut c = Checkpoint::new(json!({}), 0);
        c.arrays.insert("x".into(), Array::new(vec![1], ArrayData::U32(vec![7])).unwrap());
        let mut b = c.to_bytes();
        // magic, version, meta len, "{}", step, count, name len, "x"
        let tag_at = 4 + 4 + 8 + 2 + 8 + 4 + 4 + 1;
        b[tag_at] = 42;
        match Checkpoint::from_bytes(&b, path()) {
            Err(DdtError::Format { offset, reason, .. }) => {
                assert_eq!(offset, tag_at as u64);
                assert!(reason.contains("element type"));
            }
            other => panic!("{other:?}"),
        }
        let mut b = c.to_bytes();
        b[16] = b'[';
        assert!(matches!(Checkpoint::from_bytes(&b, path()), Err(DdtError::Metadata { .. })));
    }

    #[test]
    fn truncation_is_located() {
        let mut c = Checkpoint::new(json!({"k": 1}), 5);
        c.insert_matrices([("w".to_string(), Matrix::filled(2, 3, 0.5))]);
        let b = c.to_bytes();
        for cut in [0, 3, 10, b.len() - 1] {
            assert!(Checkpoint::from_bytes(&b[..cut], path()).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn array_shape_must_match() {
        assert!(Array::new(vec![2, 2], ArrayData::F64(vec![1.0; 3])).is_err());
        assert!(Array::new(vec![], ArrayData::U32(vec![1])).is_ok());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/c.ddtc");
        let mut c = Checkpoint::new(json!({"a": [1, 2]}), 11);
        c.insert_matrices([("m".to_string(), Matrix::filled(3, 2, -1.5))]);
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(DdtError::Io { .. })));
    }

    fn array() -> impl Strategy<Value = Array> {
        let f = proptest::collection::vec(0usize..5, 0..4).prop_flat_map(|shape| {
            let n = shape.iter().product::<usize>();
            (Just(shape), proptest::collection::vec(any::<u64>().prop_map(f64::from_bits), n))
                .prop_map(|(s, v)| Array::new(s, ArrayData::F64(v)).unwrap())
        });
        let u = proptest::collection::vec(0usize..5, 0..3).prop_flat_map(|shape| {
            let n = shape.iter().product::<usize>();
            (Just(shape), proptest::collection::vec(any::<u32>(), n))
                .prop_map(|(s, v)| Array::new(s, ArrayData::U32(v)).unwrap())
        });
        prop_oneof![f, u]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn random_containers_round_trip(
            arrays in proptest::collection::btree_map("[a-z/]{1,12}", array(), 0..6),
            step in any::<u64>(),
            note in ".{0,20}",
            x in any::<i64>(),
        ) {
            let c = Checkpoint { metadata: json!({"note": note, "x": x}), step, arrays };
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, path()).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, c);
        }
    }
}
