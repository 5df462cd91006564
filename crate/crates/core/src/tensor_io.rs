//! The `.cldf` tensor container shared by every pipeline stage.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic       4 bytes   "CLDF"
//! version     u16       1
//! header_len  u32       length of the JSON header in bytes
//! header      JSON      {"dtype": "f32"|"u8", "shape": [..], "layout": "HWC"|"HW"|"NHWC", "seed_meta": {..}?}
//! payload     raw little-endian values, row-major
//! ```
//!
//! Unknown header fields are carried through a read/write cycle untouched.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CLDF";
pub const VERSION: u16 = 1;
pub const EXTENSION: &str = "cldf";

const PREAMBLE_LEN: usize = 4 + 2 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "u8")]
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "HW")]
    Hw,
    #[serde(rename = "HWC")]
    Hwc,
    #[serde(rename = "NHWC")]
    Nhwc,
}

impl Layout {
    pub fn rank(self) -> usize {
        match self {
            Layout::Hw => 2,
            Layout::Hwc => 3,
            Layout::Nhwc => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: Value,
    shape: Vec<usize>,
    layout: Layout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed_meta: Option<Value>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

/// An in-memory `.cldf` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub layout: Layout,
    pub shape: Vec<usize>,
    pub data: TensorData,
    /// Free-form metadata (thresholds, seeds, provenance).
    pub seed_meta: Option<Value>,
    /// Unknown optional header fields, preserved on round-trip.
    pub extra: Map<String, Value>,
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::ShapeOverflow(shape.to_vec()))
}

impl TensorContainer {
    pub fn new(layout: Layout, shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let t = TensorContainer {
            layout,
            shape,
            data,
            seed_meta: None,
            extra: Map::new(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn f32(layout: Layout, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(layout, shape, TensorData::F32(data))
    }

    pub fn u8(layout: Layout, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(layout, shape, TensorData::U8(data))
    }

    pub fn with_seed_meta(mut self, meta: Value) -> Self {
        self.seed_meta = Some(meta);
        self
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.shape.len()) {
            return Err(Error::InvalidTensor(format!(
                "shape must have 2 to 4 dimensions, got {}",
                self.shape.len()
            )));
        }
        if self.shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "all dimensions must be >= 1, got {:?}",
                self.shape
            )));
        }
        if self.shape.len() != self.layout.rank() {
            return Err(Error::InvalidTensor(format!(
                "layout {:?} needs rank {}, shape {:?} has rank {}",
                self.layout,
                self.layout.rank(),
                self.shape,
                self.shape.len()
            )));
        }
        let n = element_count(&self.shape)?;
        if n.checked_mul(self.dtype().size()).is_none() {
            return Err(Error::ShapeOverflow(self.shape.clone()));
        }
        if n != self.data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {:?} holds {} elements but payload has {}",
                self.shape,
                n,
                self.data.len()
            )));
        }
        Ok(())
    }

    /// Serialize to the exact on-disk byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = Header {
            dtype: serde_json::to_value(self.dtype())?,
            shape: self.shape.clone(),
            layout: self.layout,
            seed_meta: self.seed_meta.clone(),
            extra: self.extra.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::InvalidTensor("header longer than u32::MAX".into()))?;

        let payload_len = self.data.len() * self.dtype().size();
        let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + payload_len);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: PREAMBLE_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < PREAMBLE_LEN {
            return Err(Error::Truncated {
                expected: PREAMBLE_LEN,
                found: bytes.len(),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("length checked")) as usize;
        let header_end = PREAMBLE_LEN
            .checked_add(header_len)
            .ok_or_else(|| Error::InvalidTensor("header length overflow".into()))?;
        if bytes.len() < header_end {
            return Err(Error::Truncated {
                expected: header_end,
                found: bytes.len(),
            });
        }
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])?;
        let dtype: DType = match &header.dtype {
            Value::String(s) if s == "f32" => DType::F32,
            Value::String(s) if s == "u8" => DType::U8,
            other => return Err(Error::UnsupportedDtype(other.to_string())),
        };
        if !(2..=4).contains(&header.shape.len()) || header.shape.contains(&0) {
            return Err(Error::InvalidTensor(format!("invalid shape {:?}", header.shape)));
        }
        let n = element_count(&header.shape)?;
        let payload_len = n
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::ShapeOverflow(header.shape.clone()))?;
        let expected = header_end
            .checked_add(payload_len)
            .ok_or_else(|| Error::ShapeOverflow(header.shape.clone()))?;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::InvalidTensor(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        let payload = &bytes[header_end..expected];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        let t = TensorContainer {
            layout: header.layout,
            shape: header.shape,
            data,
            seed_meta: header.seed_meta,
            extra: header.extra,
        };
        t.validate()?;
        Ok(t)
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &TensorContainer) -> Result<()> {
    let path = path.as_ref();
    let bytes = tensor.to_bytes()?;
    fs::write(path, bytes).map_err(Error::at(path))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::at(path))?;
    TensorContainer::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn payload(bytes: &[u8]) -> &[u8] {
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        &bytes[PREAMBLE_LEN + header_len..]
    }

    #[test]
    fn zero_tensor_payload() {
        let t = TensorContainer::f32(Layout::Hw, vec![2, 2], vec![0.0; 4]).unwrap();
        let bytes = t.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CLDF");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(payload(&bytes), &[0u8; 16]);
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[10..10 + header_len]).unwrap();
        assert_eq!(header["shape"], serde_json::json!([2, 2]));
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["layout"], "HW");
    }

    #[test]
    fn one_is_little_endian() {
        let t = TensorContainer::f32(Layout::Hwc, vec![1, 1, 1], vec![1.0]).unwrap();
        let bytes = t.to_bytes().unwrap();
        assert_eq!(payload(&bytes), &[0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn bad_magic_rejected() {
        let t = TensorContainer::f32(Layout::Hw, vec![2, 2], vec![0.0; 4]).unwrap();
        let mut bytes = t.to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            TensorContainer::from_bytes(&bytes),
            Err(Error::BadMagic(m)) if &m == b"XXXX"
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let t = TensorContainer::u8(Layout::Hw, vec![3, 3], vec![7; 9]).unwrap();
        let bytes = t.to_bytes().unwrap();
        let err = TensorContainer::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn unknown_version_and_dtype_rejected() {
        let t = TensorContainer::u8(Layout::Hw, vec![1, 1], vec![1]).unwrap();
        let mut bytes = t.to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            TensorContainer::from_bytes(&bytes),
            Err(Error::UnsupportedVersion(2))
        ));

        let header = br#"{"dtype":"f16","shape":[1,1],"layout":"HW"}"#;
        let mut raw = Vec::new();
        raw.extend_from_slice(b"CLDF");
        raw.extend_from_slice(&1u16.to_le_bytes());
        raw.extend_from_slice(&(header.len() as u32).to_le_bytes());
        raw.extend_from_slice(header);
        raw.extend_from_slice(&[0, 0]);
        assert!(matches!(
            TensorContainer::from_bytes(&raw),
            Err(Error::UnsupportedDtype(_))
        ));
    }

    #[test]
    fn shape_overflow_rejected() {
        let header = format!(
            r#"{{"dtype":"f32","shape":[{},{},4],"layout":"HWC"}}"#,
            usize::MAX / 2,
            3
        );
        let mut raw = Vec::new();
        raw.extend_from_slice(b"CLDF");
        raw.extend_from_slice(&1u16.to_le_bytes());
        raw.extend_from_slice(&(header.len() as u32).to_le_bytes());
        raw.extend_from_slice(header.as_bytes());
        assert!(matches!(
            TensorContainer::from_bytes(&raw),
            Err(Error::ShapeOverflow(_))
        ));
    }

    #[test]
    fn inconsistent_payload_is_validation_error() {
        assert!(matches!(
            TensorContainer::f32(Layout::Hw, vec![2, 3], vec![0.0; 5]),
            Err(Error::InvalidTensor(_))
        ));
        assert!(TensorContainer::f32(Layout::Hwc, vec![2, 3], vec![0.0; 6]).is_err());
        assert!(TensorContainer::f32(Layout::Hw, vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let header = br#"{"dtype":"u8","shape":[1,2],"layout":"HW","exporter":{"name":"x","rev":3}}"#;
        let mut raw = Vec::new();
        raw.extend_from_slice(b"CLDF");
        raw.extend_from_slice(&1u16.to_le_bytes());
        raw.extend_from_slice(&(header.len() as u32).to_le_bytes());
        raw.extend_from_slice(header);
        raw.extend_from_slice(&[4, 5]);
        let t = TensorContainer::from_bytes(&raw).unwrap();
        assert_eq!(t.extra["exporter"]["rev"], 3);
        let again = TensorContainer::from_bytes(&t.to_bytes().unwrap()).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn seeded_random_round_trip_through_file() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..8 * 8 * 3).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let t = TensorContainer::f32(Layout::Hwc, vec![8, 8, 3], data)
            .unwrap()
            .with_seed_meta(serde_json::json!({"seed": 11}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.cldf");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        let a = t.as_f32().unwrap();
        let b = back.as_f32().unwrap();
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(back, t);
        assert_eq!(fs::read(&path).unwrap(), back.to_bytes().unwrap());
    }

    fn arb_container() -> impl Strategy<Value = TensorContainer> {
        let dims = prop::collection::vec(1usize..5, 2..=4);
        (dims, any::<bool>()).prop_flat_map(|(shape, is_f32)| {
            let n: usize = shape.iter().product();
            let layout = match shape.len() {
                2 => Layout::Hw,
                3 => Layout::Hwc,
                _ => Layout::Nhwc,
            };
            let data = if is_f32 {
                prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
                    .prop_map(TensorData::F32)
                    .boxed()
            } else {
                prop::collection::vec(any::<u8>(), n)
                    .prop_map(TensorData::U8)
                    .boxed()
            };
            data.prop_map(move |data| TensorContainer {
                layout,
                shape: shape.clone(),
                data,
                seed_meta: None,
                extra: Map::new(),
            })
        })
    }

    proptest! {
        #[test]
        fn write_read_is_byte_identical(t in arb_container()) {
            let bytes = t.to_bytes().unwrap();
            let back = TensorContainer::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
