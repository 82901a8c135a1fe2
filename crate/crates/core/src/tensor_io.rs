//! Binary tensor container shared by feature files, masks, point features and
//! checkpoints.
//!
//! Layout: the 8-byte magic `CDKT0001`, a little-endian `u32` header length,
//! a JSON header `{"dtype":"f32","shape":[...],"order":"row_major"}`, then the
//! raw little-endian `f32` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CDKT0001";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    order: String,
}

/// A decoded tensor: row-major `f32` values with their shape.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_array(a: &ArrayD<f32>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn into_array(self) -> ArrayD<f32> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data).expect("validated shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.dims().to_vec();
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Self { shape, data })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape.as_slice(), device)?.to_dtype(dtype)?)
    }
}

pub fn encode(t: &RawTensor) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        dtype: "f32".into(),
        shape: t.shape.clone(),
        order: "row_major".into(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + 4 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<RawTensor> {
    if bytes.len() < 8 {
        return Err(Error::parse(
            bytes.len() as u64,
            "file ends inside the magic",
        ));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::parse(0, "bad magic, expected CDKT0001"));
    }
    if bytes.len() < 12 {
        return Err(Error::parse(
            bytes.len() as u64,
            "file ends inside the header length",
        ));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let data_start = 12 + hlen;
    if bytes.len() < data_start {
        return Err(Error::parse(
            bytes.len() as u64,
            format!("file ends inside the {hlen}-byte header"),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[12..data_start])
        .map_err(|e| Error::parse(12, format!("invalid header json: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::parse(
            12,
            format!("unsupported dtype `{}`", header.dtype),
        ));
    }
    if header.order != "row_major" {
        return Err(Error::parse(
            12,
            format!("unsupported order `{}`", header.order),
        ));
    }
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::parse(12, "shape product overflows"))?;
    let payload = &bytes[data_start..];
    let expected = count * 4;
    if payload.len() != expected {
        let at = data_start + payload.len().min(expected);
        return Err(Error::parse(
            at as u64,
            format!(
                "payload holds {} bytes, shape {:?} needs {expected}",
                payload.len(),
                header.shape
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawTensor {
        shape: header.shape,
        data,
    })
}

pub fn save(path: impl AsRef<Path>, t: &RawTensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<RawTensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_exact() {
        let bytes = encode(&RawTensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap());
        assert_eq!(&bytes[..8], b"CDKT0001");
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(
            std::str::from_utf8(&bytes[12..12 + hlen]).unwrap(),
            r#"{"dtype":"f32","shape":[2,1],"order":"row_major"}"#
        );
        assert_eq!(bytes.len(), 12 + hlen + 8);
    }

    #[test]
    fn truncation_is_rejected_with_offset() {
        let bytes = encode(&RawTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        for cut in [0, 5, 10, 20, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&RawTensor::new(vec![1], vec![0.0]).unwrap());
        bytes[0] = b'X';
        assert!(matches!(
            decode(&bytes),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(dims in proptest::collection::vec(1usize..4, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 97) & 0x7f7f_ffff)).collect();
            let t = RawTensor::new(dims, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape, t.shape);
            let a: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
