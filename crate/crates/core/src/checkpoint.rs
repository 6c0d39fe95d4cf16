//! Checkpoint container.
//!
//! Layout: magic `GNCK`, version byte `1`, a little-endian `u32` manifest
//! length, the UTF-8 JSON manifest, then every tensor payload in manifest
//! order as row-major little-endian elements.
//!
//! The manifest is `{"config": <object>, "tensors": [{name, shape, dtype}, ..]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GNCK";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode<T: Scalar>(config: &serde_json::Value, tensors: &[(String, &Tensor<T>)]) -> Result<Vec<u8>> {
    let manifest = Manifest {
        config: config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: T::DTYPE.into() })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::contract("manifest exceeds 4 GiB"))?;
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * T::BYTES).sum();
    let mut out = Vec::with_capacity(9 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Parses a checkpoint; `origin` names the source in error messages.
pub fn decode<T: Scalar>(bytes: &[u8], origin: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor<T>)>)> {
    let bad = |msg: String| Error::format(origin, msg);
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(bad("missing GNCK magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let len = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    let json = bytes.get(9..9 + len).ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
    let mut offset = 9 + len;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        if entry.dtype != T::DTYPE {
            return Err(bad(format!("tensor {} has dtype {}, expected {}", entry.name, entry.dtype, T::DTYPE)));
        }
        let numel: usize = entry.shape.iter().product();
        let end = offset + numel * T::BYTES;
        let raw = bytes.get(offset..end).ok_or_else(|| bad(format!("truncated payload for {}", entry.name)))?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let t = Tensor::new(entry.shape, data).map_err(|e| bad(format!("tensor {}: {e}", entry.name)))?;
        tensors.push((entry.name, t));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((manifest.config, tensors))
}

pub fn read<T: Scalar>(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor<T>)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::vector(vec![1.5f32, -2.0]);
        let bytes = encode(&serde_json::json!({"k": 1}), &[("w".into(), &t)]).unwrap();
        assert_eq!(&bytes[..4], b"GNCK");
        assert_eq!(bytes[4], 1);
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[9..9 + len]).unwrap();
        assert_eq!(manifest["tensors"][0]["dtype"], "f32");
        assert_eq!(manifest["tensors"][0]["shape"], serde_json::json!([2]));
        assert_eq!(&bytes[9 + len..], &[0, 0, 0xc0, 0x3f, 0, 0, 0, 0xc0]);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::vector(vec![1.0f32]);
        let bytes = encode(&serde_json::Value::Null, &[("w".into(), &t)]).unwrap();
        let p = Path::new("mem");
        assert!(decode::<f32>(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f32>(&extra, p).is_err());
        assert!(decode::<f64>(&bytes, p).is_err());
        assert!(decode::<f32>(b"NOPE\x01\0\0\0\0", p).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(bits in proptest::collection::vec(any::<u32>(), 1..64), split in 1usize..8) {
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let n = data.len();
            let a = Tensor::vector(data.clone());
            let b = Tensor::vector(data.iter().take(split.min(n)).copied().collect());
            let bytes = encode(&serde_json::json!({"x": [1, 2]}), &[("a".into(), &a), ("b".into(), &b)]).unwrap();
            let (cfg, back) = decode::<f32>(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(cfg, serde_json::json!({"x": [1, 2]}));
            prop_assert_eq!(back.len(), 2);
            let got: Vec<u32> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, bits);
            prop_assert_eq!(encode(&serde_json::json!({"x": [1, 2]}), &[("a".into(), &back[0].1), ("b".into(), &back[1].1)]).unwrap(), bytes);
        }
    }
}
