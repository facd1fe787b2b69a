//! Binary container shared by every persisted artifact:
//! 5-byte magic, u32 little-endian header length, JSON header, raw payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 5] = b"MPLG1";
pub const ADAPTER_MAGIC: &[u8; 5] = b"MADP1";
pub const BANK_MAGIC: &[u8; 5] = b"MBNK1";
pub const DATASTORE_MAGIC: &[u8; 5] = b"MKNN1";

pub fn encode<H: Serialize>(magic: &[u8; 5], header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    let mut out = Vec::with_capacity(9 + json.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Split a container into its parsed header and payload bytes.
pub fn decode<'b, H: DeserializeOwned>(magic: &[u8; 5], bytes: &'b [u8]) -> Result<(H, &'b [u8])> {
    if bytes.len() < 9 {
        return Err(Error::Format("file shorter than the fixed header".into()));
    }
    if &bytes[..5] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..5]),
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = &bytes[9..];
    if body.len() < len {
        return Err(Error::Format(format!(
            "header declares {len} bytes, only {} present",
            body.len()
        )));
    }
    let header = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::Format(format!("header json: {e}")))?;
    Ok((header, &body[len..]))
}

pub fn f32_bytes<'v>(values: impl IntoIterator<Item = &'v f64>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

/// Reads f32 little-endian values as f64. `bytes` must hold exactly `count`
/// values.
pub fn read_f32s(bytes: &[u8], count: usize) -> Result<Vec<f64>> {
    if bytes.len() != count * 4 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {}",
            bytes.len(),
            count * 4
        )));
    }
    let out: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("payload contains non-finite values".into()));
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

/// Round a value through f32 so in-memory parameters match their persisted
/// form exactly.
pub fn quantize(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_rejections() {
        let payload = f32_bytes(&[1.5, -2.0]);
        let bytes = encode(MODEL_MAGIC, &serde_json::json!({"n": 2}), &payload).unwrap();
        let (h, p): (serde_json::Value, _) = decode(MODEL_MAGIC, &bytes).unwrap();
        assert_eq!(h["n"], 2);
        assert_eq!(read_f32s(p, 2).unwrap(), vec![1.5, -2.0]);

        assert!(matches!(decode::<serde_json::Value>(BANK_MAGIC, &bytes), Err(Error::Format(_))));
        assert!(matches!(read_f32s(&p[..7], 2), Err(Error::Format(_))));
        assert!(matches!(decode::<serde_json::Value>(MODEL_MAGIC, &bytes[..12]), Err(Error::Format(_))));
    }
}
