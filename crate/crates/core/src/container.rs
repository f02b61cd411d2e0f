//! Binary checkpoint container shared by model and prefix files:
//!
//! ```text
//! magic      8 bytes
//! header_len u64 little-endian
//! header     header_len bytes of UTF-8 JSON
//! payload    little-endian f64 values to end of file
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"PMXMODL\x01";
pub const PREFIX_MAGIC: &[u8; 8] = b"PMXPRFX\x01";

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(16 + header.len() + payload.len() * 8);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for x in payload {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode<H: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    if bytes.len() < 16 {
        return Err(Error::Load("file shorter than container preamble".into()));
    }
    if &bytes[..8] != magic {
        return Err(Error::Load("bad magic bytes or unsupported version".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if header_len > body.len() {
        return Err(Error::Load(format!(
            "header claims {header_len} bytes, only {} present",
            body.len()
        )));
    }
    let header: H = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Load(format!("corrupt header: {e}")))?;
    let payload_bytes = &body[header_len..];
    if payload_bytes.len() % 8 != 0 {
        return Err(Error::Load("payload is not a whole number of f64 values".into()));
    }
    let payload = payload_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, payload))
}

pub fn write<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, payload: &[f64]) -> Result<()> {
    let bytes = encode(magic, header, payload)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<f64>)> {
    decode(magic, &fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let payload = [1.5, -0.0, f64::MIN_POSITIVE];
        let bytes = encode(MODEL_MAGIC, &vec!["a", "b"], &payload).unwrap();
        let (h, p): (Vec<String>, Vec<f64>) = decode(MODEL_MAGIC, &bytes).unwrap();
        assert_eq!(h, ["a", "b"]);
        assert_eq!(
            p.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            payload.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!(decode::<Vec<String>>(MODEL_MAGIC, &bytes[..bytes.len() - 3]).is_err());
        assert!(decode::<Vec<String>>(PREFIX_MAGIC, &bytes).is_err());
        let mut corrupt = bytes.clone();
        corrupt[17] = b'#';
        assert!(decode::<Vec<String>>(MODEL_MAGIC, &corrupt).is_err());
    }
}
