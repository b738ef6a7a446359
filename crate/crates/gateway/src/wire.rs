//! Envelope framing and payload encodings shared by the client and backend
//! protocols.
//!
//! A frame is a 4-byte big-endian length followed by that many bytes of
//! UTF-8 JSON holding one [`Envelope`]. Tensors travel as row-major
//! little-endian f32 blobs in base64 next to an explicit shape; rasters
//! travel as base64 PNG.

use std::io::{self, Read, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{GrayImage, ImageFormat, RgbaImage};
use pigment_core::backend::RawTensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Frames larger than this are refused.
pub const MAX_FRAME: u32 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub session_id: Option<String>,
    pub seq: u64,
    #[serde(default)]
    pub payload: Value,
}

impl Envelope {
    pub fn new(
        kind: impl Into<String>,
        session_id: Option<String>,
        seq: u64,
        payload: Value,
    ) -> Self {
        Self {
            kind: kind.into(),
            session_id,
            seq,
            payload,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("envelopes always serialize")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        serde_json::from_slice(bytes).map_err(|e| WireError::Malformed(e.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(u32),
    #[error("malformed: {0}")]
    Malformed(String),
}

/// Length-prefixes an already serialized envelope.
pub fn frame_bytes(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out
}

pub fn write_frame<W: Write>(w: &mut W, envelope: &Envelope) -> Result<(), WireError> {
    w.write_all(&frame_bytes(&envelope.to_bytes()))?;
    w.flush()?;
    Ok(())
}

/// Reads one frame body. `Ok(None)` on a clean end of stream.
pub fn read_frame_body<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME {
        return Err(WireError::TooLarge(len));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Envelope>, WireError> {
    read_frame_body(r)?
        .map(|b| Envelope::from_bytes(&b))
        .transpose()
}

/// Tensor as carried inside payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    /// Base64 of row-major little-endian f32 values.
    pub data: String,
}

impl From<&RawTensor> for WireTensor {
    fn from(t: &RawTensor) -> Self {
        let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape: t.shape.clone(),
            data: B64.encode(bytes),
        }
    }
}

impl WireTensor {
    pub fn decode(&self) -> Result<RawTensor, WireError> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| WireError::Malformed(e.to_string()))?;
        if bytes.len() % 4 != 0 {
            return Err(WireError::Malformed(
                "tensor byte length not a multiple of 4".into(),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        RawTensor::new(self.shape.clone(), data).map_err(|e| WireError::Malformed(e.to_string()))
    }
}

pub fn png_bytes(image: &RgbaImage) -> Vec<u8> {
    let mut out = io::Cursor::new(Vec::new());
    image
        .write_to(&mut out, ImageFormat::Png)
        .expect("in-memory png encoding");
    out.into_inner()
}

pub fn encode_png(image: &RgbaImage) -> String {
    B64.encode(png_bytes(image))
}

pub fn encode_mask_png(mask: &GrayImage) -> String {
    let mut out = io::Cursor::new(Vec::new());
    mask.write_to(&mut out, ImageFormat::Png)
        .expect("in-memory png encoding");
    B64.encode(out.into_inner())
}

pub fn decode_png_bytes(bytes: &[u8]) -> Result<image::DynamicImage, WireError> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| WireError::Malformed(e.to_string()))
}

pub fn decode_png(b64: &str) -> Result<RgbaImage, WireError> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| WireError::Malformed(e.to_string()))?;
    Ok(decode_png_bytes(&bytes)?.into_rgba8())
}

pub fn decode_mask_png(b64: &str) -> Result<GrayImage, WireError> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| WireError::Malformed(e.to_string()))?;
    Ok(decode_png_bytes(&bytes)?.into_luma8())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn frame_round_trip() {
        let env = Envelope::new("ping", None, 1, json!({}));
        let mut buf = Vec::new();
        write_frame(&mut buf, &env).unwrap();
        assert_eq!(&buf[..4], &(buf.len() as u32 - 4).to_be_bytes());
        let mut r = io::Cursor::new(buf);
        assert_eq!(read_frame(&mut r).unwrap(), Some(env));
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }

    #[test]
    fn envelope_field_layout() {
        let env = Envelope::new("ack", Some("s1".into()), 3, json!({"b": 1, "a": 2}));
        assert_eq!(
            String::from_utf8(env.to_bytes()).unwrap(),
            r#"{"type":"ack","session_id":"s1","seq":3,"payload":{"a":2,"b":1}}"#
        );
    }

    #[test]
    fn oversized_frames_are_refused() {
        let mut r = io::Cursor::new((MAX_FRAME + 1).to_be_bytes().to_vec());
        assert!(matches!(read_frame(&mut r), Err(WireError::TooLarge(_))));
    }

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let t = RawTensor::new(vec![1, 2, 2], vec![0.1, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap();
        let w = WireTensor::from(&t);
        let back = w.decode().unwrap();
        assert_eq!(back.shape, t.shape);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.data), bits(&t.data));
        assert!(WireTensor {
            shape: vec![3],
            data: w.data.clone()
        }
        .decode()
        .is_err());
        assert!(WireTensor {
            shape: vec![1],
            data: "AAA".into()
        }
        .decode()
        .is_err());
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let img = RgbaImage::from_fn(9, 5, |x, y| {
            image::Rgba([x as u8 * 20, y as u8 * 40, 7, (x * y) as u8])
        });
        assert_eq!(decode_png(&encode_png(&img)).unwrap(), img);
        assert!(decode_png("bm90IGEgcG5n").is_err());
    }
}
