//! Binary checkpoint: magic `HADESCKP`, `u32` version, `u32` header length,
//! JSON header, then the row-major little-endian tensor payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"HADESCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config: ModelConfig,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.params.named_tensors() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let header = Header {
        version: VERSION,
        config: model.cfg.clone(),
        dtype: T::DTYPE.to_string(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parse and validate the header, returning it with the payload slice.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != version {
        return Err(bad("header version disagrees with preamble"));
    }
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(format!("unknown dtype {other}"))),
    };
    let payload = &body[hlen..];
    let mut spans: Vec<(usize, usize)> = header
        .tensors
        .iter()
        .map(|t| (t.offset, t.offset + t.shape.iter().product::<usize>() * width))
        .collect();
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(bad("tensor directory entries overlap"));
        }
    }
    let used: usize = spans.iter().map(|(a, b)| b - a).sum();
    if spans.last().map_or(0, |s| s.1) > payload.len() {
        return Err(bad("truncated payload"));
    }
    if used != payload.len() {
        return Err(bad(format!(
            "payload is {} bytes, directory describes {used}",
            payload.len()
        )));
    }
    Ok((header, payload))
}

fn decode<T: Scalar, S: Scalar>(payload: &[u8], entry: &TensorEntry) -> Result<Tensor<T>> {
    let n: usize = entry.shape.iter().product();
    let raw = &payload[entry.offset..entry.offset + n * S::BYTES];
    let data = raw
        .chunks_exact(S::BYTES)
        .map(|c| T::of(S::read_le(c).as_f64()))
        .collect();
    Tensor::from_vec(&entry.shape, data)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let (header, payload) = read_header(bytes)?;
    header.config.validate()?;
    let mut params = ModelParams::<T>::zeros(&header.config);
    {
        let mut slots = params.named_tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(bad(format!(
                "expected {} tensors, found {}",
                slots.len(),
                header.tensors.len()
            )));
        }
        for ((name, slot), entry) in slots.iter_mut().zip(&header.tensors) {
            if *name != entry.name || slot.shape() != entry.shape.as_slice() {
                return Err(bad(format!(
                    "expected {name} {:?}, found {} {:?}",
                    slot.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            **slot = match header.dtype.as_str() {
                "f32" => decode::<T, f32>(payload, entry)?,
                _ => decode::<T, f64>(payload, entry)?,
            };
        }
    }
    Model::new(header.config, params)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model<f32> {
        let cfg = ModelConfig {
            n_layer: 2,
            ..ModelConfig::desk_tiny()
        };
        Model::init(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let back: Model<f32> = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back, m);
        let m64 = m.cast::<f64>();
        let back64: Model<f64> = from_bytes(&to_bytes(&m64)).unwrap();
        assert_eq!(back64, m64);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save(&m, &path).unwrap();
        assert_eq!(load::<f32>(&path).unwrap(), m);
        assert!(matches!(
            load::<f32>(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = to_bytes(&model());
        bytes[0] = b'X';
        assert!(from_bytes::<f32>(&bytes).is_err());
    }

    #[test]
    fn version_and_truncation_are_rejected() {
        let bytes = to_bytes(&model());
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(from_bytes::<f32>(&v).is_err());
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 4]).is_err());
    }

    fn rebuild(header: &Header, payload: &[u8]) -> Vec<u8> {
        let json = serde_json::to_vec(header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn overlapping_offsets_are_rejected() {
        let bytes = to_bytes(&model());
        let (mut header, payload) = read_header(&bytes).unwrap();
        let payload = payload.to_vec();
        header.tensors[1].offset = 4;
        let err = from_bytes::<f32>(&rebuild(&header, &payload)).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }
}
